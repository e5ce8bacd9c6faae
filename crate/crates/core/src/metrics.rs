//! Evaluation: IoU accuracy, IoU histogram, expression-conditioned
//! breakdowns and single-sample throughput.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datahub::tokenize;
use crate::geometry::BoundingBox;

pub use crate::geometry::{giou, iou};

pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.25, 0.5, 0.75, 0.9];
pub const HISTOGRAM_BINS: usize = 10;
/// Fewer timed forwards than this are rejected.
pub const MIN_TIMED: usize = 100;

const ATTRIBUTE_WORDS: &str = include_str!("../lexicons/attribute.txt");
const SPATIAL_WORDS: &str = include_str!("../lexicons/spatial.txt");

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no evaluation records")]
    Empty,
    #[error("lexicon {path}: {reason}")]
    Lexicon { path: String, reason: String },
    #[error("bad length buckets {0:?} (expected e.g. \"1-3,4-6,7-10,11+\")")]
    Buckets(String),
    #[error("need at least {MIN_TIMED} timed iterations, got {0}")]
    TooFewIterations(usize),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub pred: BoundingBox<f64>,
    pub gt: BoundingBox<f64>,
    pub iou: f64,
    pub confidence: f64,
    pub expression: String,
    pub length: usize,
    pub has_attribute: bool,
    pub has_spatial: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    pub words: BTreeSet<String>,
}

impl Lexicon {
    pub fn parse(text: &str) -> Self {
        let words = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(str::to_lowercase).collect();
        Self { words }
    }

    pub fn load(path: &Path) -> Result<Self, MetricsError> {
        let text = std::fs::read_to_string(path).map_err(|e| MetricsError::Lexicon { path: path.display().to_string(), reason: e.to_string() })?;
        let lex = Self::parse(&text);
        if lex.words.is_empty() {
            return Err(MetricsError::Lexicon { path: path.display().to_string(), reason: "no words".into() });
        }
        Ok(lex)
    }

    pub fn default_attribute() -> Self {
        Self::parse(ATTRIBUTE_WORDS)
    }

    pub fn default_spatial() -> Self {
        Self::parse(SPATIAL_WORDS)
    }

    pub fn matches(&self, tokens: &[String]) -> bool {
        tokens.iter().any(|t| self.words.contains(t))
    }
}

/// Inclusive token-count ranges; `hi = None` is open-ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthBuckets(pub Vec<(usize, Option<usize>)>);

impl Default for LengthBuckets {
    fn default() -> Self {
        Self(vec![(1, Some(3)), (4, Some(6)), (7, Some(10)), (11, None)])
    }
}

impl LengthBuckets {
    pub fn parse(spec: &str) -> Result<Self, MetricsError> {
        let bad = || MetricsError::Buckets(spec.to_owned());
        let mut out = Vec::new();
        for part in spec.split(',').map(str::trim) {
            let b = if let Some(lo) = part.strip_suffix('+') {
                (lo.parse().map_err(|_| bad())?, None)
            } else {
                let (lo, hi) = part.split_once('-').ok_or_else(bad)?;
                let (lo, hi): (usize, usize) = (lo.parse().map_err(|_| bad())?, hi.parse().map_err(|_| bad())?);
                if hi < lo {
                    return Err(bad());
                }
                (lo, Some(hi))
            };
            out.push(b);
        }
        if out.is_empty() {
            return Err(bad());
        }
        Ok(Self(out))
    }

    pub fn label(&self, i: usize) -> String {
        match self.0[i] {
            (lo, Some(hi)) => format!("{lo}-{hi}"),
            (lo, None) => format!("{lo}+"),
        }
    }

    pub fn index_of(&self, len: usize) -> Option<usize> {
        self.0.iter().position(|&(lo, hi)| len >= lo && hi.is_none_or(|h| len <= h))
    }
}

/// Token count and lexicon membership of an expression.
pub fn tag_expression(expression: &str, attribute: &Lexicon, spatial: &Lexicon) -> (usize, bool, bool) {
    let tokens = tokenize(expression);
    (tokens.len(), attribute.matches(&tokens), spatial.matches(&tokens))
}

pub fn make_record(
    id: impl Into<String>,
    pred: BoundingBox<f64>,
    gt: BoundingBox<f64>,
    confidence: f64,
    expression: &str,
    attribute: &Lexicon,
    spatial: &Lexicon,
) -> EvalRecord {
    let (length, has_attribute, has_spatial) = tag_expression(expression, attribute, spatial);
    EvalRecord { id: id.into(), pred, gt, iou: iou(&pred, &gt), confidence, expression: expression.to_owned(), length, has_attribute, has_spatial }
}

pub fn accuracy_at(records: &[EvalRecord], tau: f64) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(records.iter().filter(|r| r.iou >= tau).count() as f64 / records.len() as f64)
}

/// Counts over `[0,0.1) … [0.9,1.0]`; IoU 1 lands in the last bin.
pub fn iou_histogram(records: &[EvalRecord]) -> [usize; HISTOGRAM_BINS] {
    let mut h = [0; HISTOGRAM_BINS];
    for r in records {
        let bin = ((r.iou * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1);
        h[bin] += 1;
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStat {
    pub label: String,
    pub count: usize,
    /// Absent for empty buckets.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

fn bucket<'a>(label: &str, members: impl Iterator<Item = &'a EvalRecord>, tau: f64) -> BucketStat {
    let (mut n, mut hit) = (0, 0);
    for r in members {
        n += 1;
        hit += (r.iou >= tau) as usize;
    }
    BucketStat { label: label.to_owned(), count: n, accuracy: (n > 0).then(|| hit as f64 / n as f64) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub attribute: Vec<BucketStat>,
    pub spatial: Vec<BucketStat>,
    pub length: Vec<BucketStat>,
}

/// Accuracy@`tau` with/without attribute words, with/without spatial words
/// and per length bucket. A record may count in several rows.
pub fn breakdown(records: &[EvalRecord], buckets: &LengthBuckets, tau: f64) -> Breakdown {
    let two = |f: fn(&EvalRecord) -> bool, yes: &str, no: &str| {
        vec![bucket(yes, records.iter().filter(|r| f(r)), tau), bucket(no, records.iter().filter(|r| !f(r)), tau)]
    };
    Breakdown {
        attribute: two(|r| r.has_attribute, "with attribute", "without attribute"),
        spatial: two(|r| r.has_spatial, "with spatial", "without spatial"),
        length: (0..buckets.0.len())
            .map(|i| bucket(&buckets.label(i), records.iter().filter(|r| buckets.index_of(r.length) == Some(i)), tau))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub samples_per_second: f64,
    pub timed_iterations: usize,
    pub warmup_iterations: usize,
    pub mean_ms: f64,
    pub hardware: String,
}

pub fn hardware_description() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split_once(':')).map(|(_, v)| v.trim().to_owned()))
        .unwrap_or_else(|| std::env::consts::ARCH.to_owned());
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{cpu} ({threads} threads, {})", std::env::consts::OS)
}

/// Throughput from per-iteration durations (seconds), skipping the first `warmup`.
pub fn throughput_from_durations(durations: &[f64], warmup: usize) -> Result<Throughput, MetricsError> {
    let timed = &durations[warmup.min(durations.len())..];
    if timed.len() < MIN_TIMED {
        return Err(MetricsError::TooFewIterations(timed.len()));
    }
    let total: f64 = timed.iter().sum();
    Ok(Throughput {
        samples_per_second: timed.len() as f64 / total,
        timed_iterations: timed.len(),
        warmup_iterations: warmup,
        mean_ms: total / timed.len() as f64 * 1e3,
        hardware: hardware_description(),
    })
}

/// Time `iters` single-sample forwards after `warmup` untimed ones.
pub fn throughput(mut forward: impl FnMut(), warmup: usize, iters: usize) -> Result<Throughput, MetricsError> {
    if iters < MIN_TIMED {
        return Err(MetricsError::TooFewIterations(iters));
    }
    let mut durations = Vec::with_capacity(warmup + iters);
    for _ in 0..warmup + iters {
        let t = Instant::now();
        forward();
        durations.push(t.elapsed().as_secs_f64());
    }
    throughput_from_durations(&durations, warmup)
}

/// Accumulates records from concurrent workers.
#[derive(Debug, Default)]
pub struct RecordSink {
    records: Mutex<Vec<EvalRecord>>,
}

impl RecordSink {
    pub fn push(&self, r: EvalRecord) {
        self.records.lock().expect("record sink poisoned").push(r);
    }

    /// All records, ordered by id.
    pub fn finish(self) -> Vec<EvalRecord> {
        let mut v = self.records.into_inner().expect("record sink poisoned");
        v.sort_by(|a, b| a.id.cmp(&b.id));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub samples: usize,
    /// Keyed by threshold, e.g. `"0.50"`.
    pub accuracy: BTreeMap<String, f64>,
    pub iou_histogram: Vec<usize>,
    pub mean_iou: f64,
    pub breakdown: Breakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub throughput: Option<Throughput>,
}

impl EvalReport {
    pub fn build(split: &str, records: &[EvalRecord], thresholds: &[f64], buckets: &LengthBuckets) -> Result<Self, MetricsError> {
        let mut accuracy = BTreeMap::new();
        for &t in thresholds {
            accuracy.insert(format!("{t:.2}"), accuracy_at(records, t)?);
        }
        Ok(Self {
            split: split.to_owned(),
            samples: records.len(),
            accuracy,
            iou_histogram: iou_histogram(records).to_vec(),
            mean_iou: records.iter().map(|r| r.iou).sum::<f64>() / records.len() as f64,
            breakdown: breakdown(records, buckets, 0.5),
            throughput: None,
        })
    }

    pub fn accuracy_at_half(&self) -> Option<f64> {
        self.accuracy.get("0.50").copied()
    }

    /// `report.json`, `records.csv`, `iou_histogram.svg`, `breakdown.svg`.
    pub fn write_all(&self, dir: &Path, records: &[EvalRecord]) -> Result<(), MetricsError> {
        let io = |p: &Path| {
            let path = p.display().to_string();
            move |source| MetricsError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let json = serde_json::to_string_pretty(self).expect("report serializes") + "\n";
        let p = dir.join("report.json");
        std::fs::write(&p, json).map_err(io(&p))?;
        let p = dir.join("records.csv");
        write_records_csv(&p, records)?;
        let p = dir.join("iou_histogram.svg");
        let labels: Vec<String> = (0..HISTOGRAM_BINS).map(|i| format!("{:.1}", i as f64 / 10.0)).collect();
        let values: Vec<f64> = self.iou_histogram.iter().map(|&c| c as f64).collect();
        std::fs::write(&p, bar_chart_svg("IoU distribution", &labels, &values)).map_err(io(&p))?;
        let p = dir.join("breakdown.svg");
        let rows: Vec<&BucketStat> = self.breakdown.attribute.iter().chain(&self.breakdown.spatial).chain(&self.breakdown.length).collect();
        let labels: Vec<String> = rows.iter().map(|b| b.label.clone()).collect();
        let values: Vec<f64> = rows.iter().map(|b| b.accuracy.unwrap_or(0.0)).collect();
        std::fs::write(&p, bar_chart_svg("accuracy@0.5 by expression type", &labels, &values)).map_err(io(&p))?;
        Ok(())
    }
}

pub fn write_records_csv(path: &Path, records: &[EvalRecord]) -> Result<(), MetricsError> {
    let io = |e: std::io::Error| MetricsError::Io { path: path.display().to_string(), source: e };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
    w.write_record([
        "id", "pred_x", "pred_y", "pred_w", "pred_h", "gt_x", "gt_y", "gt_w", "gt_h", "iou", "confidence", "length", "has_attribute", "has_spatial",
        "expression",
    ])
    .map_err(|e| io(e.into()))?;
    for r in records {
        let [px, py, pw, ph] = r.pred.to_xywh();
        let [gx, gy, gw, gh] = r.gt.to_xywh();
        let nums = [px, py, pw, ph, gx, gy, gw, gh, r.iou, r.confidence].map(|v| format!("{v:.4}"));
        let mut row: Vec<String> = vec![r.id.clone()];
        row.extend(nums);
        row.extend([r.length.to_string(), r.has_attribute.to_string(), r.has_spatial.to_string(), r.expression.clone()]);
        w.write_record(&row).map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Plain vertical bar chart.
pub fn bar_chart_svg(title: &str, labels: &[String], values: &[f64]) -> String {
    let (w, h, pad) = (60.0 * labels.len().max(1) as f64 + 80.0, 320.0, 40.0);
    let max = values.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{pad}" y="20" font-size="14">{}</text>"#, xml_escape(title));
    let plot_h = h - 2.5 * pad;
    for (i, (l, &v)) in labels.iter().zip(values).enumerate() {
        let bh = v / max * plot_h;
        let x = pad + i as f64 * 60.0;
        let y = h - 1.5 * pad - bh;
        let _ = writeln!(s, r##"<rect x="{x}" y="{y:.1}" width="44" height="{bh:.1}" fill="#4a78b5"/>"##);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, x + 22.0, y - 4.0, fmt_value(v));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, x + 22.0, h - pad, xml_escape(l));
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_value(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}
