//! Command-line entry points. Each `cmd_*` is callable from Rust as well.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::config::{data_path, ConfigError, RunConfig};
use crate::datahub::convert::convert_refer;
use crate::datahub::{load_manifest, random_embeddings, DataError, Split, Vocabulary, EMBED_DIM};
use crate::geometry::BoundingBox;
use crate::graph::ParamStore;
use crate::image_ops::{load_rgb, save_rgb, Image};
use crate::metrics::{throughput, EvalRecord, EvalReport, LengthBuckets, MetricsError, Throughput};
use crate::model::{choose_anchors, prepare_image, Model, ModelError};
use crate::trainer::{accuracy_hook, evaluate, load_data, Restored, TrainData, TrainError, Trainer};

pub const THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Runtime(e.into()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => c.into(),
            other => CliError::Runtime(other.into()),
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.into())
            }
        }
    )*};
}
runtime_from!(DataError, ModelError, MetricsError, std::io::Error);

#[derive(Debug, Parser)]
#[command(name = "simrec", version, about = "Referring expression comprehension toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a REFER-style dataset into per-split manifests.
    Convert(ConvertArgs),
    /// Train from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a report.
    Eval(EvalArgs),
    /// Ground one expression in one image.
    Predict(PredictArgs),
    /// One training run per value of a config field.
    Ablate(AblateArgs),
    /// Measure single-sample inference throughput.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Directory holding instances.json and the refs file.
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Prefix for image file names inside the manifests.
    #[arg(long, default_value = "train2014")]
    pub image_dir: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Dotted-path override, e.g. `--set resolution=320`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
    /// Run directory; defaults to `runs/<config hash>`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest to evaluate; the checkpoint's own evaluation data when absent.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    pub split: String,
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
    /// Use raw weights even when the checkpoint carries an EMA shadow.
    #[arg(long)]
    pub raw: bool,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub expression: String,
    /// Write a copy of the image with the box drawn.
    #[arg(long)]
    pub draw: Option<PathBuf>,
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Config path to vary, e.g. `scales_used` or `head.paradigm`.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated values; JSON literals or bare strings.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, default_value = "sweep")]
    pub out: PathBuf,
    /// Run the values concurrently.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Checkpoint to time; otherwise a freshly initialized model from `--config`.
    #[arg(long, conflicts_with = "config")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Convert(a) => {
            for (split, n) in cmd_convert(&a.source, &a.out, &a.image_dir)? {
                println!("{split}: {n} entries");
            }
        }
        Command::Train(a) => {
            let out = cmd_train(&a)?;
            println!("run directory: {}", out.run_dir.display());
            if let Some(acc) = out.accuracy {
                println!("accuracy@0.5: {:.4}", acc);
            }
        }
        Command::Eval(a) => {
            let report = cmd_eval(&a)?;
            println!("accuracy@0.5: {:.4}", report.accuracy_at_half().unwrap_or(0.0));
        }
        Command::Predict(a) => {
            let p = cmd_predict(&a)?;
            let [x1, y1, x2, y2] = p.bbox.corners();
            println!("box: {x1:.1} {y1:.1} {x2:.1} {y2:.1}  confidence: {:.4}", p.confidence);
        }
        Command::Ablate(a) => {
            let rows = cmd_ablate(&a)?;
            print!("{}", ablation_csv(&a.axis, &rows));
        }
        Command::Bench(a) => {
            let t = cmd_bench(&a)?;
            println!("{:.2} samples/s ({:.2} ms/sample over {} iterations) on {}", t.samples_per_second, t.mean_ms, t.timed_iterations, t.hardware);
        }
    }
    Ok(())
}

pub fn cmd_convert(source: &Path, out: &Path, image_dir: &str) -> Result<Vec<(Split, usize)>, CliError> {
    Ok(convert_refer(source, out, image_dir)?.into_iter().collect())
}

fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig, CliError> {
    let cfg = RunConfig::load(path)?.with_overrides(overrides)?;
    for w in cfg.validate()? {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    /// Accuracy@0.5 of the final weights on the evaluation set.
    pub accuracy: Option<f64>,
    pub losses: Vec<f64>,
}

pub fn cmd_train(a: &TrainArgs) -> Result<TrainOutcome, CliError> {
    let (cfg, train, val) = match &a.resume {
        Some(ckpt) => {
            // data comes from the config stored in the checkpoint
            let r = Restored::<f32>::load(ckpt, false)?;
            let (train, val) = load_data(&r.cfg)?;
            (r.cfg, train, val)
        }
        None => {
            let cfg = load_config(&a.config, &a.overrides)?;
            let (train, val) = load_data(&cfg)?;
            (cfg, train, val)
        }
    };
    let run_dir = a.run_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(&cfg.hash()[..12]));
    train_in_dir(cfg, train, val, &run_dir, a.resume.as_deref())
}

fn train_in_dir(cfg: RunConfig, train: TrainData, val: Option<TrainData>, run_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome, CliError> {
    let batch = cfg.data.batch_size;
    let mut t = match resume {
        Some(p) => Trainer::<f32>::resume(p, train)?,
        None => Trainer::<f32>::new(cfg, train)?,
    };
    t.attach_run_dir(run_dir)?;
    match &val {
        Some(v) => {
            let mut hook = accuracy_hook::<f32>(v, batch);
            t.run(Some(&mut hook))?;
        }
        None => t.run(None)?,
    }
    let accuracy = match &val {
        Some(v) => {
            let ps = if t.cfg.ema.enabled { t.ema_params() } else { t.state.params.clone() };
            let records = evaluate(&t.model, &ps, v, batch)?;
            let report = EvalReport::build("eval", &records, &THRESHOLDS, &LengthBuckets::default())?;
            report.write_all(&run_dir.join("report"), &records)?;
            report.accuracy_at_half()
        }
        None => None,
    };
    Ok(TrainOutcome { run_dir: run_dir.to_owned(), accuracy, losses: t.history.iter().map(|r| r.loss.total).collect() })
}

fn eval_data(r: &Restored<f32>, manifest: Option<&Path>, split: &str) -> Result<TrainData, CliError> {
    let split = Split::parse(split).ok_or_else(|| CliError::Validation(format!("unknown split {split:?}")))?;
    match manifest {
        Some(m) => {
            let load = load_manifest(&data_path(m), split)?;
            if load.samples.is_empty() {
                return Err(CliError::Validation(format!("split {split} is not present in {}", m.display())));
            }
            Ok(TrainData::from_files(load.samples))
        }
        None => {
            let (train, val) = load_data(&r.cfg)?;
            match (split, val) {
                (Split::Train, _) => Ok(train),
                (_, Some(v)) if !v.samples.is_empty() && v.samples.iter().all(|s| s.split == split) => Ok(v),
                _ => Err(CliError::Validation(format!("split {split} is not available without --manifest"))),
            }
        }
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<EvalReport, CliError> {
    let r = Restored::<f32>::load(&a.checkpoint, !a.raw)?;
    let data = eval_data(&r, a.manifest.as_deref(), &a.split)?;
    let records = evaluate(&r.model, &r.params, &data, a.batch_size)?;
    let report = EvalReport::build(&a.split, &records, &THRESHOLDS, &LengthBuckets::default())?;
    report.write_all(&a.out, &records)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PredictOutput {
    pub bbox: BoundingBox<f64>,
    pub confidence: f64,
}

pub fn cmd_predict(a: &PredictArgs) -> Result<PredictOutput, CliError> {
    if crate::datahub::tokenize(&a.expression).is_empty() {
        return Err(CliError::Validation("expression has no tokens".into()));
    }
    let r = Restored::<f32>::load(&a.checkpoint, !a.raw)?;
    let tokens = r.model.tokens(&a.expression).map_err(|e| CliError::Validation(e.to_string()))?;
    let img = load_rgb(&a.image).map_err(|e| anyhow::anyhow!("cannot read image {}: {e}", a.image.display()))?;
    let (input, lb) = prepare_image(&img, r.model.resolution);
    let p = r.model.predict(&r.params, &[&input], &[tokens], &[lb])?[0];
    if let Some(out) = &a.draw {
        save_rgb(&draw_box(&img, &p.bbox, [1.0, 0.0, 0.0]), out).map_err(|e| anyhow::anyhow!("cannot write {}: {e}", out.display()))?;
    }
    Ok(PredictOutput { bbox: p.bbox, confidence: p.confidence })
}

/// Copy of `img` with a 2-pixel rectangle outline.
pub fn draw_box(img: &Image, b: &BoundingBox<f64>, rgb: [f32; 3]) -> Image {
    let mut out = img.clone();
    let (h, w, _) = img.dim();
    if w == 0 || h == 0 {
        return out;
    }
    let [x1, y1, x2, y2] = b.corners();
    let cx = |v: f64| (v.round().max(0.0) as usize).min(w - 1);
    let cy = |v: f64| (v.round().max(0.0) as usize).min(h - 1);
    let (x1, x2, y1, y2) = (cx(x1), cx(x2), cy(y1), cy(y2));
    let mut put = |y: usize, x: usize| {
        for (c, v) in rgb.iter().enumerate() {
            out[[y, x, c]] = *v;
        }
    };
    for t in 0..2 {
        for x in x1..=x2 {
            put((y1 + t).min(h - 1), x);
            put(y2.saturating_sub(t), x);
        }
        for y in y1..=y2 {
            put(y, (x1 + t).min(w - 1));
            put(y, x2.saturating_sub(t));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub choice: String,
    /// Accuracy@0.5 in percent.
    pub accuracy: f64,
    /// Difference to the baseline row in percentage points.
    pub delta: f64,
    pub baseline: bool,
}

/// `choice,acc,delta` with the baseline formatted `+0.00`.
pub fn ablation_csv(axis: &str, rows: &[AblationRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([axis, "acc", "delta"]).expect("in-memory write");
    for r in rows {
        w.write_record([r.choice.clone(), format!("{:.2}", r.accuracy), format!("{:+.2}", r.delta)]).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

fn current_value(cfg: &RunConfig, axis: &str) -> Option<serde_json::Value> {
    let v = serde_json::to_value(cfg).ok()?;
    axis.split('.').try_fold(v, |v, k| match v {
        serde_json::Value::Object(mut m) => m.remove(k),
        serde_json::Value::Array(mut a) => k.parse::<usize>().ok().filter(|&i| i < a.len()).map(|i| a.swap_remove(i)),
        _ => None,
    })
}

fn value_matches(current: &serde_json::Value, choice: &str) -> bool {
    let parsed = serde_json::from_str::<serde_json::Value>(choice).unwrap_or_else(|_| serde_json::Value::String(choice.to_owned()));
    match (current, &parsed) {
        (serde_json::Value::Object(m), serde_json::Value::String(s)) => m.get("kind").and_then(|k| k.as_str()) == Some(s),
        _ => *current == parsed,
    }
}

/// One run per value with the shared seed, into `<out>/<axis>=<value>/`, plus
/// `<out>/results.csv`. The baseline is the value the base config already
/// has, else the first value.
pub fn cmd_ablate(a: &AblateArgs) -> Result<Vec<AblationRow>, CliError> {
    let base = load_config(&a.config, &a.overrides)?;
    let current = current_value(&base, &a.axis).ok_or_else(|| CliError::Validation(format!("{}: no such config field", a.axis)))?;
    let mut configs = Vec::with_capacity(a.values.len());
    for v in &a.values {
        let cfg = base.with_overrides(&[format!("{}={v}", a.axis)])?;
        cfg.validate()?;
        configs.push(cfg);
    }
    let baseline = a.values.iter().position(|v| value_matches(&current, v)).unwrap_or(0);
    let run_one = |(v, cfg): (&String, RunConfig)| -> Result<f64, CliError> {
        let (train, val) = load_data(&cfg)?;
        let dir = a.out.join(format!("{}={v}", a.axis));
        let out = train_in_dir(cfg, train, val, &dir, None)?;
        out.accuracy.ok_or_else(|| CliError::Validation("ablation needs evaluation data".into()))
    };
    let jobs: Vec<(&String, RunConfig)> = a.values.iter().zip(configs).collect();
    let accs: Vec<f64> = if a.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs.into_iter().map(|j| s.spawn(move || run_one(j))).collect();
            handles.into_iter().map(|h| h.join().expect("ablation worker panicked")).collect::<Result<_, _>>()
        })?
    } else {
        jobs.into_iter().map(run_one).collect::<Result<_, _>>()?
    };
    let base_acc = accs[baseline] * 100.0;
    let rows: Vec<AblationRow> = a
        .values
        .iter()
        .zip(&accs)
        .enumerate()
        .map(|(i, (v, &acc))| AblationRow {
            choice: v.clone(),
            accuracy: acc * 100.0,
            delta: if i == baseline { 0.0 } else { acc * 100.0 - base_acc },
            baseline: i == baseline,
        })
        .collect();
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("results.csv"), ablation_csv(&a.axis, &rows))?;
    Ok(rows)
}

pub fn cmd_bench(a: &BenchArgs) -> Result<Throughput, CliError> {
    let (model, ps) = match (&a.checkpoint, &a.config) {
        (Some(c), _) => {
            let r = Restored::<f32>::load(c, true)?;
            (r.model, r.params)
        }
        (None, Some(c)) => {
            let cfg = load_config(c, &a.overrides)?;
            let vocab = Vocabulary::build(["a"], 1);
            let table = random_embeddings(&vocab, EMBED_DIM, cfg.seed);
            let maps = if cfg.fusion.head_per_scale { cfg.scales_used } else { 1 };
            let anchors = choose_anchors(&cfg, maps, &[]).map_err(ModelError::from)?;
            let mut ps = ParamStore::<f32>::new();
            let (m, _) = Model::build(&mut ps, &cfg, vocab, &table, anchors, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
            (m, ps)
        }
        (None, None) => return Err(CliError::Validation("bench needs --checkpoint or --config".into())),
    };
    let img = Image::from_elem((model.resolution, model.resolution, 3), 0.5);
    let tokens = model.tokens("the object on the left").unwrap_or_else(|_| model.tokens("a").expect("vocabulary has UNK"));
    let mut failure = None;
    let t = throughput(
        || {
            if let Err(e) = model.infer(&ps, &[&img], std::slice::from_ref(&tokens)) {
                failure.get_or_insert(e);
            }
        },
        a.warmup,
        a.iters,
    )?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    Ok(t)
}

/// Records for an already restored model; used by callers that need both.
pub fn eval_records(r: &Restored<f32>, data: &TrainData, batch: usize) -> Result<Vec<EvalRecord>, CliError> {
    Ok(evaluate(&r.model, &r.params, data, batch)?)
}

/// Wall-clock seconds of `f`.
pub fn timed<R>(f: impl FnOnce() -> R) -> (R, f64) {
    let t = Instant::now();
    let r = f();
    (r, t.elapsed().as_secs_f64())
}
