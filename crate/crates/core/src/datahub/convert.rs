//! REFER-style annotation layouts (RefCOCO, RefCOCO+, RefCOCOg) to per-split manifests.
//!
//! A source directory holds `instances.json` plus the refs list, either as the
//! original pickle (`refs(<split_by>).p`) or a JSON dump of the same list.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer};

use super::{write_manifest, DataError, ManifestEntry, Split};

pub const SUPPORTED_LAYOUTS: &str = "refer-pickle (instances.json + refs(<split_by>).p), refer-json (instances.json + refs.json or refs(<split_by>).json)";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    ReferPickle,
    ReferJson,
}

fn id_string<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Id {
        I(i64),
        S(String),
    }
    Ok(match Id::deserialize(d)? {
        Id::I(i) => i.to_string(),
        Id::S(s) => s,
    })
}

#[derive(Debug, Deserialize)]
struct Sentence {
    #[serde(alias = "raw")]
    sent: String,
    #[serde(default, deserialize_with = "opt_id")]
    sent_id: Option<String>,
}

fn opt_id<'de, D: Deserializer<'de>>(d: D) -> Result<Option<String>, D::Error> {
    id_string(d).map(Some)
}

#[derive(Debug, Deserialize)]
struct ReferRef {
    #[serde(deserialize_with = "id_string")]
    image_id: String,
    #[serde(deserialize_with = "id_string")]
    ann_id: String,
    split: String,
    sentences: Vec<Sentence>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    #[serde(deserialize_with = "id_string")]
    id: String,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    #[serde(deserialize_with = "id_string")]
    id: String,
    bbox: [f64; 4],
}

#[derive(Debug, Deserialize)]
struct Instances {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
}

fn find_refs(dir: &Path, ext: &str) -> Option<PathBuf> {
    let mut hits: Vec<PathBuf> = std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("refs") && p.extension().and_then(|e| e.to_str()) == Some(ext)
        })
        .collect();
    hits.sort();
    hits.into_iter().next()
}

pub fn detect_layout(dir: &Path) -> Result<(Layout, PathBuf), DataError> {
    let unknown = |found: String| DataError::UnknownLayout { found, supported: SUPPORTED_LAYOUTS.to_owned() };
    if !dir.join("instances.json").is_file() {
        return Err(unknown(format!("{} (no instances.json)", dir.display())));
    }
    if let Some(p) = find_refs(dir, "p") {
        return Ok((Layout::ReferPickle, p));
    }
    if let Some(p) = find_refs(dir, "json") {
        return Ok((Layout::ReferJson, p));
    }
    Err(unknown(format!("{} (no refs file)", dir.display())))
}

fn read_refs(layout: Layout, path: &Path) -> Result<Vec<ReferRef>, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io { path: path.to_owned(), source })?;
    let fmt = |reason: String| DataError::Format { path: path.to_owned(), reason };
    match layout {
        Layout::ReferPickle => {
            serde_pickle::from_slice(&bytes, serde_pickle::DeOptions::new().decode_strings()).map_err(|e| fmt(e.to_string()))
        }
        Layout::ReferJson => serde_json::from_slice(&bytes).map_err(|e| fmt(e.to_string())),
    }
}

/// Convert `src` into `<out>/<split>.json`. `image_dir` is prefixed onto COCO
/// file names. Returns the number of entries written per split.
pub fn convert_refer(src: &Path, out: &Path, image_dir: &str) -> Result<BTreeMap<Split, usize>, DataError> {
    let (layout, refs_path) = detect_layout(src)?;
    let refs = read_refs(layout, &refs_path)?;
    let inst_path = src.join("instances.json");
    let inst_bytes = std::fs::read(&inst_path).map_err(|source| DataError::Io { path: inst_path.clone(), source })?;
    let inst: Instances = serde_json::from_slice(&inst_bytes)
        .map_err(|e| DataError::Format { path: inst_path.clone(), reason: e.to_string() })?;
    let images: HashMap<&str, &CocoImage> = inst.images.iter().map(|i| (i.id.as_str(), i)).collect();
    let anns: HashMap<&str, &CocoAnnotation> = inst.annotations.iter().map(|a| (a.id.as_str(), a)).collect();

    let mut per_split: BTreeMap<Split, Vec<ManifestEntry>> = BTreeMap::new();
    for r in &refs {
        let split = Split::parse(&r.split).ok_or_else(|| DataError::Format {
            path: refs_path.clone(),
            reason: format!("unknown split {:?}", r.split),
        })?;
        let (Some(img), Some(ann)) = (images.get(r.image_id.as_str()), anns.get(r.ann_id.as_str())) else {
            return Err(DataError::Format {
                path: refs_path.clone(),
                reason: format!("ref for image {} / annotation {} has no instance record", r.image_id, r.ann_id),
            });
        };
        let image_path = if image_dir.is_empty() { img.file_name.clone() } else { format!("{image_dir}/{}", img.file_name) };
        for (k, s) in r.sentences.iter().enumerate() {
            per_split.entry(split).or_default().push(ManifestEntry {
                image_id: r.image_id.clone(),
                image_path: image_path.clone(),
                expression: s.sent.clone(),
                bbox: ann.bbox,
                split,
                width: Some(img.width),
                height: Some(img.height),
                id: Some(s.sent_id.clone().unwrap_or_else(|| format!("{}:{k}", r.ann_id))),
            });
        }
    }
    std::fs::create_dir_all(out).map_err(|source| DataError::Io { path: out.to_owned(), source })?;
    let mut counts = BTreeMap::new();
    for (split, entries) in &per_split {
        write_manifest(&out.join(format!("{split}.json")), entries)?;
        counts.insert(*split, entries.len());
    }
    Ok(counts)
}
