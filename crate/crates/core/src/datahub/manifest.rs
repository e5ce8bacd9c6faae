use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use super::{DataError, RefSample, Split};
use crate::geometry::BoundingBox;

/// Environment variable naming the directory relative image paths resolve against.
pub const DATA_ROOT_ENV: &str = "SIMREC_DATA_ROOT";

/// One manifest record. `bbox` is `[x1, y1, w, h]` in absolute pixels.
/// `width`/`height` are optional; when absent the image header is probed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    #[serde(deserialize_with = "id_string")]
    pub image_id: String,
    pub image_path: String,
    pub expression: String,
    pub bbox: [f64; 4],
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

fn id_string<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    match serde_json::Value::deserialize(d)? {
        serde_json::Value::String(s) => Ok(s),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        other => Err(serde::de::Error::custom(format!("image_id must be a string or number, got {other}"))),
    }
}

#[derive(Debug, Clone, Default)]
pub struct ManifestLoad {
    pub samples: Vec<RefSample>,
    /// Entries that failed the schema.
    pub malformed: usize,
    /// Entries of the requested split dropped by sample invariants.
    pub skipped: usize,
    pub total_entries: usize,
}

/// Resolve a manifest image path: absolute paths are kept, relative ones are
/// joined onto `$SIMREC_DATA_ROOT` when set, else onto the manifest directory.
pub fn resolve_image_path(manifest: &Path, image_path: &str) -> PathBuf {
    let p = PathBuf::from(image_path);
    if p.is_absolute() {
        return p;
    }
    if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
        if !root.is_empty() {
            return PathBuf::from(root).join(p);
        }
    }
    manifest.parent().map(|d| d.join(&p)).unwrap_or(p)
}

fn entry_to_sample(manifest: &Path, index: usize, e: ManifestEntry) -> Option<RefSample> {
    if e.expression.trim().is_empty() {
        return None;
    }
    let [x, y, w, h] = e.bbox;
    if !(w > 0.0 && h > 0.0) || !x.is_finite() || !y.is_finite() {
        return None;
    }
    let image_path = resolve_image_path(manifest, &e.image_path);
    let (iw, ih) = match (e.width, e.height) {
        (Some(w), Some(h)) => (w, h),
        _ => {
            let (w, h) = image::image_dimensions(&image_path).ok()?;
            (w as usize, h as usize)
        }
    };
    let gt_box = BoundingBox::from_xywh(x, y, w, h);
    if !gt_box.inside(iw as f64, ih as f64) {
        return None;
    }
    Some(RefSample {
        id: e.id.unwrap_or_else(|| format!("{}:{index}", e.image_id)),
        image_id: e.image_id,
        image_path,
        expression: e.expression,
        gt_box,
        image_size: (iw, ih),
        split: e.split,
    })
}

/// Load the samples of one split from a JSON manifest.
pub fn load_manifest(path: &Path, split: Split) -> Result<ManifestLoad, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_owned(), source })?;
    let raw: Vec<serde_json::Value> = serde_json::from_str(&text).map_err(|e| DataError::Format {
        path: path.to_owned(),
        reason: format!("expected a top-level JSON array: {e}"),
    })?;
    let mut out = ManifestLoad { total_entries: raw.len(), ..Default::default() };
    let mut parsed = Vec::with_capacity(raw.len());
    for (i, v) in raw.into_iter().enumerate() {
        match serde_json::from_value::<ManifestEntry>(v) {
            Ok(e) => parsed.push((i, e)),
            Err(_) => out.malformed += 1,
        }
    }
    if out.total_entries > 0 && out.malformed * 2 > out.total_entries {
        return Err(DataError::Format {
            path: path.to_owned(),
            reason: format!("{} of {} entries violate the manifest schema", out.malformed, out.total_entries),
        });
    }
    for (i, e) in parsed.into_iter().filter(|(_, e)| e.split == split) {
        match entry_to_sample(path, i, e) {
            Some(s) => out.samples.push(s),
            None => out.skipped += 1,
        }
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(entries).expect("manifest serializes");
    std::fs::write(path, text + "\n").map_err(|source| DataError::Io { path: path.to_owned(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(split: &str, bbox: [f64; 4]) -> serde_json::Value {
        serde_json::json!({
            "image_id": 7, "image_path": "a.jpg", "expression": "the red cup",
            "bbox": bbox, "split": split, "width": 100, "height": 80
        })
    }

    fn write(dir: &Path, v: &serde_json::Value) -> PathBuf {
        let p = dir.join("m.json");
        std::fs::write(&p, v.to_string()).unwrap();
        p
    }

    #[test]
    fn filters_by_split() {
        let dir = tempfile::tempdir().unwrap();
        let m = serde_json::json!([entry("train", [1.0, 1.0, 10.0, 10.0]), entry("val", [1.0, 1.0, 10.0, 10.0]), entry("train", [5.0, 5.0, 20.0, 20.0])]);
        let load = load_manifest(&write(dir.path(), &m), Split::Train).unwrap();
        assert_eq!(load.samples.len(), 2);
        assert_eq!(load.samples[0].image_id, "7");
        assert_eq!(load.samples[1].gt_box.cx, 15.0);
    }

    #[test]
    fn box_past_border_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let m = serde_json::json!([entry("train", [95.0, 1.0, 10.0, 10.0]), entry("train", [1.0, 1.0, 10.0, 10.0])]);
        let load = load_manifest(&write(dir.path(), &m), Split::Train).unwrap();
        assert_eq!(load.samples.len(), 1);
        assert_eq!(load.skipped, 1);
    }

    #[test]
    fn blank_expression_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = entry("train", [1.0, 1.0, 10.0, 10.0]);
        e["expression"] = "   ".into();
        let load = load_manifest(&write(dir.path(), &serde_json::json!([e])), Split::Train).unwrap();
        assert_eq!((load.samples.len(), load.skipped), (0, 1));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_manifest(Path::new("/nonexistent/m.json"), Split::Train).unwrap_err();
        assert!(matches!(err, DataError::Io { .. }));
    }

    #[test]
    fn mostly_malformed_is_fatal_but_minority_is_counted() {
        let dir = tempfile::tempdir().unwrap();
        let bad = serde_json::json!({"image_id": 1});
        let m = serde_json::json!([bad.clone(), bad.clone(), entry("train", [1.0, 1.0, 2.0, 2.0])]);
        assert!(matches!(load_manifest(&write(dir.path(), &m), Split::Train), Err(DataError::Format { .. })));
        let m = serde_json::json!([bad, entry("train", [1.0, 1.0, 2.0, 2.0]), entry("train", [1.0, 1.0, 2.0, 2.0])]);
        let load = load_manifest(&write(dir.path(), &m), Split::Train).unwrap();
        assert_eq!((load.samples.len(), load.malformed), (2, 1));
    }

    #[test]
    fn probes_image_header_when_size_missing() {
        let dir = tempfile::tempdir().unwrap();
        let img = ndarray::Array3::from_elem((30, 50, 3), 0.5f32);
        crate::image_ops::save_rgb(&img, &dir.path().join("a.png")).unwrap();
        let m = serde_json::json!([{
            "image_id": "x", "image_path": "a.png", "expression": "thing",
            "bbox": [10.0, 5.0, 30.0, 20.0], "split": "val"
        }]);
        let load = load_manifest(&write(dir.path(), &m), Split::Val).unwrap();
        assert_eq!(load.samples[0].image_size, (50, 30));
    }
}
