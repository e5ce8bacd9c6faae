//! Anchor priors: a fixed fallback set, IoU-distance k-means over training
//! boxes, and the JSON anchor file (one array of `[w, h]` pairs per scale).

use std::path::Path;

use super::HeadError;

/// Priors per prediction map, finest first, in input pixels.
pub type AnchorSet = Vec<Vec<(f64, f64)>>;

/// Reference input side the fallback priors are expressed at.
const FALLBACK_SIDE: f64 = 416.0;

const FALLBACK: [[(f64, f64); 3]; 4] = [
    [(4.0, 5.0), (8.0, 7.0), (6.0, 12.0)],
    [(10.0, 13.0), (16.0, 30.0), (33.0, 23.0)],
    [(30.0, 61.0), (62.0, 45.0), (59.0, 119.0)],
    [(116.0, 90.0), (156.0, 198.0), (373.0, 326.0)],
];

/// The `maps` coarsest fallback groups scaled to `resolution`, each group
/// cut or cycled to `per_scale` priors.
pub fn fallback_anchors(maps: usize, per_scale: usize, resolution: usize) -> AnchorSet {
    let s = resolution as f64 / FALLBACK_SIDE;
    FALLBACK[FALLBACK.len() - maps.min(FALLBACK.len())..]
        .iter()
        .map(|g| (0..per_scale).map(|i| (g[i % 3].0 * s, g[i % 3].1 * s)).collect())
        .collect()
}

fn shape_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

/// k-means with `1 - IoU` distance over `(w, h)` pairs. Centers start at
/// area quantiles, so the result is deterministic. Returns `None` when there
/// are fewer than `k` distinct shapes.
pub fn kmeans_anchors(boxes: &[(f64, f64)], k: usize, iters: usize) -> Option<Vec<(f64, f64)>> {
    let mut sorted: Vec<(f64, f64)> = boxes.iter().copied().filter(|b| b.0 > 0.0 && b.1 > 0.0).collect();
    sorted.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)).then(a.0.total_cmp(&b.0)));
    let mut distinct = sorted.clone();
    distinct.dedup();
    if k == 0 || distinct.len() < k {
        return None;
    }
    let mut centers: Vec<(f64, f64)> = (0..k).map(|i| sorted[(2 * i + 1) * sorted.len() / (2 * k)]).collect();
    let mut assign = vec![usize::MAX; sorted.len()];
    for _ in 0..iters {
        let mut changed = false;
        for (i, b) in sorted.iter().enumerate() {
            let best = (0..k).max_by(|&x, &y| shape_iou(*b, centers[x]).total_cmp(&shape_iou(*b, centers[y])).then(y.cmp(&x))).unwrap();
            changed |= assign[i] != best;
            assign[i] = best;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<_> = sorted.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(b, _)| *b).collect();
            if !members.is_empty() {
                let n = members.len() as f64;
                *center = (members.iter().map(|b| b.0).sum::<f64>() / n, members.iter().map(|b| b.1).sum::<f64>() / n);
            }
        }
        if !changed {
            break;
        }
    }
    centers.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
    Some(centers)
}

/// Split area-sorted priors into `maps` consecutive groups (finest first).
pub fn split_by_area(mut priors: Vec<(f64, f64)>, maps: usize) -> AnchorSet {
    priors.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
    let per = priors.len() / maps.max(1);
    priors.chunks(per.max(1)).take(maps).map(|c| c.to_vec()).collect()
}

pub fn load_anchor_file(path: &Path) -> Result<AnchorSet, HeadError> {
    let err = |reason: String| HeadError::AnchorFile { path: path.to_owned(), reason };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let raw: Vec<Vec<[f64; 2]>> = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    if raw.is_empty() || raw.iter().any(|g| g.is_empty()) {
        return Err(err("every scale needs at least one prior".into()));
    }
    if raw.iter().flatten().any(|p| !(p[0] > 0.0 && p[1] > 0.0 && p[0].is_finite() && p[1].is_finite())) {
        return Err(err("priors must be positive".into()));
    }
    Ok(raw.into_iter().map(|g| g.into_iter().map(|p| (p[0], p[1])).collect()).collect())
}

pub fn save_anchor_file(path: &Path, anchors: &AnchorSet) -> std::io::Result<()> {
    let raw: Vec<Vec<[f64; 2]>> = anchors.iter().map(|g| g.iter().map(|&(w, h)| [w, h]).collect()).collect();
    std::fs::write(path, serde_json::to_string_pretty(&raw).expect("anchors serialize") + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kmeans_recovers_separated_clusters() {
        let mut boxes = Vec::new();
        for i in 0..30 {
            let j = (i % 5) as f64;
            boxes.push((10.0 + j, 12.0 - j * 0.2));
            boxes.push((60.0 + j, 40.0 + j));
            boxes.push((200.0 - j, 180.0 + j));
        }
        let c = kmeans_anchors(&boxes, 3, 50).unwrap();
        assert!((c[0].0 - 12.0).abs() < 1.0 && (c[1].0 - 62.0).abs() < 1.0 && (c[2].0 - 198.0).abs() < 1.0);
        assert!(kmeans_anchors(&boxes[..2], 3, 10).is_none());
        assert_eq!(split_by_area(c, 3).len(), 3);
    }

    #[test]
    fn fallback_scales_with_resolution() {
        let a = fallback_anchors(1, 3, 832);
        assert_eq!(a, vec![vec![(232.0, 180.0), (312.0, 396.0), (746.0, 652.0)]]);
        assert_eq!(fallback_anchors(3, 3, 416).len(), 3);
    }

    #[test]
    fn anchor_file_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("anchors.json");
        let set = fallback_anchors(2, 3, 416);
        save_anchor_file(&p, &set).unwrap();
        assert_eq!(load_anchor_file(&p).unwrap(), set);
        std::fs::write(&p, "[[[1, -2]]]").unwrap();
        assert!(load_anchor_file(&p).is_err());
        std::fs::write(&p, "[[]]").unwrap();
        assert!(load_anchor_file(&p).is_err());
    }
}
