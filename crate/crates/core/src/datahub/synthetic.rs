//! Procedural single-referent scenes: a flat gray background with one colored
//! rectangle (the referent) and optional distractor rectangles of other colors.

use std::path::Path;

use ndarray::{s, Array3};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_manifest, DataError, ManifestEntry, RefSample, Split};
use crate::geometry::BoundingBox;
use crate::image_ops::{save_rgb, Image};

pub const PALETTE: [(&str, [f32; 3]); 8] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 0.8, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("cyan", [0.0, 1.0, 1.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("black", [0.0, 0.0, 0.0]),
];

const NOUNS: [&str; 3] = ["box", "block", "square"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Referent side range in pixels, inclusive.
    pub min_side: usize,
    pub max_side: usize,
    pub distractors: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { width: 128, height: 128, min_side: 24, max_side: 56, distractors: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Image,
    /// Absolute pixels, integer aligned: covers exactly the referent pixels.
    pub gt_box: BoundingBox<f64>,
    pub expression: String,
    pub color: [f32; 3],
    pub background: [f32; 3],
}

fn fill(img: &mut Image, x: usize, y: usize, w: usize, h: usize, c: [f32; 3]) {
    let mut region = img.slice_mut(s![y..y + h, x..x + w, ..]);
    for mut px in region.rows_mut() {
        px.assign(&ndarray::ArrayView1::from(&c[..]));
    }
}

fn overlaps(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> bool {
    a.0 < b.0 + b.2 && b.0 < a.0 + a.2 && a.1 < b.1 + b.3 && b.1 < a.1 + a.3
}

pub fn generate_scene<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Scene {
    let side = |rng: &mut R, limit: usize| rng.random_range(cfg.min_side.min(limit)..=cfg.max_side.min(limit));
    let gray = rng.random_range(0.35f32..0.65);
    let background = [gray; 3];
    let mut image = Array3::from_elem((cfg.height, cfg.width, 3), gray);

    let (name, color) = *PALETTE.choose(rng).expect("palette");
    let w = side(rng, cfg.width);
    let h = side(rng, cfg.height);
    let x = rng.random_range(0..=cfg.width - w);
    let y = rng.random_range(0..=cfg.height - h);
    let referent = (x, y, w, h);

    let mut placed = vec![referent];
    for _ in 0..cfg.distractors {
        let (_, dc) = *PALETTE.iter().filter(|(n, _)| *n != name).collect::<Vec<_>>().choose(rng).expect("palette");
        for _ in 0..20 {
            let dw = side(rng, cfg.width);
            let dh = side(rng, cfg.height);
            let cand = (rng.random_range(0..=cfg.width - dw), rng.random_range(0..=cfg.height - dh), dw, dh);
            if placed.iter().all(|p| !overlaps(*p, cand)) {
                fill(&mut image, cand.0, cand.1, cand.2, cand.3, *dc);
                placed.push(cand);
                break;
            }
        }
    }
    fill(&mut image, x, y, w, h, color);

    let noun = NOUNS.choose(rng).expect("nouns");
    Scene {
        image,
        gt_box: BoundingBox::from_xywh(x as f64, y as f64, w as f64, h as f64),
        expression: format!("the {name} {noun}"),
        color,
        background,
    }
}

/// `n` scenes from one seeded stream, paired with in-memory samples whose
/// `image_path` is a virtual `synthetic/<i>.png`.
pub fn synthetic_set(n: usize, cfg: &SceneConfig, seed: u64, split: Split) -> (Vec<RefSample>, Vec<Image>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let scene = generate_scene(cfg, &mut rng);
        samples.push(RefSample {
            id: format!("syn-{i}"),
            image_id: format!("syn-{i}"),
            image_path: format!("synthetic/{i:05}.png").into(),
            expression: scene.expression,
            gt_box: scene.gt_box,
            image_size: (cfg.width, cfg.height),
            split,
        });
        images.push(scene.image);
    }
    (samples, images)
}

/// Write scenes as PNG files plus a `manifest.json` into `dir`.
pub fn write_synthetic_dataset(dir: &Path, splits: &[(Split, usize)], cfg: &SceneConfig, seed: u64) -> Result<(), DataError> {
    std::fs::create_dir_all(dir.join("images")).map_err(|source| DataError::Io { path: dir.to_owned(), source })?;
    let mut entries = Vec::new();
    for (k, &(split, n)) in splits.iter().enumerate() {
        let (samples, images) = synthetic_set(n, cfg, seed.wrapping_add(k as u64), split);
        for (i, (s, img)) in samples.into_iter().zip(images).enumerate() {
            let rel = format!("images/{split}_{i:05}.png");
            let path = dir.join(&rel);
            save_rgb(&img, &path).map_err(|e| DataError::Format { path: path.clone(), reason: e.to_string() })?;
            let bbox = s.gt_box.to_xywh();
            entries.push(ManifestEntry {
                image_id: format!("{split}_{i}"),
                image_path: rel,
                expression: s.expression,
                bbox,
                split,
                width: Some(cfg.width),
                height: Some(cfg.height),
                id: None,
            });
        }
    }
    write_manifest(&dir.join("manifest.json"), &entries)
}
