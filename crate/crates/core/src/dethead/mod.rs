//! Detection head: per-cell raw box offsets plus a confidence logit, decoding
//! under both paradigms, target assignment, losses and the final argmax.

pub mod anchors;
pub mod assign;
pub mod loss;

use std::path::PathBuf;

use ndarray::ArrayD;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::FusedMap;
use crate::geometry::BoundingBox;
use crate::graph::{ParamStore, Var};
use crate::nn::{Conv2d, Fwd};
use crate::scalar::{logit, sigmoid};
use crate::Real;

pub use anchors::{fallback_anchors, kmeans_anchors, load_anchor_file, save_anchor_file, split_by_area, AnchorSet};
pub use assign::{assign_targets, AssignmentMap, GridGeom, Positive};
pub use loss::{box_loss_slot, conf_loss_elem, overlap_grads, total_loss, total_loss_arrays, BoxLoss, ConfLoss, LossConfig, LossParts, MixTarget};

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error("degenerate ground-truth box {0:?}")]
    DegenerateBox([f64; 4]),
    #[error("box center ({cx}, {cy}) lies outside the {w}x{h} grid at stride {stride}")]
    OutsideGrid { cx: f64, cy: f64, w: usize, h: usize, stride: usize },
    #[error("anchor file {path}: {reason}")]
    AnchorFile { path: PathBuf, reason: String },
    #[error("config error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    AnchorBased,
    #[default]
    AnchorFree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub paradigm: Paradigm,
    pub anchors_per_scale: usize,
    pub anchor_file: Option<PathBuf>,
    /// Decode widths as `p^{exp(t)}` instead of `p·exp(t)`.
    pub literal_exponent: bool,
    /// Extra positive cells within this Chebyshev radius (experimental).
    pub center_radius: usize,
    /// Initial confidence probability encoded in the output bias.
    pub conf_prior: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { paradigm: Paradigm::AnchorFree, anchors_per_scale: 3, anchor_file: None, literal_exponent: false, center_radius: 0, conf_prior: 0.01 }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<(), HeadError> {
        if self.paradigm == Paradigm::AnchorFree && self.anchor_file.is_some() {
            return Err(HeadError::Config("anchor_file is set but paradigm is anchor_free".into()));
        }
        if self.paradigm == Paradigm::AnchorBased && self.anchors_per_scale == 0 {
            return Err(HeadError::Config("anchors_per_scale must be at least 1".into()));
        }
        if !(self.conf_prior > 0.0 && self.conf_prior < 1.0) {
            return Err(HeadError::Config(format!("conf_prior {} outside (0, 1)", self.conf_prior)));
        }
        Ok(())
    }

    pub fn slots(&self) -> usize {
        match self.paradigm {
            Paradigm::AnchorBased => self.anchors_per_scale,
            Paradigm::AnchorFree => 1,
        }
    }
}

/// Clamp applied to the in-cell center fraction before `logit`.
pub const ENCODE_EPS: f64 = 1e-3;

fn size_decode<T: Real>(t: T, base: T, literal: bool) -> T {
    if literal {
        base.powf(t.exp())
    } else {
        base * t.exp()
    }
}

fn size_encode<T: Real>(side: T, base: T, literal: bool) -> T {
    if literal {
        (side.ln() / base.ln()).ln()
    } else {
        (side / base).ln()
    }
}

/// `d side / d t` at `t`.
pub(crate) fn size_slope<T: Real>(t: T, side: T, base: T, literal: bool) -> T {
    if literal {
        side * base.ln() * t.exp()
    } else {
        side
    }
}

/// Raw offsets `(t_x, t_y, t_w, t_h)` at cell `(gx, gy)` to a pixel box;
/// `base` is the prior for anchor-based slots and `(stride, stride)` otherwise.
pub fn decode<T: Real>(t: [T; 4], gx: usize, gy: usize, stride: T, base: (T, T), literal: bool) -> BoundingBox<T> {
    let cx = (sigmoid(t[0]) + T::lit(gx as f64)) * stride;
    let cy = (sigmoid(t[1]) + T::lit(gy as f64)) * stride;
    BoundingBox::new(cx, cy, size_decode(t[2], base.0, literal), size_decode(t[3], base.1, literal))
}

/// Inverse of [`decode`]; the center fraction is clamped to
/// `[ENCODE_EPS, 1 - ENCODE_EPS]` so boxes centred on a cell edge stay finite.
pub fn encode<T: Real>(b: &BoundingBox<T>, gx: usize, gy: usize, stride: T, base: (T, T), literal: bool) -> [T; 4] {
    let eps = T::lit(ENCODE_EPS);
    let fx = (b.cx / stride - T::lit(gx as f64)).max(eps).min(T::one() - eps);
    let fy = (b.cy / stride - T::lit(gy as f64)).max(eps).min(T::one() - eps);
    [logit(fx), logit(fy), size_encode(b.w, base.0, literal), size_encode(b.h, base.1, literal)]
}

pub fn decode_anchor_based<T: Real>(t: [T; 4], gx: usize, gy: usize, stride: T, prior: (T, T), literal: bool) -> BoundingBox<T> {
    decode(t, gx, gy, stride, prior, literal)
}

pub fn decode_anchor_free<T: Real>(t: [T; 4], gx: usize, gy: usize, stride: T, literal: bool) -> BoundingBox<T> {
    decode(t, gx, gy, stride, (stride, stride), literal)
}

/// Raw predictions of one sample at one scale: `h×w×n×5`.
#[derive(Debug, Clone)]
pub struct PredictionGrid<T> {
    pub raw: ArrayD<T>,
    pub geom: GridGeom,
}

impl<T: Real> PredictionGrid<T> {
    pub fn new(raw: ArrayD<T>, geom: GridGeom) -> Self {
        assert_eq!(raw.shape(), &[geom.h, geom.w, geom.slots(), 5], "raw grid shape");
        Self { raw, geom }
    }

    pub fn decode_slot(&self, y: usize, x: usize, a: usize, literal: bool) -> BoundingBox<T> {
        let t = [0, 1, 2, 3].map(|j| self.raw[[y, x, a, j]]);
        let (bw, bh) = self.geom.base(a);
        decode(t, x, y, T::lit(self.geom.stride as f64), (T::lit(bw), T::lit(bh)), literal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection<T> {
    pub bbox: BoundingBox<T>,
    pub logit: T,
    pub confidence: T,
    pub scale: usize,
    pub cell: (usize, usize),
    pub anchor: usize,
}

/// Global confidence argmax over every scale, cell and slot; ties go to the
/// lowest flat index (scale, row, column, slot order).
pub fn select_prediction<T: Real>(grids: &[PredictionGrid<T>], literal: bool) -> Option<Selection<T>> {
    let mut best: Option<(T, usize, usize, usize, usize)> = None;
    for (s, g) in grids.iter().enumerate() {
        for y in 0..g.geom.h {
            for x in 0..g.geom.w {
                for a in 0..g.geom.slots() {
                    let z = g.raw[[y, x, a, 4]];
                    if best.is_none_or(|b| z > b.0) {
                        best = Some((z, s, y, x, a));
                    }
                }
            }
        }
    }
    let (z, s, y, x, a) = best?;
    Some(Selection { bbox: grids[s].decode_slot(y, x, a, literal), logit: z, confidence: sigmoid(z), scale: s, cell: (y, x), anchor: a })
}

/// One 3×3 conv + leaky ReLU and a 1×1 output conv per prediction map.
#[derive(Debug, Clone)]
pub struct DetHead {
    pub slots: usize,
    layers: Vec<(Conv2d, Conv2d)>,
}

impl DetHead {
    pub fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, cfg: &HeadConfig, dim: usize, maps: usize, rng: &mut R) -> Self {
        let slots = cfg.slots();
        let prior = T::lit(logit(cfg.conf_prior));
        let layers = (0..maps)
            .map(|i| {
                let hidden = Conv2d::new(ps, &format!("head{i}.hidden"), dim, dim, 3, 1, true, rng);
                let out = Conv2d::new(ps, &format!("head{i}.out"), dim, slots * 5, 1, 1, true, rng);
                // output layer: fan-in uniform instead of He, confidence bias at the prior
                let bound = (1.0 / dim as f64).sqrt();
                ps.get_mut(out.w).value.mapv_inplace(|_| T::lit(rng.random_range(-bound..bound)));
                let b = &mut ps.get_mut(out.b.unwrap()).value;
                for a in 0..slots {
                    b[[a * 5 + 4]] = prior;
                }
                (hidden, out)
            })
            .collect();
        Self { slots, layers }
    }

    /// `B×h×w×n×5` raw grid per fused map.
    pub fn forward<'g, T: Real>(&self, f: &Fwd<'g, T>, maps: &[FusedMap<'g, T>]) -> Vec<Var<'g, T>> {
        assert_eq!(maps.len(), self.layers.len(), "one head per prediction map");
        maps.iter()
            .zip(&self.layers)
            .map(|(m, (hidden, out))| {
                let y = out.forward(f, hidden.forward(f, m.map).leaky_relu(T::lit(0.1)));
                let s = y.shape();
                y.permute(&[0, 2, 3, 1]).reshape(&[s[0], s[2], s[3], self.slots, 5])
            })
            .collect()
    }
}
