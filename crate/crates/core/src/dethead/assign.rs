//! Ground-truth assignment: one positive slot per sample (the cell holding
//! the box center; the best-matching prior for anchor-based grids).

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{encode, HeadError, Paradigm};
use crate::geometry::BoundingBox;

/// Geometry of one prediction map. Empty `priors` means anchor-free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridGeom {
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    pub priors: Vec<(f64, f64)>,
}

/// Side of the virtual square prior used to pick a scale for anchor-free heads.
const FREE_PRIOR_CELLS: f64 = 4.0;

impl GridGeom {
    pub fn slots(&self) -> usize {
        self.priors.len().max(1)
    }

    pub fn paradigm(&self) -> Paradigm {
        if self.priors.is_empty() {
            Paradigm::AnchorFree
        } else {
            Paradigm::AnchorBased
        }
    }

    /// Size reference of slot `a` in pixels.
    pub fn base(&self, a: usize) -> (f64, f64) {
        match self.priors.get(a) {
            Some(&p) => p,
            None => (self.stride as f64, self.stride as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Positive {
    pub scale: usize,
    pub gy: usize,
    pub gx: usize,
    pub anchor: usize,
    pub gt: BoundingBox<f64>,
    /// Exact encode of `gt` at this slot.
    pub target: [f64; 4],
}

/// `c'` per scale (`h×w×n`) plus the regression targets of positive slots.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMap {
    pub conf: Vec<ArrayD<f64>>,
    pub positives: Vec<Positive>,
}

impl AssignmentMap {
    pub fn count_positive(&self) -> usize {
        self.conf.iter().map(|c| c.iter().filter(|&&v| v > 0.0).count()).sum()
    }

    /// The same map with every `c'` set to zero.
    pub fn zeroed(&self) -> Self {
        Self { conf: self.conf.iter().map(|c| ArrayD::zeros(c.raw_dim())).collect(), positives: self.positives.clone() }
    }
}

fn prior_iou(w: f64, h: f64, p: (f64, f64)) -> f64 {
    let inter = w.min(p.0) * h.min(p.1);
    inter / (w * h + p.0 * p.1 - inter)
}

/// `(scale, slot)` whose prior best matches the box shape; first index wins
/// ties, scales in order.
fn best_slot(gt: &BoundingBox<f64>, geoms: &[GridGeom]) -> (usize, usize) {
    let mut best = (0, 0, f64::MIN);
    for (s, g) in geoms.iter().enumerate() {
        let cands: Vec<(f64, f64)> = if g.priors.is_empty() {
            let side = FREE_PRIOR_CELLS * g.stride as f64;
            vec![(side, side)]
        } else {
            g.priors.clone()
        };
        for (a, p) in cands.into_iter().enumerate() {
            let v = prior_iou(gt.w, gt.h, p);
            if v > best.2 {
                best = (s, a, v);
            }
        }
    }
    (best.0, best.1)
}

pub fn assign_targets(gt: &BoundingBox<f64>, geoms: &[GridGeom], literal: bool, center_radius: usize) -> Result<AssignmentMap, HeadError> {
    if !gt.is_valid() {
        return Err(HeadError::DegenerateBox(gt.to_xywh()));
    }
    assert!(!geoms.is_empty(), "at least one prediction map");
    let (scale, anchor) = if geoms.len() == 1 && geoms[0].priors.is_empty() { (0, 0) } else { best_slot(gt, geoms) };
    let g = &geoms[scale];
    let s = g.stride as f64;
    let (fx, fy) = ((gt.cx / s).floor(), (gt.cy / s).floor());
    if fx < 0.0 || fy < 0.0 || fx as usize >= g.w || fy as usize >= g.h {
        return Err(HeadError::OutsideGrid { cx: gt.cx, cy: gt.cy, w: g.w, h: g.h, stride: g.stride });
    }
    let (gx, gy) = (fx as usize, fy as usize);
    let mut conf: Vec<ArrayD<f64>> = geoms.iter().map(|g| ArrayD::zeros(IxDyn(&[g.h, g.w, g.slots()]))).collect();
    let mut positives = Vec::new();
    let r = center_radius as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            let (y, x) = (gy as isize + dy, gx as isize + dx);
            if y < 0 || x < 0 || y as usize >= g.h || x as usize >= g.w {
                continue;
            }
            let (y, x) = (y as usize, x as usize);
            conf[scale][[y, x, anchor]] = 1.0;
            let target = encode(gt, x, y, s, g.base(anchor), literal);
            positives.push(Positive { scale, gy: y, gx: x, anchor, gt: *gt, target });
        }
    }
    // center cell first
    positives.sort_by_key(|p| (p.gy != gy || p.gx != gx) as u8);
    Ok(AssignmentMap { conf, positives })
}
