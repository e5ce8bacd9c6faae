//! `Σ c'·l_box + l_conf` with closed-form gradients w.r.t. the raw grids.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::assign::{AssignmentMap, GridGeom, Positive};
use super::{decode, size_slope};
use crate::geometry::BoundingBox;
use crate::graph::{Graph, Var};
use crate::scalar::{sigmoid, softplus};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConfLoss {
    Bce,
    BceLabelSmooth { eps: f64 },
    Focal { gamma: f64, alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxLoss {
    MseRaw,
    SmoothL1Raw,
    Iou,
    Giou,
}

impl BoxLoss {
    pub const ALL: [BoxLoss; 4] = [BoxLoss::MseRaw, BoxLoss::SmoothL1Raw, BoxLoss::Iou, BoxLoss::Giou];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub conf: ConfLoss,
    #[serde(rename = "box")]
    pub box_loss: BoxLoss,
    /// Also regress the mixing partner's box, weighted `1 - λ`.
    pub dual_target: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { conf: ConfLoss::Bce, box_loss: BoxLoss::Iou, dual_target: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), String> {
        match self.conf {
            ConfLoss::BceLabelSmooth { eps } if !(0.0..1.0).contains(&eps) => Err(format!("loss.conf.eps {eps} outside [0, 1)")),
            ConfLoss::Focal { gamma, alpha } if gamma < 0.0 || !(0.0..=1.0).contains(&alpha) => {
                Err(format!("loss.conf focal gamma {gamma} / alpha {alpha} out of range"))
            }
            _ => Ok(()),
        }
    }
}

/// Per-sample mixing partner for MixUp/CutMix batches.
#[derive(Debug, Clone, PartialEq)]
pub struct MixTarget {
    pub partner: AssignmentMap,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub conf: f64,
    #[serde(rename = "box")]
    pub box_term: f64,
}

/// Loss and `d/dz` of one confidence entry with logit `z` and target `y`.
pub fn conf_loss_elem<T: Real>(z: T, y: T, variant: &ConfLoss) -> (T, T) {
    let one = T::one();
    match *variant {
        ConfLoss::Bce => (softplus(z) - y * z, sigmoid(z) - y),
        ConfLoss::BceLabelSmooth { eps } => {
            let e = T::lit(eps);
            let ys = y * (one - e) + e / T::lit(2.0);
            (softplus(z) - ys * z, sigmoid(z) - ys)
        }
        ConfLoss::Focal { gamma, alpha } => {
            let (g, a) = (T::lit(gamma), T::lit(alpha));
            let p = sigmoid(z);
            let q = sigmoid(-z);
            let log_p = -softplus(-z);
            let log_q = -softplus(z);
            let l1 = -a * q.powf(g) * log_p;
            let d1 = a * g * p * q.powf(g) * log_p - a * q.powf(g + one);
            let b = one - a;
            let l0 = -b * p.powf(g) * log_q;
            let d0 = -(b * g * q * p.powf(g) * log_q - b * p.powf(g + one));
            (y * l1 + (one - y) * l0, y * d1 + (one - y) * d0)
        }
    }
}

/// IoU and GIoU of `p` against `g`, with gradients w.r.t. `(cx, cy, w, h)` of `p`.
pub fn overlap_grads<T: Real>(p: &BoundingBox<T>, g: &BoundingBox<T>) -> (T, T, [T; 4], [T; 4]) {
    let zero = T::zero();
    let half = T::lit(0.5);
    let [x1, y1, x2, y2] = p.corners();
    let [gx1, gy1, gx2, gy2] = g.corners();
    let iw = x2.min(gx2) - x1.max(gx1);
    let ih = y2.min(gy2) - y1.max(gy1);
    let overlap = iw > zero && ih > zero;
    let inter = if overlap { iw * ih } else { zero };
    // corner partials of the intersection: [x1, y1, x2, y2]
    let di = if overlap {
        [
            if x1 > gx1 { -ih } else { zero },
            if y1 > gy1 { -iw } else { zero },
            if x2 < gx2 { ih } else { zero },
            if y2 < gy2 { iw } else { zero },
        ]
    } else {
        [zero; 4]
    };
    let to_center = |d: [T; 4]| [d[0] + d[2], d[1] + d[3], (d[2] - d[0]) * half, (d[3] - d[1]) * half];
    let di = to_center(di);
    let da = [zero, zero, p.h, p.w];
    let union = p.area() + g.area() - inter;
    let du: [T; 4] = std::array::from_fn(|k| da[k] - di[k]);
    let iou = inter / union;
    let diou: [T; 4] = std::array::from_fn(|k| (di[k] * union - inter * du[k]) / (union * union));

    let cw = x2.max(gx2) - x1.min(gx1);
    let ch = y2.max(gy2) - y1.min(gy1);
    let c = cw * ch;
    let dc = to_center([
        if x1 < gx1 { -ch } else { zero },
        if y1 < gy1 { -cw } else { zero },
        if x2 > gx2 { ch } else { zero },
        if y2 > gy2 { cw } else { zero },
    ]);
    let giou = iou - T::one() + union / c;
    let dgiou: [T; 4] = std::array::from_fn(|k| diou[k] + (du[k] * c - union * dc[k]) / (c * c));
    (iou, giou, diou, dgiou)
}

/// Box loss at one positive slot and its gradient w.r.t. the raw offsets.
pub fn box_loss_slot<T: Real>(t: [T; 4], pos: &Positive, geom: &GridGeom, variant: BoxLoss, literal: bool) -> (T, [T; 4]) {
    let two = T::lit(2.0);
    match variant {
        BoxLoss::MseRaw => {
            let d: [T; 4] = std::array::from_fn(|k| t[k] - T::lit(pos.target[k]));
            (d.iter().map(|&v| v * v).sum(), d.map(|v| two * v))
        }
        BoxLoss::SmoothL1Raw => {
            let d: [T; 4] = std::array::from_fn(|k| t[k] - T::lit(pos.target[k]));
            let l = d.iter().map(|&v| if v.abs() < T::one() { v * v / two } else { v.abs() - T::lit(0.5) }).sum();
            (l, d.map(|v| if v.abs() < T::one() { v } else { v.signum() }))
        }
        BoxLoss::Iou | BoxLoss::Giou => {
            let s = T::lit(geom.stride as f64);
            let (bw, bh) = geom.base(pos.anchor);
            let base = (T::lit(bw), T::lit(bh));
            let b = decode(t, pos.gx, pos.gy, s, base, literal);
            let (iou, giou, diou, dgiou) = overlap_grads(&b, &pos.gt.cast());
            let (v, dv) = if variant == BoxLoss::Iou { (iou, diou) } else { (giou, dgiou) };
            let slope = [
                s * sigmoid(t[0]) * sigmoid(-t[0]),
                s * sigmoid(t[1]) * sigmoid(-t[1]),
                size_slope(t[2], b.w, base.0, literal),
                size_slope(t[3], b.h, base.1, literal),
            ];
            (T::one() - v, std::array::from_fn(|k| -dv[k] * slope[k]))
        }
    }
}

fn positive_terms<T: Real>(
    raws: &[ArrayD<T>],
    grads: &mut [ArrayD<T>],
    b: usize,
    map: &AssignmentMap,
    geoms: &[GridGeom],
    weight: T,
    cfg: &LossConfig,
    literal: bool,
    inv_b: T,
) -> T {
    let mut total = T::zero();
    for pos in &map.positives {
        let c = T::lit(map.conf[pos.scale][[pos.gy, pos.gx, pos.anchor]]);
        if c == T::zero() || weight == T::zero() {
            continue;
        }
        let raw = &raws[pos.scale];
        let t = [0, 1, 2, 3].map(|j| raw[[b, pos.gy, pos.gx, pos.anchor, j]]);
        let (l, g) = box_loss_slot(t, pos, &geoms[pos.scale], cfg.box_loss, literal);
        total += weight * c * l;
        for (j, gj) in g.into_iter().enumerate() {
            grads[pos.scale][[b, pos.gy, pos.gx, pos.anchor, j]] += weight * c * gj * inv_b;
        }
    }
    total
}

/// Batch-mean loss and its gradient w.r.t. every raw grid (`B×h×w×n×5`).
pub fn total_loss_arrays<T: Real>(
    raws: &[ArrayD<T>],
    geoms: &[GridGeom],
    targets: &[AssignmentMap],
    mixes: &[Option<MixTarget>],
    cfg: &LossConfig,
    literal: bool,
) -> (LossParts, Vec<ArrayD<T>>) {
    assert_eq!(raws.len(), geoms.len(), "one raw grid per geometry");
    let batch = targets.len();
    assert!(mixes.is_empty() || mixes.len() == batch, "mix list must match the batch");
    for (r, g) in raws.iter().zip(geoms) {
        assert_eq!(r.shape(), &[batch, g.h, g.w, g.slots(), 5], "raw grid shape");
    }
    let inv_b = T::one() / T::lit(batch as f64);
    let mut grads: Vec<ArrayD<T>> = raws.iter().map(|r| ArrayD::zeros(r.raw_dim())).collect();
    let (mut conf_sum, mut box_sum) = (T::zero(), T::zero());
    for (b, map) in targets.iter().enumerate() {
        for (s, g) in geoms.iter().enumerate() {
            for y in 0..g.h {
                for x in 0..g.w {
                    for a in 0..g.slots() {
                        let (l, d) = conf_loss_elem(raws[s][[b, y, x, a, 4]], T::lit(map.conf[s][[y, x, a]]), &cfg.conf);
                        conf_sum += l;
                        grads[s][[b, y, x, a, 4]] = d * inv_b;
                    }
                }
            }
        }
        let mix = mixes.get(b).and_then(|m| m.as_ref());
        let lambda = T::lit(mix.map_or(1.0, |m| m.lambda));
        box_sum += positive_terms(raws, &mut grads, b, map, geoms, lambda, cfg, literal, inv_b);
        if let (Some(m), true) = (mix, cfg.dual_target) {
            box_sum += positive_terms(raws, &mut grads, b, &m.partner, geoms, T::one() - lambda, cfg, literal, inv_b);
        }
    }
    let conf = (conf_sum * inv_b).to_f64_lossy();
    let box_term = (box_sum * inv_b).to_f64_lossy();
    (LossParts { total: conf + box_term, conf, box_term }, grads)
}

/// Graph node for [`total_loss_arrays`].
pub fn total_loss<'g, T: Real>(
    g: &'g Graph<T>,
    raws: &[Var<'g, T>],
    geoms: &[GridGeom],
    targets: &[AssignmentMap],
    mixes: &[Option<MixTarget>],
    cfg: &LossConfig,
    literal: bool,
) -> (Var<'g, T>, LossParts) {
    let values: Vec<ArrayD<T>> = raws.iter().map(|r| r.value().clone()).collect();
    let (parts, grads) = total_loss_arrays(&values, geoms, targets, mixes, cfg, literal);
    let value = ArrayD::from_elem(ndarray::IxDyn(&[]), T::lit(parts.total));
    let node = g.custom(raws, value, move |ctx| {
        let scale = *ctx.grad.iter().next().unwrap();
        grads.iter().enumerate().map(|(i, gr)| ctx.needs(i).then(|| gr.mapv(|v| v * scale))).collect()
    });
    (node, parts)
}
