//! Text/visual fusion: a per-location gate from the pooled expression, a
//! bottom-up merge of the gated pyramid and a text-guided attention unit.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::kernels::ConvGeom;
use crate::graph::{ParamStore, Var};
use crate::nn::{Conv2d, Fwd, Linear};
use crate::visenc::{FeaturePyramid, LevelInfo};
use crate::Real;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("config error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub dim: usize,
    pub garan: bool,
    /// Keep every aggregated scale (one detection head per scale).
    pub head_per_scale: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { dim: 512, garan: true, head_per_scale: false }
    }
}

/// `B×d×h×w` fused map at a given stride.
#[derive(Debug, Clone, Copy)]
pub struct FusedMap<'g, T: Real> {
    pub map: Var<'g, T>,
    pub stride: usize,
}

/// `ReLU(f_t W_t)`, computed once per expression.
pub fn text_gate<'g, T: Real>(f_t: Var<'g, T>, w_t: Var<'g, T>) -> Var<'g, T> {
    f_t.matmul(w_t).relu()
}

/// `ReLU(f_v W_v) ⊙ gate` at every location; `level: B×C×h×w`,
/// `w_v: d×C×1×1`, `gate: B×d`.
pub fn gated_fuse<'g, T: Real>(level: Var<'g, T>, gate: Var<'g, T>, w_v: Var<'g, T>) -> Var<'g, T> {
    let gs = gate.shape();
    let v = level.conv2d(w_v, None, ConvGeom { stride: 1, pad: 0 }).relu();
    v * gate.reshape(&[gs[0], gs[1], 1, 1])
}

/// Downsample-concat-reduce across scales, finest first.
#[derive(Debug, Clone)]
pub struct MultiScaleFusion {
    down: Vec<Conv2d>,
    merge: Vec<Conv2d>,
}

impl MultiScaleFusion {
    /// The merge convs start as `[0 | I]`, so at initialisation the output
    /// equals the coarsest level.
    pub fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, dim: usize, levels: usize, rng: &mut R) -> Self {
        let mut down = Vec::new();
        let mut merge = Vec::new();
        for i in 1..levels {
            down.push(Conv2d::new(ps, &format!("{name}.down{i}"), dim, dim, 3, 2, true, rng));
            let m = Conv2d::zeroed(ps, &format!("{name}.merge{i}"), 2 * dim, dim, 1, 1);
            let w = &mut ps.get_mut(m.w).value;
            for c in 0..dim {
                w[[c, dim + c, 0, 0]] = T::one();
            }
            merge.push(m);
        }
        Self { down, merge }
    }

    /// All aggregated maps; the last one is the coarsest.
    pub fn forward_all<'g, T: Real>(&self, f: &Fwd<'g, T>, levels: &[FusedMap<'g, T>]) -> Result<Vec<FusedMap<'g, T>>, FusionError> {
        if levels.is_empty() || levels.len() != self.down.len() + 1 {
            return Err(FusionError::Config(format!("expected {} levels, got {}", self.down.len() + 1, levels.len())));
        }
        let mut out = vec![levels[0]];
        for (i, next) in levels.iter().enumerate().skip(1) {
            let prev = out[i - 1];
            let (ps, ns) = (prev.map.shape(), next.map.shape());
            if next.stride != 2 * prev.stride || ns[2] * 2 != ps[2] || ns[3] * 2 != ps[3] {
                return Err(FusionError::Config(format!(
                    "levels {:?}@{} and {:?}@{} are not a stride-2 pair",
                    &ps[2..],
                    prev.stride,
                    &ns[2..],
                    next.stride
                )));
            }
            let d = self.down[i - 1].forward(f, prev.map).leaky_relu(T::lit(0.1));
            let cat = f.g.concat(&[d, next.map], 1);
            out.push(FusedMap { map: self.merge[i - 1].forward(f, cat), stride: next.stride });
        }
        Ok(out)
    }

    pub fn forward<'g, T: Real>(&self, f: &Fwd<'g, T>, levels: &[FusedMap<'g, T>]) -> Result<FusedMap<'g, T>, FusionError> {
        Ok(*self.forward_all(f, levels)?.last().unwrap())
    }
}

/// Single-head text-guided spatial attention:
/// `out = F + sigmoid(F W_g) ⊙ (Σ_n α_n F_n W_v) W_o`, `α = softmax(q·K/√d)`.
#[derive(Debug, Clone)]
pub struct Garan {
    q: Linear,
    k: Linear,
    v: Linear,
    gate: Linear,
    out: Linear,
    dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GaranOutput<'g, T: Real> {
    pub map: Var<'g, T>,
    /// `B×1×(h·w)` attention weights.
    pub weights: Var<'g, T>,
}

impl Garan {
    pub fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, text_dim: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(ps, &format!("{name}.q"), text_dim, dim, rng),
            k: Linear::new(ps, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(ps, &format!("{name}.v"), dim, dim, rng),
            gate: Linear::new(ps, &format!("{name}.gate"), dim, dim, rng),
            out: Linear::zeroed(ps, &format!("{name}.out"), dim, dim),
            dim,
        }
    }

    pub fn forward<'g, T: Real>(&self, f: &Fwd<'g, T>, fmap: Var<'g, T>, f_t: Var<'g, T>) -> GaranOutput<'g, T> {
        let s = fmap.shape();
        let (b, d, h, w) = (s[0], s[1], s[2], s[3]);
        let flat = fmap.reshape(&[b, d, h * w]).permute(&[0, 2, 1]);
        let q = self.q.forward(f, f_t).reshape(&[b, 1, self.dim]);
        let keys = self.k.forward(f, flat);
        let logits = q.bmm(keys, false, true).scale(T::lit(1.0 / (self.dim as f64).sqrt()));
        let weights = logits.softmax(None);
        let ctx = weights.bmm(self.v.forward(f, flat), false, false);
        let gate = self.gate.forward(f, flat).sigmoid();
        let y = flat + gate * self.out.forward(f, ctx);
        GaranOutput { map: y.permute(&[0, 2, 1]).reshape(&[b, d, h, w]), weights }
    }
}

/// Every fusion parameter for a configured pyramid.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub cfg: FusionConfig,
    levels: Vec<LevelInfo>,
    w_v: Vec<Conv2d>,
    w_t: Linear,
    multiscale: MultiScaleFusion,
    garan: Vec<Garan>,
}

impl Fusion {
    /// `levels` are the pyramid levels actually used (finest first).
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        cfg: &FusionConfig,
        levels: &[LevelInfo],
        text_dim: usize,
        rng: &mut R,
    ) -> Result<Self, FusionError> {
        if cfg.dim == 0 || levels.is_empty() || levels.len() > 4 {
            return Err(FusionError::Config(format!("dim {} with {} levels", cfg.dim, levels.len())));
        }
        let d = cfg.dim;
        let w_v = levels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let id = ps.uniform_fan_in(format!("fusion.wv{i}.weight"), &[d, l.channels, 1, 1], l.channels, true, rng);
                Conv2d { w: id, b: None, geom: ConvGeom { stride: 1, pad: 0 }, in_ch: l.channels, out_ch: d, k: 1 }
            })
            .collect();
        let wt = ps.uniform_fan_in("fusion.wt.weight", &[text_dim, d], text_dim, true, rng);
        let multiscale = MultiScaleFusion::new(ps, "fusion.ms", d, levels.len(), rng);
        let n_out = if cfg.head_per_scale { levels.len() } else { 1 };
        let garan = if cfg.garan { (0..n_out).map(|i| Garan::new(ps, &format!("fusion.garan{i}"), text_dim, d, rng)).collect() } else { Vec::new() };
        Ok(Self { cfg: cfg.clone(), levels: levels.to_vec(), w_v, w_t: Linear { w: wt, b: None }, multiscale, garan })
    }

    pub fn text_dim<T: Real>(&self, ps: &ParamStore<T>) -> usize {
        ps.value(self.w_t.w).shape()[0]
    }

    /// Fused maps for the head: one (coarsest) or one per scale.
    pub fn forward<'g, T: Real>(&self, f: &Fwd<'g, T>, pyramid: &FeaturePyramid<'g, T>, f_t: Var<'g, T>) -> Result<Vec<FusedMap<'g, T>>, FusionError> {
        if pyramid.levels.len() != self.levels.len() {
            return Err(FusionError::Config(format!("pyramid has {} levels, fusion built for {}", pyramid.levels.len(), self.levels.len())));
        }
        let gate = text_gate(f_t, f.p(self.w_t.w));
        let gated: Vec<FusedMap<'g, T>> = pyramid
            .levels
            .iter()
            .zip(&self.w_v)
            .map(|(l, wv)| FusedMap { map: gated_fuse(l.map, gate, f.p(wv.w)), stride: l.stride })
            .collect();
        let mut maps = if self.cfg.head_per_scale {
            self.multiscale.forward_all(f, &gated)?
        } else {
            vec![self.multiscale.forward(f, &gated)?]
        };
        for (m, g) in maps.iter_mut().zip(&self.garan) {
            m.map = g.forward(f, m.map, f_t).map;
        }
        Ok(maps)
    }
}

/// Identity `n×n` as a dynamic array (test and init helper).
pub fn eye<T: Real>(n: usize) -> ArrayD<T> {
    Array2::from_shape_fn((n, n), |(i, j)| if i == j { T::one() } else { T::zero() }).into_dyn()
}

/// `d×C×1×1` conv weight equivalent of the `C×d` matrix `m`.
pub fn matrix_as_pointwise<T: Real>(m: &ArrayD<T>) -> ArrayD<T> {
    let (c, d) = (m.shape()[0], m.shape()[1]);
    ArrayD::from_shape_fn(IxDyn(&[d, c, 1, 1]), |i| m[[i[1], i[0]]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{numeric_grad, relative_error, Graph};
    use crate::visenc::PyramidLevel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_array(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_example() {
        let g = Graph::<f64>::inference();
        let level = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2, 1, 1]), vec![1.0, -2.0]).unwrap());
        let ft = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![3.0, 4.0]).unwrap());
        let gate = text_gate(ft, g.constant(eye(2)));
        let out = gated_fuse(level, gate, g.constant(matrix_as_pointwise(&eye::<f64>(2))));
        assert_eq!(out.value().iter().copied().collect::<Vec<_>>(), vec![3.0, 0.0]);

        let dead = text_gate(g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![-3.0, -4.0]).unwrap()), g.constant(eye(2)));
        let out = gated_fuse(g.constant(rand_array(&[1, 2, 3, 3], 1)), dead, g.constant(matrix_as_pointwise(&eye::<f64>(2))));
        assert!(out.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gated_fuse_commutes_with_spatial_permutation() {
        let g = Graph::<f64>::inference();
        let x = rand_array(&[2, 3, 4, 5], 2);
        let gate = g.constant(rand_array(&[2, 6], 3).mapv(f64::abs));
        let wv = g.constant(rand_array(&[6, 3, 1, 1], 4));
        let perm: Vec<usize> = (0..20).map(|i| (i * 7) % 20).collect();
        let permute = |a: &ArrayD<f64>| {
            let s = a.shape().to_vec();
            ArrayD::from_shape_fn(IxDyn(&s), |i| {
                let p = perm[i[2] * 5 + i[3]];
                a[[i[0], i[1], p / 5, p % 5]]
            })
        };
        let a = gated_fuse(g.constant(permute(&x)), gate, wv).value().clone();
        let b = permute(&gated_fuse(g.constant(x), gate, wv).value());
        assert_eq!(a, b);
    }

    #[test]
    fn single_level_passes_through_and_zero_fine_levels_are_ignored() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let one = MultiScaleFusion::new(&mut ps, "a", 4, 1, &mut rng);
        let three = MultiScaleFusion::new(&mut ps, "b", 4, 3, &mut rng);
        let g = Graph::inference();
        let f = Fwd::eval(&g, &ps);
        let coarse = g.constant(rand_array(&[1, 4, 2, 2], 6));
        let out = one.forward(&f, &[FusedMap { map: coarse, stride: 32 }]).unwrap();
        assert_eq!(*out.map.value(), *coarse.value());

        let levels = [
            FusedMap { map: g.constant(ArrayD::zeros(IxDyn(&[1, 4, 8, 8]))), stride: 8 },
            FusedMap { map: g.constant(ArrayD::zeros(IxDyn(&[1, 4, 4, 4]))), stride: 16 },
            FusedMap { map: coarse, stride: 32 },
        ];
        let all = three.forward_all(&f, &levels).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(*all[2].map.value(), *coarse.value());

        // finer levels do matter once the merge learns a nonzero fine path
        let mut ps2 = ps.clone();
        for (_, p) in ps2.iter_mut().filter(|(_, p)| p.name.starts_with("b.merge")) {
            p.value.mapv_inplace(|v| v + 0.1);
        }
        let g2 = Graph::inference();
        let f2 = Fwd::eval(&g2, &ps2);
        let mut zero = [(8, 8), (4, 4), (2, 2)].map(|(h, w)| g2.constant(ArrayD::zeros(IxDyn(&[1, 4, h, w]))));
        zero[2] = g2.constant(coarse.value().clone());
        fn mk(m: [Var<'_, f64>; 3]) -> Vec<FusedMap<'_, f64>> {
            [8, 16, 32].iter().zip(m).map(|(&s, map)| FusedMap { map, stride: s }).collect()
        }
        let mut nz = zero;
        nz[0] = g2.constant(rand_array(&[1, 4, 8, 8], 7));
        let a = three.forward(&f2, &mk(nz)).unwrap().map.value().clone();
        let b = three.forward(&f2, &mk(zero)).unwrap().map.value().clone();
        assert_ne!(a, b);

        let bad = [levels[0], levels[2]];
        assert!(MultiScaleFusion::new(&mut ps, "c", 4, 2, &mut rng).forward(&Fwd::eval(&g, &ps), &bad).is_err());
    }

    #[test]
    fn garan_identity_at_init_and_weights_normalised() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let garan = Garan::new(&mut ps, "garan", 5, 4, &mut rng);
        let g = Graph::inference();
        let f = Fwd::eval(&g, &ps);
        let x = g.constant(rand_array(&[2, 4, 3, 3], 9));
        let t = g.constant(rand_array(&[2, 5], 10));
        let out = garan.forward(&f, x, t);
        assert_eq!(*out.map.value(), *x.value());
        for b in 0..2 {
            let s: f64 = out.weights.value().slice(ndarray::s![b, 0, ..]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_logits_give_mean_context() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let garan = Garan::new(&mut ps, "garan", 3, 4, &mut rng);
        // zero query → all logits equal
        for (_, p) in ps.iter_mut().filter(|(_, p)| p.name.starts_with("garan.q")) {
            p.value.fill(0.0);
        }
        let g = Graph::inference();
        let f = Fwd::eval(&g, &ps);
        let x = g.constant(rand_array(&[1, 4, 2, 3], 12));
        let out = garan.forward(&f, x, g.constant(rand_array(&[1, 3], 13)));
        assert!(out.weights.value().iter().all(|&w| (w - 1.0 / 6.0).abs() < 1e-12));
        let flat = x.reshape(&[1, 4, 6]).permute(&[0, 2, 1]);
        let v = garan.v.forward(&f, flat).value().clone();
        let mean = v.mean_axis(ndarray::Axis(1)).unwrap();
        let ctx = out.weights.bmm(garan.v.forward(&f, flat), false, false).value().clone();
        for j in 0..4 {
            assert!((ctx[[0, 0, j]] - mean[[0, j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_stack_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut ps = ParamStore::<f64>::new();
        let levels = [LevelInfo { stride: 8, channels: 3 }, LevelInfo { stride: 16, channels: 5 }];
        let cfg = FusionConfig { dim: 4, garan: true, head_per_scale: false };
        let fusion = Fusion::new(&mut ps, &cfg, &levels, 6, &mut rng).unwrap();
        // break the identity init so every path carries gradient
        for (_, p) in ps.iter_mut() {
            p.value.mapv_inplace(|v| v + 0.05);
        }
        let fine = rand_array(&[1, 3, 4, 4], 15);
        let coarse = rand_array(&[1, 5, 2, 2], 16);
        let text = rand_array(&[1, 6], 17);
        let probe = rand_array(&[1, 4, 2, 2], 18);
        let loss = |fine: &ArrayD<f64>| -> (f64, ArrayD<f64>) {
            let g = Graph::new();
            let f = Fwd::eval(&g, &ps);
            let x = g.leaf(fine.clone());
            let pyr = FeaturePyramid {
                levels: vec![PyramidLevel { stride: 8, map: x }, PyramidLevel { stride: 16, map: g.constant(coarse.clone()) }],
            };
            let out = fusion.forward(&f, &pyr, g.constant(text.clone())).unwrap();
            let l = (out[0].map * g.constant(probe.clone())).sum();
            let grads = g.backward(l);
            (l.item(), grads.wrt(x).unwrap().clone())
        };
        let (_, analytic) = loss(&fine);
        let numeric = numeric_grad(&fine, 1e-6, |x| loss(x).0);
        assert!(relative_error(&analytic, &numeric, 1e-8) < 1e-4);
    }

    #[test]
    fn head_per_scale_returns_all_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut ps = ParamStore::<f32>::new();
        let levels = [LevelInfo { stride: 8, channels: 3 }, LevelInfo { stride: 16, channels: 3 }, LevelInfo { stride: 32, channels: 3 }];
        let fusion = Fusion::new(&mut ps, &FusionConfig { dim: 4, garan: true, head_per_scale: true }, &levels, 2, &mut rng).unwrap();
        let g = Graph::inference();
        let f = Fwd::eval(&g, &ps);
        let pyr = FeaturePyramid {
            levels: [8usize, 4, 2]
                .iter()
                .zip([8usize, 16, 32])
                .map(|(&s, st)| PyramidLevel { stride: st, map: g.constant(ArrayD::ones(IxDyn(&[1, 3, s, s]))) })
                .collect(),
        };
        let maps = fusion.forward(&f, &pyr, g.constant(ArrayD::ones(IxDyn(&[1, 2])))).unwrap();
        assert_eq!(maps.iter().map(|m| (m.stride, m.map.shape())).collect::<Vec<_>>(), vec![
            (8, vec![1, 4, 8, 8]),
            (16, vec![1, 4, 4, 4]),
            (32, vec![1, 4, 2, 2])
        ]);
    }
}
