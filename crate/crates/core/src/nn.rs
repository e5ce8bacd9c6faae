//! Small layer library on top of the autodiff tape.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::kernels::ConvGeom;
use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::Real;

/// Everything a forward pass needs: the tape, the parameters and, in
/// training mode, a dropout RNG.
pub struct Fwd<'g, T: Real> {
    pub g: &'g Graph<T>,
    pub ps: &'g ParamStore<T>,
    pub train: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl<'g, T: Real> Fwd<'g, T> {
    pub fn new(g: &'g Graph<T>, ps: &'g ParamStore<T>, train: bool, seed: u64) -> Self {
        Self { g, ps, train, rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)) }
    }

    pub fn eval(g: &'g Graph<T>, ps: &'g ParamStore<T>) -> Self {
        Self::new(g, ps, false, 0)
    }

    pub fn p(&self, id: ParamId) -> Var<'g, T> {
        self.g.param(self.ps, id)
    }

    pub fn dropout(&self, x: Var<'g, T>, p: f64) -> Var<'g, T> {
        if !self.train || p <= 0.0 {
            return x;
        }
        x.dropout(p, &mut *self.rng.borrow_mut())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let w = ps.uniform_fan_in(format!("{name}.weight"), &[fan_in, fan_out], fan_in, true, rng);
        let b = ps.zeros(format!("{name}.bias"), &[fan_out], true);
        Self { w, b: Some(b) }
    }

    /// Weights and bias start at zero (residual branches that must begin as identity).
    pub fn zeroed<T: Real>(ps: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = ps.zeros(format!("{name}.weight"), &[fan_in, fan_out], true);
        let b = ps.zeros(format!("{name}.bias"), &[fan_out], true);
        Self { w, b: Some(b) }
    }

    pub fn forward<'g, T: Real>(&self, f: &Fwd<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let y = x.matmul(f.p(self.w));
        match self.b {
            Some(b) => y + f.p(b),
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub geom: ConvGeom,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let w = ps.he_normal(format!("{name}.weight"), &[out_ch, in_ch, k, k], fan_in, trainable, rng);
        let b = ps.zeros(format!("{name}.bias"), &[out_ch], trainable);
        Self { w, b: Some(b), geom: ConvGeom { stride, pad: k / 2 }, in_ch, out_ch, k }
    }

    pub fn zeroed<T: Real>(ps: &mut ParamStore<T>, name: &str, in_ch: usize, out_ch: usize, k: usize, stride: usize) -> Self {
        let w = ps.zeros(format!("{name}.weight"), &[out_ch, in_ch, k, k], true);
        let b = ps.zeros(format!("{name}.bias"), &[out_ch], true);
        Self { w, b: Some(b), geom: ConvGeom { stride, pad: k / 2 }, in_ch, out_ch, k }
    }

    pub fn forward<'g, T: Real>(&self, f: &Fwd<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv2d(f.p(self.w), self.b.map(|b| f.p(b)), self.geom)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self { gamma: ps.ones(format!("{name}.gamma"), &[dim], true), beta: ps.zeros(format!("{name}.beta"), &[dim], true) }
    }

    pub fn forward<'g, T: Real>(&self, f: &Fwd<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.layer_norm(T::lit(1e-5)) * f.p(self.gamma) + f.p(self.beta)
    }
}

/// One direction of an LSTM layer.
#[derive(Debug, Clone)]
pub struct LstmDirection {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmDirection {
    pub fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let w_ih = ps.uniform_fan_in(format!("{name}.w_ih"), &[input, 4 * hidden], hidden, true, rng);
        let w_hh = ps.uniform_fan_in(format!("{name}.w_hh"), &[hidden, 4 * hidden], hidden, true, rng);
        // forget-gate bias starts at 1
        let mut b = ndarray::ArrayD::<T>::zeros(ndarray::IxDyn(&[4 * hidden]));
        b.slice_mut(ndarray::s![hidden..2 * hidden]).fill(T::one());
        let bias = ps.add(format!("{name}.bias"), b, true);
        Self { w_ih, w_hh, bias, hidden }
    }

    /// Run over `x: B×L×D`. `step_mask: B×L` (1 valid, 0 pad) freezes the state
    /// and zeroes the output at padded steps. Returns `B×L×H`.
    pub fn forward<'g, T: Real>(
        &self,
        f: &Fwd<'g, T>,
        x: Var<'g, T>,
        step_mask: &ndarray::Array2<T>,
        reverse: bool,
    ) -> Var<'g, T> {
        let shape = x.shape();
        let (b, l) = (shape[0], shape[1]);
        let h = self.hidden;
        let g = f.g;
        // input projection for all steps at once
        let xw = x.matmul(f.p(self.w_ih)) + f.p(self.bias);
        let w_hh = f.p(self.w_hh);
        let mut hs = g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[b, h])));
        let mut cs = hs;
        let mut outputs: Vec<Option<Var<'g, T>>> = vec![None; l];
        let order: Vec<usize> = if reverse { (0..l).rev().collect() } else { (0..l).collect() };
        for t in order {
            let gates = xw.slice_axis(1, t, t + 1).reshape(&[b, 4 * h]) + hs.matmul(w_hh);
            let i = gates.slice_axis(1, 0, h).sigmoid();
            let fg = gates.slice_axis(1, h, 2 * h).sigmoid();
            let gc = gates.slice_axis(1, 2 * h, 3 * h).tanh();
            let o = gates.slice_axis(1, 3 * h, 4 * h).sigmoid();
            let c_new = fg * cs + i * gc;
            let h_new = o * c_new.tanh();
            let m_col = step_mask.column(t).to_owned().into_shape_with_order((b, 1)).unwrap().into_dyn();
            let keep = g.constant(m_col.clone());
            let hold = g.constant(m_col.mapv(|v| T::one() - v));
            cs = c_new * keep + cs * hold;
            hs = h_new * keep + hs * hold;
            outputs[t] = Some(h_new * keep);
        }
        let outs: Vec<Var<'g, T>> = outputs.into_iter().map(|o| o.unwrap()).collect();
        g.stack(&outs, 1)
    }
}
