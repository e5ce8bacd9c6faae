//! Visual backbone: a declarative strided conv net whose tap points form the
//! feature pyramid. The built-in reference net and externally supplied
//! architectures (with weights from a tensor container) share one interpreter.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, ContainerError, RawTensor};
use crate::graph::{ParamId, ParamStore, Var};
use crate::nn::{Conv2d, Fwd};
use crate::Real;

/// Input sides the presets sweep over.
pub const RESOLUTIONS: [usize; 5] = [256, 320, 416, 512, 608];

/// Metadata key holding the architecture JSON inside a weight container.
pub const ARCHITECTURE_KEY: &str = "architecture";

#[derive(Debug, Error)]
pub enum VisError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input {h}x{w} is not divisible by the largest stride {stride}")]
    Resolution { h: usize, w: usize, stride: usize },
    #[error("architecture error: {0}")]
    Architecture(String),
    #[error("missing weight tensor {tensor:?} for layer {layer:?}")]
    MissingTensor { layer: String, tensor: String },
    #[error("tensor {tensor:?} has shape {found:?}, layer expects {expected:?}")]
    ShapeMismatch { tensor: String, found: Vec<usize>, expected: Vec<usize> },
    #[error("unsupported weight format {0:?} (supported: named-tensors)")]
    Format(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    ReferenceSmall,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub resolution: usize,
    pub scales_used: usize,
    pub freeze: bool,
    /// Output channels of the five stride-2 stages of the reference net.
    pub stage_channels: [usize; 5],
    /// Weight container for `external` (or to initialise the reference net).
    pub weights: Option<PathBuf>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::ReferenceSmall,
            resolution: 416,
            scales_used: 3,
            freeze: true,
            stage_channels: [32, 128, 256, 512, 1024],
            weights: None,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), VisError> {
        if self.resolution == 0 || !self.resolution.is_multiple_of(32) {
            return Err(VisError::Config(format!("resolution {} is not a positive multiple of 32", self.resolution)));
        }
        if !(1..=4).contains(&self.scales_used) {
            return Err(VisError::Config(format!("scales_used {} outside 1..=4", self.scales_used)));
        }
        if self.stage_channels.contains(&0) {
            return Err(VisError::Config("stage_channels entries must be positive".into()));
        }
        if self.kind == BackboneKind::External && self.weights.is_none() {
            return Err(VisError::Config("external backbone needs a weights file".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    #[default]
    Leaky,
    Relu,
    Silu,
}

impl Activation {
    fn apply<'g, T: Real>(self, x: Var<'g, T>) -> Var<'g, T> {
        match self {
            Activation::Linear => x,
            Activation::Leaky => x.leaky_relu(T::lit(0.1)),
            Activation::Relu => x.relu(),
            Activation::Silu => x * x.sigmoid(),
        }
    }
}

/// One layer of a darknet-style sequential description. Negative indices
/// are relative to the current layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        name: String,
        filters: usize,
        size: usize,
        stride: usize,
        #[serde(default)]
        activation: Activation,
    },
    /// Elementwise sum with an earlier layer.
    Shortcut { from: isize },
    /// Channel concatenation of earlier layers.
    Route { layers: Vec<isize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    #[serde(default = "three")]
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
    /// Layer indices whose outputs form the pyramid, finest first.
    pub taps: Vec<usize>,
}

fn three() -> usize {
    3
}

/// Stride and channel count of one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelInfo {
    pub stride: usize,
    pub channels: usize,
}

impl NetSpec {
    /// Five 3×3 stride-2 stages; taps at strides 4, 8, 16, 32.
    pub fn reference(stage_channels: [usize; 5]) -> Self {
        let layers = stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| LayerSpec::Conv { name: format!("stage{}", i + 1), filters: c, size: 3, stride: 2, activation: Activation::Leaky })
            .collect();
        Self { input_channels: 3, layers, taps: vec![1, 2, 3, 4] }
    }

    fn absolute(i: usize, rel: isize) -> Result<usize, VisError> {
        let j = if rel < 0 { i as isize + rel } else { rel };
        if j < 0 || j as usize >= i {
            return Err(VisError::Architecture(format!("layer {i} refers to layer {rel}, which is not an earlier layer")));
        }
        Ok(j as usize)
    }

    /// `(channels, stride)` after every layer; checks references and taps.
    pub fn resolve(&self) -> Result<Vec<LevelInfo>, VisError> {
        let mut out: Vec<LevelInfo> = Vec::with_capacity(self.layers.len());
        let mut names = BTreeSet::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = if i == 0 { LevelInfo { stride: 1, channels: self.input_channels } } else { out[i - 1] };
            let info = match layer {
                LayerSpec::Conv { name, filters, size, stride, .. } => {
                    if !names.insert(name.clone()) {
                        return Err(VisError::Architecture(format!("duplicate layer name {name:?}")));
                    }
                    if *filters == 0 || *size == 0 || size % 2 == 0 || !matches!(stride, 1 | 2) {
                        return Err(VisError::Architecture(format!("layer {name:?}: need filters>0, odd size and stride 1 or 2")));
                    }
                    LevelInfo { stride: prev.stride * stride, channels: *filters }
                }
                LayerSpec::Shortcut { from } => {
                    let j = Self::absolute(i, *from)?;
                    if out[j] != prev {
                        return Err(VisError::Architecture(format!("shortcut at layer {i}: {:?} vs {:?}", out[j], prev)));
                    }
                    prev
                }
                LayerSpec::Route { layers } => {
                    let mut stride = None;
                    let mut channels = 0;
                    for &r in layers {
                        let j = Self::absolute(i, r)?;
                        if stride.is_some_and(|s| s != out[j].stride) {
                            return Err(VisError::Architecture(format!("route at layer {i} mixes strides")));
                        }
                        stride = Some(out[j].stride);
                        channels += out[j].channels;
                    }
                    let stride = stride.ok_or_else(|| VisError::Architecture(format!("empty route at layer {i}")))?;
                    LevelInfo { stride, channels }
                }
            };
            out.push(info);
        }
        if self.taps.is_empty() {
            return Err(VisError::Architecture("no tap layers".into()));
        }
        for w in self.taps.windows(2) {
            let (a, b) = (out.get(w[0]), out.get(w[1]));
            if !matches!((a, b), (Some(a), Some(b)) if b.stride == 2 * a.stride) {
                return Err(VisError::Architecture(format!("taps {} and {} are not consecutive stride-2 levels", w[0], w[1])));
            }
        }
        if self.taps.iter().any(|&t| t >= out.len()) {
            return Err(VisError::Architecture("tap index past the last layer".into()));
        }
        Ok(out)
    }
}

/// Pyramid level `B×C×h×w`.
#[derive(Debug, Clone, Copy)]
pub struct PyramidLevel<'g, T: Real> {
    pub stride: usize,
    pub map: Var<'g, T>,
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid<'g, T: Real> {
    /// Finest first; strides strictly increasing.
    pub levels: Vec<PyramidLevel<'g, T>>,
}

impl<'g, T: Real> FeaturePyramid<'g, T> {
    /// `(stride, channels, h, w)` per level.
    pub fn shapes(&self) -> Vec<(usize, usize, usize, usize)> {
        self.levels
            .iter()
            .map(|l| {
                let s = l.map.shape();
                (l.stride, s[1], s[2], s[3])
            })
            .collect()
    }
}

/// Result of binding a weight container to an architecture.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightReport {
    pub loaded: Vec<String>,
    pub unmatched: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub spec: NetSpec,
    pub kind: BackboneKind,
    convs: Vec<Option<Conv2d>>,
    infos: Vec<LevelInfo>,
}

const PREFIX: &str = "backbone.";

impl Backbone {
    /// Random (He) initialisation of any valid spec.
    pub fn from_spec<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        spec: NetSpec,
        kind: BackboneKind,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self, VisError> {
        let infos = spec.resolve()?;
        let mut convs = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            convs.push(match layer {
                LayerSpec::Conv { name, filters, size, stride, .. } => {
                    let in_ch = if i == 0 { spec.input_channels } else { infos[i - 1].channels };
                    Some(Conv2d::new(ps, &format!("{PREFIX}{name}"), in_ch, *filters, *size, *stride, trainable, rng))
                }
                _ => None,
            });
        }
        Ok(Self { spec, kind, convs, infos })
    }

    pub fn build<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        cfg: &BackboneConfig,
        rng: &mut R,
    ) -> Result<(Self, WeightReport), VisError> {
        cfg.validate()?;
        match (cfg.kind, &cfg.weights) {
            (BackboneKind::ReferenceSmall, None) => {
                let bb = Self::from_spec(ps, NetSpec::reference(cfg.stage_channels), cfg.kind, !cfg.freeze, rng)?;
                Ok((bb, WeightReport::default()))
            }
            (kind, Some(path)) => {
                let spec = (kind == BackboneKind::ReferenceSmall).then(|| NetSpec::reference(cfg.stage_channels));
                let mut bb = load_external_weights(ps, path, "named-tensors", spec, !cfg.freeze, rng)?;
                bb.0.kind = kind;
                Ok(bb)
            }
            (BackboneKind::External, None) => unreachable!("validated"),
        }
    }

    pub fn levels(&self) -> Vec<LevelInfo> {
        self.spec.taps.iter().map(|&t| self.infos[t]).collect()
    }

    pub fn max_stride(&self) -> usize {
        self.infos.iter().map(|i| i.stride).max().unwrap_or(1)
    }

    /// Parameter ids of every conv layer, in layer order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.convs.iter().flatten().flat_map(|c| std::iter::once(c.w).chain(c.b)).collect()
    }

    /// Run the net on `B×C×H×W` images and return the last `k` tap levels.
    pub fn extract<'g, T: Real>(&self, f: &Fwd<'g, T>, images: Var<'g, T>, k: usize) -> Result<FeaturePyramid<'g, T>, VisError> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != self.spec.input_channels {
            return Err(VisError::Config(format!("expected N×{}×H×W images, got {shape:?}", self.spec.input_channels)));
        }
        let taps = self.spec.taps.len();
        if k == 0 || k > taps {
            return Err(VisError::Config(format!("scales_used {k} but the backbone has {taps} levels")));
        }
        let stride = self.max_stride();
        let (h, w) = (shape[2], shape[3]);
        if h % stride != 0 || w % stride != 0 {
            return Err(VisError::Resolution { h, w, stride });
        }
        let last_needed = *self.spec.taps.iter().max().unwrap();
        let mut outs: Vec<Var<'g, T>> = Vec::with_capacity(last_needed + 1);
        for (i, layer) in self.spec.layers.iter().enumerate().take(last_needed + 1) {
            let prev = if i == 0 { images } else { outs[i - 1] };
            let y = match layer {
                LayerSpec::Conv { activation, .. } => activation.apply(self.convs[i].as_ref().unwrap().forward(f, prev)),
                LayerSpec::Shortcut { from } => prev + outs[NetSpec::absolute(i, *from)?],
                LayerSpec::Route { layers } => {
                    let parts: Vec<_> = layers.iter().map(|&r| NetSpec::absolute(i, r).map(|j| outs[j])).collect::<Result<_, _>>()?;
                    if parts.len() == 1 {
                        parts[0]
                    } else {
                        f.g.concat(&parts, 1)
                    }
                }
            };
            outs.push(y);
        }
        let levels = self.spec.taps[taps - k..]
            .iter()
            .map(|&t| PyramidLevel { stride: self.infos[t].stride, map: outs[t] })
            .collect();
        Ok(FeaturePyramid { levels })
    }
}

/// Checks the configured input side, then extracts `cfg.scales_used` levels.
pub fn extract_features<'g, T: Real>(
    f: &Fwd<'g, T>,
    backbone: &Backbone,
    images: Var<'g, T>,
    cfg: &BackboneConfig,
) -> Result<FeaturePyramid<'g, T>, VisError> {
    cfg.validate()?;
    let s = images.shape();
    if s.len() == 4 && (s[2] != cfg.resolution || s[3] != cfg.resolution) {
        return Err(VisError::Config(format!("image is {}x{}, config resolution is {}", s[3], s[2], cfg.resolution)));
    }
    backbone.extract(f, images, cfg.scales_used)
}

fn check_shape(name: &str, t: &RawTensor, expected: &[usize]) -> Result<(), VisError> {
    if t.shape != expected {
        return Err(VisError::ShapeMismatch { tensor: name.to_owned(), found: t.shape.clone(), expected: expected.to_vec() });
    }
    Ok(())
}

/// Build a backbone from a weight container. The architecture comes from
/// `spec` or, when `None`, from the container's `architecture` metadata.
/// Every conv layer needs `<name>.weight`; `<name>.bias` defaults to zero.
pub fn load_external_weights<T: Real, R: Rng + ?Sized>(
    ps: &mut ParamStore<T>,
    path: &Path,
    format_tag: &str,
    spec: Option<NetSpec>,
    trainable: bool,
    rng: &mut R,
) -> Result<(Backbone, WeightReport), VisError> {
    if !matches!(format_tag, "named-tensors" | "safetensors") {
        return Err(VisError::Format(format_tag.to_owned()));
    }
    let file = Container::load(path)?;
    let spec = match spec {
        Some(s) => s,
        None => {
            let json = file
                .metadata
                .get(ARCHITECTURE_KEY)
                .ok_or_else(|| VisError::Architecture(format!("{} has no {ARCHITECTURE_KEY:?} metadata", path.display())))?;
            serde_json::from_str(json).map_err(|e| VisError::Architecture(format!("{}: {e}", path.display())))?
        }
    };
    // Validate everything before touching the parameter store.
    let infos = spec.resolve()?;
    let mut consumed = BTreeSet::new();
    let mut values: Vec<(ArrayD<f32>, ArrayD<f32>)> = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        if let LayerSpec::Conv { name, filters, size, .. } = layer {
            let in_ch = if i == 0 { spec.input_channels } else { infos[i - 1].channels };
            let wname = format!("{name}.weight");
            let bname = format!("{name}.bias");
            let w = file.tensors.get(&wname).ok_or_else(|| VisError::MissingTensor { layer: name.clone(), tensor: wname.clone() })?;
            check_shape(&wname, w, &[*filters, in_ch, *size, *size])?;
            let wv = w.to_f32_lossy(&wname)?;
            consumed.insert(wname);
            let bv = match file.tensors.get(&bname) {
                Some(b) => {
                    check_shape(&bname, b, &[*filters])?;
                    consumed.insert(bname.clone());
                    b.to_f32_lossy(&bname)?
                }
                None => ArrayD::zeros(ndarray::IxDyn(&[*filters])),
            };
            values.push((wv, bv));
        }
    }
    let bb = Backbone::from_spec(ps, spec, BackboneKind::External, trainable, rng)?;
    for (conv, (w, b)) in bb.convs.iter().flatten().zip(values) {
        ps.get_mut(conv.w).value = w.mapv(|v| T::lit(v as f64));
        ps.get_mut(conv.b.expect("conv bias")).value = b.mapv(|v| T::lit(v as f64));
    }
    let unmatched = file.tensors.keys().filter(|k| !consumed.contains(*k)).cloned().collect();
    Ok((bb, WeightReport { loaded: consumed.into_iter().collect(), unmatched }))
}

/// Save the backbone's conv weights (as F32) with its architecture embedded.
pub fn save_backbone_weights<T: Real>(ps: &ParamStore<T>, bb: &Backbone, path: &Path) -> Result<(), VisError> {
    let mut c = Container::new();
    for layer in bb.spec.layers.iter().zip(&bb.convs) {
        if let (LayerSpec::Conv { name, .. }, Some(conv)) = layer {
            c.insert(format!("{name}.weight"), &ps.value(conv.w).mapv(|v| v.to_f64_lossy() as f32));
            c.insert(format!("{name}.bias"), &ps.value(conv.b.unwrap()).mapv(|v| v.to_f64_lossy() as f32));
        }
    }
    c.metadata.insert(ARCHITECTURE_KEY.into(), serde_json::to_string(&bb.spec).expect("spec serializes"));
    c.save(path, false)?;
    Ok(())
}

/// Prefixes stripped from source tensor names by the converter.
const STRIP_PREFIXES: [&str; 3] = ["module.", "model.", "backbone."];

/// Rewrite a third-party checkpoint into the backbone layout: names are
/// mapped through `name_map` (source layer prefix per conv layer; default
/// the layer name itself after stripping wrapper prefixes), any float dtype
/// is narrowed to F32, and a `conv` + `bn` pair is folded into weight/bias.
pub fn convert_backbone_weights(
    src: &Path,
    spec: &NetSpec,
    name_map: &std::collections::BTreeMap<String, String>,
    out: &Path,
) -> Result<WeightReport, VisError> {
    let input = Container::load(src)?;
    let mut tensors = std::collections::BTreeMap::new();
    for (name, t) in &input.tensors {
        let mut n = name.as_str();
        while let Some(rest) = STRIP_PREFIXES.iter().find_map(|p| n.strip_prefix(p)) {
            n = rest;
        }
        tensors.insert(n.to_owned(), (name.clone(), t));
    }
    spec.resolve()?;
    let mut c = Container::new();
    let mut used = BTreeSet::new();
    let fetch = |key: &str, used: &mut BTreeSet<String>| -> Result<Option<ArrayD<f32>>, VisError> {
        match tensors.get(key) {
            Some((orig, t)) => {
                used.insert(orig.clone());
                Ok(Some(t.to_f32_lossy(orig)?))
            }
            None => Ok(None),
        }
    };
    for layer in &spec.layers {
        let LayerSpec::Conv { name, filters, .. } = layer else { continue };
        let src_prefix = name_map.get(name).cloned().unwrap_or_else(|| name.clone());
        let w = match fetch(&format!("{src_prefix}.weight"), &mut used)? {
            Some(w) => w,
            None => fetch(&format!("{src_prefix}.conv.weight"), &mut used)?
                .ok_or_else(|| VisError::MissingTensor { layer: name.clone(), tensor: format!("{src_prefix}.weight") })?,
        };
        let mut bias = fetch(&format!("{src_prefix}.bias"), &mut used)?
            .or(fetch(&format!("{src_prefix}.conv.bias"), &mut used)?)
            .unwrap_or_else(|| ArrayD::zeros(ndarray::IxDyn(&[*filters])));
        let mut w = w;
        let bn = ["weight", "bias", "running_mean", "running_var"]
            .iter()
            .map(|p| fetch(&format!("{src_prefix}.bn.{p}"), &mut used))
            .collect::<Result<Vec<_>, _>>()?;
        if let [Some(gamma), Some(beta), Some(mean), Some(var)] = &bn[..] {
            for o in 0..*filters {
                let s = gamma[[o]] / (var[[o]] + 1e-5).sqrt();
                w.index_axis_mut(ndarray::Axis(0), o).mapv_inplace(|v| v * s);
                bias[[o]] = (bias[[o]] - mean[[o]]) * s + beta[[o]];
            }
        }
        c.insert(format!("{name}.weight"), &w);
        c.insert(format!("{name}.bias"), &bias);
    }
    c.metadata.insert(ARCHITECTURE_KEY.into(), serde_json::to_string(spec).expect("spec serializes"));
    c.save(out, false)?;
    let unmatched = input.tensors.keys().filter(|k| !used.contains(*k)).cloned().collect();
    Ok(WeightReport { loaded: used.into_iter().collect(), unmatched })
}

/// Side of a pyramid level for a square input.
pub fn level_side(resolution: usize, stride: usize) -> usize {
    resolution / stride
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use ndarray::{s, Array4, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> BackboneConfig {
        BackboneConfig { stage_channels: [4, 8, 8, 16, 16], resolution: 64, ..Default::default() }
    }

    #[test]
    fn reference_shapes_at_416() {
        let mut ps = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = BackboneConfig { stage_channels: [8, 16, 256, 512, 1024], ..Default::default() };
        let (bb, _) = Backbone::build(&mut ps, &cfg, &mut rng).unwrap();
        let levels = bb.levels();
        assert_eq!(levels.iter().map(|l| l.stride).collect::<Vec<_>>(), vec![4, 8, 16, 32]);
        assert_eq!(levels[1..].iter().map(|l| l.channels).collect::<Vec<_>>(), vec![256, 512, 1024]);
        assert_eq!((level_side(416, 8), level_side(416, 16), level_side(416, 32)), (52, 26, 13));
    }

    #[test]
    fn zero_image_gives_finite_output_and_k_levels() {
        let mut ps = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = small_cfg();
        let (bb, _) = Backbone::build(&mut ps, &cfg, &mut rng).unwrap();
        let g = Graph::inference();
        let f = Fwd::eval(&g, &ps);
        let x = g.constant(ArrayD::zeros(IxDyn(&[1, 3, 64, 64])));
        for k in 1..=4 {
            let pyr = extract_features(&f, &bb, x, &BackboneConfig { scales_used: k, ..cfg.clone() }).unwrap();
            assert_eq!(pyr.levels.len(), k);
            assert_eq!(pyr.levels.last().unwrap().stride, 32);
            assert!(pyr.levels.iter().all(|l| l.map.value().iter().all(|v| v.is_finite())));
        }
        let bad = g.constant(ArrayD::zeros(IxDyn(&[1, 3, 48, 48])));
        assert!(matches!(bb.extract(&f, bad, 1), Err(VisError::Resolution { .. })));
        assert!(BackboneConfig { resolution: 100, ..Default::default() }.validate().is_err());
    }

    fn coarse_argmax(bb: &Backbone, ps: &ParamStore<f64>, img: Array4<f64>) -> (usize, usize) {
        let g = Graph::inference();
        let f = Fwd::eval(&g, ps);
        let pyr = bb.extract(&f, g.constant(img.into_dyn()), 1).unwrap();
        let v = pyr.levels[0].map.value().clone();
        let (h, w) = (v.shape()[2], v.shape()[3]);
        let mut best = (0, 0, f64::MIN);
        for y in 0..h {
            for x in 0..w {
                let e: f64 = v.slice(s![0, .., y, x]).iter().map(|a| a * a).sum();
                if e > best.2 {
                    best = (y, x, e);
                }
            }
        }
        (best.0, best.1)
    }

    #[test]
    fn impulse_shift_by_stride_moves_argmax_one_cell() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (bb, _) = Backbone::build(&mut ps, &BackboneConfig { resolution: 256, ..small_cfg() }, &mut rng).unwrap();
        let impulse = |y: usize, x: usize| {
            let mut a = Array4::<f64>::zeros((1, 3, 256, 256));
            a.slice_mut(s![0, .., y..y + 3, x..x + 3]).fill(1.0);
            a
        };
        let (y0, x0) = coarse_argmax(&bb, &ps, impulse(100, 90));
        let (y1, x1) = coarse_argmax(&bb, &ps, impulse(100, 122));
        let (y2, x2) = coarse_argmax(&bb, &ps, impulse(132, 90));
        assert_eq!((y1, x1), (y0, x0 + 1));
        assert_eq!((y2, x2), (y0 + 1, x0));
    }

    #[test]
    fn spec_validation_rejects_bad_graphs() {
        let mut spec = NetSpec::reference([4, 4, 4, 4, 4]);
        spec.taps = vec![1, 3];
        assert!(spec.resolve().is_err());
        let bad_ref = NetSpec {
            input_channels: 3,
            layers: vec![LayerSpec::Shortcut { from: -1 }],
            taps: vec![0],
        };
        assert!(bad_ref.resolve().is_err());
    }

    fn residual_spec() -> NetSpec {
        let conv = |name: &str, filters, stride| LayerSpec::Conv { name: name.into(), filters, size: 3, stride, activation: Activation::Leaky };
        NetSpec {
            input_channels: 3,
            layers: vec![
                conv("c0", 4, 2),
                conv("c1", 4, 1),
                LayerSpec::Shortcut { from: -2 },
                conv("c2", 6, 2),
                LayerSpec::Route { layers: vec![-1, -1] },
            ],
            taps: vec![2, 4],
        }
    }

    #[test]
    fn external_weights_roundtrip_and_report() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.safetensors");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::<f32>::new();
        let bb = Backbone::from_spec(&mut ps, residual_spec(), BackboneKind::External, false, &mut rng).unwrap();
        assert_eq!(bb.levels(), vec![LevelInfo { stride: 2, channels: 4 }, LevelInfo { stride: 4, channels: 12 }]);
        save_backbone_weights(&ps, &bb, &path).unwrap();

        let mut ps2 = ParamStore::<f32>::new();
        let (bb2, rep) = load_external_weights(&mut ps2, &path, "named-tensors", None, false, &mut rng).unwrap();
        assert!(rep.unmatched.is_empty());
        assert_eq!(rep.loaded.len(), 6);
        for (a, b) in bb.param_ids().into_iter().zip(bb2.param_ids()) {
            assert_eq!(ps.value(a), ps2.value(b));
        }

        // one extra tensor
        let mut c = Container::load(&path).unwrap();
        c.insert("head.extra", &ArrayD::<f32>::zeros(IxDyn(&[2])));
        c.save(&path, false).unwrap();
        let (_, rep) = load_external_weights(&mut ParamStore::<f32>::new(), &path, "named-tensors", None, false, &mut rng).unwrap();
        assert_eq!(rep.unmatched, vec!["head.extra".to_string()]);

        // shape mismatch names the tensor
        c.insert("c1.weight", &ArrayD::<f32>::zeros(IxDyn(&[4, 4, 1, 1])));
        c.save(&path, false).unwrap();
        let err = load_external_weights(&mut ParamStore::<f32>::new(), &path, "named-tensors", None, false, &mut rng).unwrap_err();
        assert!(matches!(&err, VisError::ShapeMismatch { tensor, .. } if tensor == "c1.weight"), "{err}");

        // missing tensor names the layer
        c.insert("c1.weight", &ArrayD::<f32>::zeros(IxDyn(&[4, 4, 3, 3])));
        c.tensors.remove("c2.weight");
        c.save(&path, false).unwrap();
        let err = load_external_weights(&mut ParamStore::<f32>::new(), &path, "named-tensors", None, false, &mut rng).unwrap_err();
        assert!(matches!(&err, VisError::MissingTensor { layer, .. } if layer == "c2"), "{err}");
        assert!(matches!(
            load_external_weights(&mut ParamStore::<f32>::new(), &path, "pickle", None, false, &mut rng),
            Err(VisError::Format(_))
        ));
    }

    #[test]
    fn converter_folds_batch_norm() {
        let dir = tempfile::tempdir().unwrap();
        let spec = NetSpec {
            input_channels: 1,
            layers: vec![LayerSpec::Conv { name: "c0".into(), filters: 2, size: 1, stride: 2, activation: Activation::Linear }],
            taps: vec![0],
        };
        let mut src = Container::new();
        src.insert("module.layer0.conv.weight", &ArrayD::from_shape_vec(IxDyn(&[2, 1, 1, 1]), vec![1.0f32, 2.0]).unwrap());
        src.insert("module.layer0.bn.weight", &ArrayD::from_shape_vec(IxDyn(&[2]), vec![2.0f32, 1.0]).unwrap());
        src.insert("module.layer0.bn.bias", &ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.5f32, 0.0]).unwrap());
        src.insert("module.layer0.bn.running_mean", &ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0f32, 0.0]).unwrap());
        src.insert("module.layer0.bn.running_var", &ArrayD::from_shape_vec(IxDyn(&[2]), vec![4.0f32 - 1e-5, 1.0 - 1e-5]).unwrap());
        src.insert("module.fc.weight", &ArrayD::<f64>::zeros(IxDyn(&[3])));
        src.save(&dir.path().join("src.st"), false).unwrap();
        let map = [("c0".to_string(), "layer0".to_string())].into_iter().collect();
        let rep = convert_backbone_weights(&dir.path().join("src.st"), &spec, &map, &dir.path().join("out.st")).unwrap();
        assert_eq!(rep.unmatched, vec!["module.fc.weight".to_string()]);
        let out = Container::load(&dir.path().join("out.st")).unwrap();
        let w = out.array::<f32>("c0.weight").unwrap();
        let b = out.array::<f32>("c0.bias").unwrap();
        // scale = gamma / sqrt(var + eps) = (1, 1)
        assert!((w[[0, 0, 0, 0]] - 1.0).abs() < 1e-6 && (w[[1, 0, 0, 0]] - 2.0).abs() < 1e-6);
        assert!((b[[0]] - (-1.0 + 0.5)).abs() < 1e-6 && b[[1]].abs() < 1e-6);
    }

    #[test]
    fn identical_weights_give_identical_pyramid() {
        let cfg = small_cfg();
        let run = || {
            let mut ps = ParamStore::<f32>::new();
            let (bb, _) = Backbone::build(&mut ps, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            let g = Graph::inference();
            let f = Fwd::eval(&g, &ps);
            let img = ArrayD::from_shape_fn(IxDyn(&[1, 3, 64, 64]), |d| ((d[2] * 7 + d[3] * 3 + d[1]) % 11) as f32 / 11.0);
            let p = bb.extract(&f, g.constant(img), 2).unwrap();
            p.levels.iter().map(|l| l.map.value().clone()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
