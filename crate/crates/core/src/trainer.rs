//! Optimisation loop: learning-rate schedules, Adam, weight averaging,
//! checkpoints and the event log.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::augment::{apply_policy, draw_resize_side, AugmentedSample, Mix, Transform};
use crate::config::{data_path, ConfigError, EmaConfig, RunConfig, ScheduleConfig, ScheduleKind, SyntheticData};
use crate::container::{Container, ContainerError};
use crate::datahub::synthetic::synthetic_set;
use crate::datahub::{
    batch_indices, load_embeddings, load_manifest, random_embeddings, DataError, EmbeddingTable, RefSample, Split, Vocabulary, EMBED_DIM,
};
use crate::dethead::{assign_targets, total_loss, AnchorSet, AssignmentMap, HeadError, LossParts, MixTarget};
use crate::graph::{Graph, ParamStore};
use crate::image_ops::{load_rgb, to_nchw, Image, Letterbox};
use crate::metrics::{make_record, EvalRecord, Lexicon};
use crate::model::{choose_anchors, prepare_image, Model, ModelError};
use crate::nn::Fwd;
use crate::textenc::TextVariant;
use crate::visenc::{Backbone, BackboneKind, NetSpec};
use crate::Real;

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_FORMAT: &str = "simrec-train-state";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("checkpoint version {found} is not supported; this build reads version {expected}")]
    Version { found: String, expected: u32 },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("non-finite loss at step {step} (epoch {epoch}, lr {lr:e}, conf {conf}, box {box_term}, grad norm {grad_norm}); batch ids: {batch}")]
    NonFinite { step: u64, epoch: usize, lr: f64, conf: f64, box_term: f64, grad_norm: f64, batch: String },
    #[error("shadow tensor {name} has shape {shadow:?}, parameter has {param:?}")]
    ShapeMismatch { name: String, shadow: Vec<usize>, param: Vec<usize> },
    #[error("cannot read image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no training samples")]
    EmptyData,
}

// ---------------------------------------------------------------- schedule

/// `lr_min + (base - lr_min)(1 + cos(pi * progress)) / 2`.
pub fn cosine_lr(base: f64, min_ratio: f64, progress: f64) -> f64 {
    let lr_min = base * min_ratio;
    lr_min + 0.5 * (base - lr_min) * (1.0 + (std::f64::consts::PI * progress.clamp(0.0, 1.0)).cos())
}

/// Learning rate for optimizer step `step` of epoch `epoch`.
pub fn lr_at(s: &ScheduleConfig, epoch: usize, step: usize, steps_per_epoch: usize) -> f64 {
    let spe = steps_per_epoch.max(1);
    let global = epoch * spe + step;
    let lr = match s.kind {
        ScheduleKind::Step => {
            let passed = s.step_epochs.iter().filter(|&&m| m <= epoch).count();
            s.base_lr * s.step_factor.powi(passed as i32)
        }
        ScheduleKind::Cosine => cosine_lr(s.base_lr, s.min_lr_ratio, global as f64 / (s.total_epochs * spe) as f64),
    };
    if global < s.warmup_steps {
        lr * (global + 1) as f64 / s.warmup_steps as f64
    } else {
        lr
    }
}

// ---------------------------------------------------------------- averaging

/// Decay used for the `updates`-th update (0-based).
pub fn ema_decay(cfg: &EmaConfig, updates: u64) -> f64 {
    if cfg.warmup {
        let t = updates as f64;
        cfg.decay.min((1.0 + t) / (10.0 + t))
    } else {
        cfg.decay
    }
}

/// `shadow = d * shadow + (1 - d) * params`, elementwise.
pub fn ema_update<T: Real>(shadow: &mut ArrayD<T>, params: &ArrayD<T>, decay: f64) -> Result<(), TrainError> {
    if shadow.shape() != params.shape() {
        return Err(TrainError::ShapeMismatch { name: String::new(), shadow: shadow.shape().to_vec(), param: params.shape().to_vec() });
    }
    let (d, r) = (T::lit(decay), T::lit(1.0 - decay));
    Zip::from(shadow).and(params).for_each(|s, &p| *s = d * *s + r * p);
    Ok(())
}

// ---------------------------------------------------------------- optimizer

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub m: Vec<ArrayD<T>>,
    pub v: Vec<ArrayD<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> Adam<T> {
    pub fn new(ps: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { m: ps.zeros_like(), v: ps.zeros_like(), t: 0, beta1, beta2, eps }
    }

    /// One bias-corrected update; `None` gradients leave the parameter alone.
    pub fn step(&mut self, ps: &mut ParamStore<T>, grads: &[Option<ArrayD<T>>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (r1, r2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let (step, c2s, eps) = (T::lit(lr / c1), T::lit(c2.sqrt()), T::lit(self.eps));
        for (((_, p), g), (m, v)) in ps.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let Some(g) = g else { continue };
            Zip::from(&mut p.value).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                *m = b1 * *m + r1 * g;
                *v = b2 * *v + r2 * g * g;
                *w -= step * *m / (v.sqrt() / c2s + eps);
            });
        }
    }
}

/// Scale gradients so their global L2 norm is at most `max`; returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Option<ArrayD<T>>], max: Option<f64>) -> f64 {
    let norm = grads.iter().flatten().flat_map(|g| g.iter()).map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
    if let Some(max) = max {
        if norm > max && norm.is_finite() {
            let s = T::lit(max / norm);
            grads.iter_mut().flatten().for_each(|g| g.mapv_inplace(|v| v * s));
        }
    }
    norm
}

// ---------------------------------------------------------------- data

/// Samples plus their images, held in memory or read from disk on demand.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub samples: Vec<RefSample>,
    images: Option<Vec<Image>>,
    prepared: Vec<OnceCell<(usize, AugmentedSample)>>,
}

impl TrainData {
    pub fn in_memory(samples: Vec<RefSample>, images: Vec<Image>) -> Self {
        assert_eq!(samples.len(), images.len(), "one image per sample");
        let prepared = (0..samples.len()).map(|_| OnceCell::new()).collect();
        Self { samples, images: Some(images), prepared }
    }

    pub fn from_files(samples: Vec<RefSample>) -> Self {
        Self { prepared: Vec::new(), samples, images: None }
    }

    pub fn synthetic(s: &SyntheticData, split: Split) -> Self {
        let (n, seed) = if split == Split::Train { (s.train, s.seed) } else { (s.val, s.seed.wrapping_add(1)) };
        let (samples, images) = synthetic_set(n, &s.scene, seed, split);
        Self::in_memory(samples, images)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        self.samples.truncate(n);
        if let Some(im) = &mut self.images {
            im.truncate(n);
        }
        self.prepared.truncate(n);
    }

    pub fn image(&self, i: usize) -> Result<Image, TrainError> {
        match &self.images {
            Some(im) => Ok(im[i].clone()),
            None => {
                let path = &self.samples[i].image_path;
                load_rgb(path).map_err(|e| TrainError::Image { path: path.clone(), reason: e.to_string() })
            }
        }
    }

    /// Sample `i` letterboxed to `side`; cached for in-memory data.
    fn prepared(&self, i: usize, side: usize) -> Result<AugmentedSample, TrainError> {
        if let Some((s, p)) = self.prepared.get(i).and_then(OnceCell::get) {
            if *s == side {
                return Ok(p.clone());
            }
        }
        let (img, lb) = prepare_image(&self.image(i)?, side);
        let s = &self.samples[i];
        let out = AugmentedSample::new(img, lb.forward_box(&s.gt_box), s.expression.clone());
        if let Some(cell) = self.prepared.get(i) {
            let _ = cell.set((side, out.clone()));
        }
        Ok(out)
    }
}

/// Training and evaluation sets described by `cfg.data`.
pub fn load_data(cfg: &RunConfig) -> Result<(TrainData, Option<TrainData>), TrainError> {
    let d = &cfg.data;
    let (mut train, val) = match (&d.synthetic, &d.train_manifest) {
        (Some(s), _) => (TrainData::synthetic(s, Split::Train), (s.val > 0).then(|| TrainData::synthetic(s, Split::Val))),
        (None, Some(m)) => {
            let train = load_manifest(&data_path(m), d.train_split)?;
            let vm = d.val_manifest.as_ref().unwrap_or(m);
            let val = load_manifest(&data_path(vm), d.val_split)?;
            (TrainData::from_files(train.samples), (!val.samples.is_empty()).then(|| TrainData::from_files(val.samples)))
        }
        (None, None) => return Err(ConfigError::at("data", "set train_manifest or synthetic").into()),
    };
    if let Some(n) = d.max_train_samples {
        train.truncate(n);
    }
    if train.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let val = if d.eval_on_train { Some(train.clone()) } else { val };
    Ok((train, val))
}

// ---------------------------------------------------------------- evaluation

/// One prediction record per sample, inputs letterboxed to `model.resolution`.
pub fn evaluate<T: Real>(model: &Model, ps: &ParamStore<T>, data: &TrainData, batch: usize) -> Result<Vec<EvalRecord>, TrainError> {
    let (attr, spatial) = (Lexicon::default_attribute(), Lexicon::default_spatial());
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let mut imgs = Vec::with_capacity(chunk.len());
        let mut lbs = Vec::with_capacity(chunk.len());
        let mut toks = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let (img, lb) = prepare_image(&data.image(i)?, model.resolution);
            imgs.push(img);
            lbs.push(lb);
            toks.push(model.tokens(&data.samples[i].expression)?);
        }
        let refs: Vec<&Image> = imgs.iter().collect();
        let preds = model.predict(ps, &refs, &toks, &lbs)?;
        for (&i, p) in chunk.iter().zip(preds) {
            let s = &data.samples[i];
            out.push(make_record(&s.id, p.bbox, s.gt_box, p.confidence, &s.expression, &attr, &spatial));
        }
    }
    Ok(out)
}

/// Eval hook reporting accuracy at IoU 0.5 on `data`.
pub fn accuracy_hook<'a, T: Real>(data: &'a TrainData, batch: usize) -> impl FnMut(&Model, &ParamStore<T>) -> Result<f64, TrainError> + 'a {
    move |model, ps| {
        let recs = evaluate(model, ps, data, batch)?;
        Ok(recs.iter().filter(|r| r.iou >= 0.5).count() as f64 / recs.len().max(1) as f64)
    }
}

// ---------------------------------------------------------------- state

/// Scores a parameter set; higher is better.
pub type EvalHook<'a, T> = dyn FnMut(&Model, &ParamStore<T>) -> Result<f64, TrainError> + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossParts,
    pub grad_norm: f64,
    pub side: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalEvent {
    pub epoch: usize,
    pub step: u64,
    pub raw: f64,
    pub ema: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub params: ParamStore<T>,
    pub adam: Adam<T>,
    pub ema: Option<Vec<ArrayD<T>>>,
    pub ema_updates: u64,
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub global_step: u64,
    pub rng: ChaCha8Rng,
    pub best: Option<f64>,
}

pub struct Trainer<T: Real> {
    pub cfg: RunConfig,
    pub model: Model,
    pub state: TrainState<T>,
    train: TrainData,
    run_dir: Option<PathBuf>,
    events: Option<BufWriter<File>>,
    pub history: Vec<StepRecord>,
    pub evals: Vec<EvalEvent>,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn embedding_table(cfg: &RunConfig, vocab: &Vocabulary) -> Result<EmbeddingTable, TrainError> {
    match (&cfg.textenc.glove_path, cfg.textenc.variant) {
        (Some(p), TextVariant::LstmGlove | TextVariant::LstmGloveSa) => Ok(load_embeddings(vocab, &data_path(Path::new(p)), cfg.seed)?),
        _ => Ok(random_embeddings(vocab, EMBED_DIM, cfg.seed)),
    }
}

fn head_maps(cfg: &RunConfig) -> usize {
    if cfg.fusion.head_per_scale {
        cfg.scales_used
    } else {
        1
    }
}

fn state_rng(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1);
    r
}

/// Rescale an already square sample to `side`.
fn rescale(s: AugmentedSample, side: usize) -> AugmentedSample {
    if s.width() == side && s.height() == side {
        return s;
    }
    let lb = Letterbox::new(s.width(), s.height(), side);
    AugmentedSample {
        image: lb.apply(&s.image),
        gt_box: lb.forward_box(&s.gt_box),
        mix: s.mix.map(|m| Mix { partner_box: lb.forward_box(&m.partner_box), ..m }),
        track: None,
        ..s
    }
}

impl<T: Real> Trainer<T> {
    /// Fresh run: vocabulary from the training expressions, anchors from the
    /// training boxes, parameters seeded by `cfg.seed`.
    pub fn new(cfg: RunConfig, train: TrainData) -> Result<Self, TrainError> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(TrainError::EmptyData);
        }
        let vocab = Vocabulary::build(train.samples.iter().map(|s| s.expression.as_str()), cfg.data.vocab_min_count);
        let table = embedding_table(&cfg, &vocab)?;
        let boxes: Vec<(f64, f64)> = train
            .samples
            .iter()
            .map(|s| {
                let b = Letterbox::new(s.image_size.0, s.image_size.1, cfg.resolution).forward_box(&s.gt_box);
                (b.w, b.h)
            })
            .collect();
        let anchors = choose_anchors(&cfg, head_maps(&cfg), &boxes)?;
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (model, _) = Model::build(&mut ps, &cfg, vocab, &table, anchors, &mut rng)?;
        let s = &cfg.schedule;
        let adam = Adam::new(&ps, s.beta1, s.beta2, s.adam_eps);
        let ema = cfg.ema.enabled.then(|| ps.iter().map(|(_, p)| p.value.clone()).collect());
        let state = TrainState {
            params: ps,
            adam,
            ema,
            ema_updates: 0,
            epoch: 0,
            step_in_epoch: 0,
            global_step: 0,
            rng: state_rng(cfg.seed),
            best: None,
        };
        Ok(Self { cfg, model, state, train, run_dir: None, events: None, history: Vec::new(), evals: Vec::new() })
    }

    /// Create `dir` with `config.json`, `events.ndjson`, `checkpoints/` and `report/`.
    pub fn attach_run_dir(&mut self, dir: &Path) -> Result<(), TrainError> {
        let io = |path: &Path| {
            let path = path.to_owned();
            move |source| TrainError::Io { path, source }
        };
        for sub in ["checkpoints", "report"] {
            std::fs::create_dir_all(dir.join(sub)).map_err(io(&dir.join(sub)))?;
        }
        std::fs::write(dir.join("config.json"), self.cfg.to_json()).map_err(io(&dir.join("config.json")))?;
        let ev = dir.join("events.ndjson");
        let f = OpenOptions::new().create(true).append(true).open(&ev).map_err(io(&ev))?;
        self.events = Some(BufWriter::new(f));
        self.run_dir = Some(dir.to_owned());
        Ok(())
    }

    pub fn train_data(&self) -> &TrainData {
        &self.train
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.cfg.data.batch_size)
    }

    fn emit(&mut self, v: serde_json::Value) {
        if let Some(w) = &mut self.events {
            // the log is best effort; a full disk must not kill the run
            let _ = writeln!(w, "{v}");
            let _ = w.flush();
        }
    }

    /// The parameters with the EMA shadow substituted (raw parameters when EMA is off).
    pub fn ema_params(&self) -> ParamStore<T> {
        let mut ps = self.state.params.clone();
        if let Some(sh) = &self.state.ema {
            for ((_, p), s) in ps.iter_mut().zip(sh) {
                p.value.clone_from(s);
            }
        }
        ps
    }

    /// Augmented batch at a common side: samples, assignments, mixes.
    fn make_batch(&self, ids: &[usize], rng: &mut ChaCha8Rng) -> Result<(Vec<AugmentedSample>, usize), TrainError> {
        let res = self.cfg.resolution;
        let side = match self.cfg.augment.resize() {
            Some(e) => match e.transform {
                Transform::RandomResize { scale_min, scale_max, snap } if rng.random::<f64>() < e.prob => {
                    draw_resize_side(res, (scale_min, scale_max), snap, rng)
                }
                _ => res,
            },
            None => res,
        };
        let policy = self.cfg.augment.without_resize();
        let mut out = Vec::with_capacity(ids.len());
        for &i in ids {
            let base = self.train.prepared(i, res)?;
            let aug = if policy.is_empty() {
                base
            } else {
                let partner = if policy.needs_partner() { Some(self.train.prepared(rng.random_range(0..self.train.len()), res)?) } else { None };
                apply_policy(&base, &policy, partner.as_ref(), res, rng)
            };
            out.push(rescale(aug, side));
        }
        Ok((out, side))
    }

    /// One optimizer step on the next batch of the current epoch.
    pub fn step(&mut self) -> Result<StepRecord, TrainError> {
        let spe = self.steps_per_epoch();
        let (epoch, k) = (self.state.epoch, self.state.step_in_epoch);
        let order = batch_indices(self.train.len(), self.cfg.data.batch_size, true, epoch_seed(self.cfg.seed, epoch));
        let ids = &order[k];
        let lr = lr_at(&self.cfg.schedule, epoch, k, spe);
        let mut rng = self.state.rng.clone();
        let (batch, side) = self.make_batch(ids, &mut rng)?;
        let geoms = self.model.geoms(side);
        let literal = self.model.literal;
        let radius = self.cfg.head.center_radius;
        let targets: Vec<AssignmentMap> = batch.iter().map(|s| assign_targets(&s.gt_box, &geoms, literal, radius)).collect::<Result<_, _>>()?;
        let mixes: Vec<Option<MixTarget>> = if self.cfg.loss.dual_target {
            batch
                .iter()
                .map(|s| s.mix.map(|m| assign_targets(&m.partner_box, &geoms, literal, radius).map(|partner| MixTarget { partner, lambda: m.lambda })).transpose())
                .collect::<Result<_, _>>()?
        } else {
            Vec::new()
        };
        let tokens = batch.iter().map(|s| self.model.tokens(&s.expression)).collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
        let images = to_nchw::<T>(&refs).into_dyn();
        let dropout_seed = rng.random::<u64>();

        let (parts, mut grads) = {
            let g = Graph::new();
            let f = Fwd::new(&g, &self.state.params, true, dropout_seed);
            let raws = self.model.forward(&f, g.constant(images), &tokens)?;
            let (loss, parts) = total_loss(&g, &raws, &geoms, &targets, &mixes, &self.cfg.loss, literal);
            let grads = if parts.total.is_finite() { Some(g.backward(loss)) } else { None };
            let dense: Vec<Option<ArrayD<T>>> = self
                .state
                .params
                .iter()
                .map(|(id, p)| if p.trainable { grads.as_ref().and_then(|gr| gr.param(id).cloned()) } else { None })
                .collect();
            (parts, dense)
        };
        let grad_norm = clip_global_norm(&mut grads, self.cfg.schedule.grad_clip);
        if !parts.total.is_finite() || !grad_norm.is_finite() {
            let batch_ids = ids.iter().map(|&i| self.train.samples[i].id.as_str()).collect::<Vec<_>>().join(",");
            let err = TrainError::NonFinite {
                step: self.state.global_step,
                epoch,
                lr,
                conf: parts.conf,
                box_term: parts.box_term,
                grad_norm,
                batch: batch_ids,
            };
            self.emit(json!({"event": "abort", "step": self.state.global_step, "reason": err.to_string()}));
            return Err(err);
        }
        self.state.adam.step(&mut self.state.params, &grads, lr);
        if let Some(shadow) = &mut self.state.ema {
            let d = ema_decay(&self.cfg.ema, self.state.ema_updates);
            for (s, (_, p)) in shadow.iter_mut().zip(self.state.params.iter()) {
                ema_update(s, &p.value, d).map_err(|e| match e {
                    TrainError::ShapeMismatch { shadow, param, .. } => TrainError::ShapeMismatch { name: p.name.clone(), shadow, param },
                    other => other,
                })?;
            }
            self.state.ema_updates += 1;
        }
        self.state.rng = rng;
        self.state.global_step += 1;
        self.state.step_in_epoch += 1;
        if self.state.step_in_epoch == spe {
            self.state.step_in_epoch = 0;
            self.state.epoch += 1;
        }
        let rec = StepRecord { step: self.state.global_step, epoch, lr, loss: parts, grad_norm, side };
        self.history.push(rec);
        self.emit(json!({"event": "step", "step": rec.step, "epoch": epoch, "lr": lr, "loss": parts, "grad_norm": grad_norm, "side": side}));
        Ok(rec)
    }

    fn finished(&self) -> bool {
        self.state.epoch >= self.cfg.schedule.total_epochs || self.cfg.schedule.max_steps.is_some_and(|m| self.state.global_step >= m as u64)
    }

    /// Train until the epoch budget or `max_steps` runs out. `hook` scores a
    /// parameter set (higher is better); it runs every `eval_every` epochs and
    /// after the last step, on raw and, when enabled, EMA weights.
    pub fn run(&mut self, mut hook: Option<&mut EvalHook<'_, T>>) -> Result<(), TrainError> {
        let mut last_eval = None;
        while !self.finished() {
            self.step()?;
            let epoch_done = self.state.step_in_epoch == 0;
            if epoch_done && (self.state.epoch.is_multiple_of(self.cfg.schedule.eval_every) || self.finished()) {
                self.end_of_epoch(&mut hook)?;
                last_eval = Some(self.state.global_step);
            }
        }
        if last_eval != Some(self.state.global_step) {
            self.end_of_epoch(&mut hook)?;
        }
        Ok(())
    }

    fn end_of_epoch(&mut self, hook: &mut Option<&mut EvalHook<'_, T>>) -> Result<(), TrainError> {
        let mut improved = false;
        if let Some(hook) = hook {
            let raw = hook(&self.model, &self.state.params)?;
            let ema = match self.state.ema {
                Some(_) => Some(hook(&self.model, &self.ema_params())?),
                None => None,
            };
            let metric = ema.unwrap_or(raw);
            improved = self.state.best.is_none_or(|b| metric > b);
            if improved {
                self.state.best = Some(metric);
            }
            let ev = EvalEvent { epoch: self.state.epoch, step: self.state.global_step, raw, ema };
            self.evals.push(ev);
            self.emit(json!({"event": "eval", "epoch": ev.epoch, "step": ev.step, "acc_raw": raw, "acc_ema": ema, "best": self.state.best}));
        }
        if let Some(dir) = self.run_dir.clone() {
            self.save_checkpoint(&dir.join("checkpoints/last.ckpt"))?;
            if improved {
                self.save_checkpoint(&dir.join("checkpoints/best.ckpt"))?;
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------ checkpoints

    pub fn checkpoint(&self) -> Container {
        let s = &self.state;
        let mut c = Container::new();
        for (i, (_, p)) in s.params.iter().enumerate() {
            c.insert(format!("param.{}", p.name), &p.value);
            c.insert(format!("adam.m.{}", p.name), &s.adam.m[i]);
            c.insert(format!("adam.v.{}", p.name), &s.adam.v[i]);
            if let Some(e) = &s.ema {
                c.insert(format!("ema.{}", p.name), &e[i]);
            }
        }
        let m = &mut c.metadata;
        let seed: String = s.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        let entries = [
            ("format", CHECKPOINT_FORMAT.to_owned()),
            ("version", CHECKPOINT_VERSION.to_string()),
            ("dtype", T::DTYPE.to_owned()),
            ("config", serde_json::to_string(&self.cfg).expect("config serializes")),
            ("config_hash", self.cfg.hash()),
            ("vocab", serde_json::to_string(&self.model.vocab).expect("vocab serializes")),
            ("anchors", serde_json::to_string(&self.model.anchors).expect("anchors serialize")),
            ("backbone_spec", serde_json::to_string(&self.model.backbone.spec).expect("spec serializes")),
            ("backbone_kind", serde_json::to_string(&self.model.backbone.kind).expect("kind serializes")),
            ("epoch", s.epoch.to_string()),
            ("step_in_epoch", s.step_in_epoch.to_string()),
            ("global_step", s.global_step.to_string()),
            ("adam_t", s.adam.t.to_string()),
            ("ema_updates", s.ema_updates.to_string()),
            ("rng_seed", seed),
            ("rng_stream", s.rng.get_stream().to_string()),
            ("rng_word_pos", s.rng.get_word_pos().to_string()),
            ("best", s.best.map(|b| format!("{b:e}")).unwrap_or_default()),
        ];
        for (k, v) in entries {
            m.insert(k.to_owned(), v);
        }
        c
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        Ok(self.checkpoint().save(path, true)?)
    }

    /// Continue a run from a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn resume(path: &Path, train: TrainData) -> Result<Self, TrainError> {
        let c = Container::load(path)?;
        let restored = Restored::<T>::from_container(&c, path)?;
        let meta = |k: &str| meta(&c, path, k);
        let parse = |k: &str| -> Result<u128, TrainError> { meta(k)?.parse().map_err(|_| bad(path, format!("metadata {k} is not a number"))) };
        let Restored { cfg, model, params } = restored;
        let mut adam = Adam::new(&params, cfg.schedule.beta1, cfg.schedule.beta2, cfg.schedule.adam_eps);
        let mut ema = cfg.ema.enabled.then(|| params.zeros_like());
        for (i, (_, p)) in params.iter().enumerate() {
            adam.m[i] = tensor(&c, path, &format!("adam.m.{}", p.name), p.value.shape())?;
            adam.v[i] = tensor(&c, path, &format!("adam.v.{}", p.name), p.value.shape())?;
            if let Some(e) = &mut ema {
                e[i] = tensor(&c, path, &format!("ema.{}", p.name), p.value.shape())?;
            }
        }
        adam.t = parse("adam_t")? as u64;
        let seed_hex = meta("rng_seed")?;
        let mut seed = [0u8; 32];
        if seed_hex.len() != 64 {
            return Err(bad(path, "rng_seed must be 64 hex digits".into()));
        }
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|_| bad(path, "rng_seed is not hex".into()))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(parse("rng_stream")? as u64);
        rng.set_word_pos(parse("rng_word_pos")?);
        let best = meta("best")?;
        let state = TrainState {
            params,
            adam,
            ema,
            ema_updates: parse("ema_updates")? as u64,
            epoch: parse("epoch")? as usize,
            step_in_epoch: parse("step_in_epoch")? as usize,
            global_step: parse("global_step")? as u64,
            rng,
            best: if best.is_empty() { None } else { Some(best.parse().map_err(|_| bad(path, "best is not a number".into()))?) },
        };
        Ok(Self { cfg, model, state, train, run_dir: None, events: None, history: Vec::new(), evals: Vec::new() })
    }
}

fn bad(path: &Path, reason: String) -> TrainError {
    TrainError::Checkpoint { path: path.to_owned(), reason }
}

fn meta(c: &Container, path: &Path, key: &str) -> Result<String, TrainError> {
    c.metadata.get(key).cloned().ok_or_else(|| bad(path, format!("metadata {key} missing")))
}

fn tensor<T: Real>(c: &Container, path: &Path, name: &str, shape: &[usize]) -> Result<ArrayD<T>, TrainError> {
    let a: ArrayD<T> = c.array(name)?;
    if a.shape() != shape {
        return Err(bad(path, format!("tensor {name} has shape {:?}, expected {shape:?}", a.shape())));
    }
    Ok(a)
}

fn json_meta<D: serde::de::DeserializeOwned>(c: &Container, path: &Path, key: &str) -> Result<D, TrainError> {
    serde_json::from_str(&meta(c, path, key)?).map_err(|e| bad(path, format!("metadata {key}: {e}")))
}

/// Config, model and parameters rebuilt from a checkpoint.
pub struct Restored<T> {
    pub cfg: RunConfig,
    pub model: Model,
    pub params: ParamStore<T>,
}

impl<T: Real> Restored<T> {
    pub fn load(path: &Path, prefer_ema: bool) -> Result<Self, TrainError> {
        let c = Container::load(path)?;
        let mut r = Self::from_container(&c, path)?;
        if prefer_ema && r.cfg.ema.enabled {
            let names: Vec<(usize, String, Vec<usize>)> = r.params.iter().enumerate().map(|(i, (_, p))| (i, p.name.clone(), p.value.shape().to_vec())).collect();
            let values: Vec<ArrayD<T>> = names.iter().map(|(_, n, s)| tensor(&c, path, &format!("ema.{n}"), s)).collect::<Result<_, _>>()?;
            for ((_, p), v) in r.params.iter_mut().zip(values) {
                p.value = v;
            }
        }
        Ok(r)
    }

    fn from_container(c: &Container, path: &Path) -> Result<Self, TrainError> {
        let version = meta(c, path, "version")?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(TrainError::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        if c.metadata.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(bad(path, "not a training checkpoint".into()));
        }
        let cfg = RunConfig::from_json_str(&meta(c, path, "config")?)?;
        if cfg.hash() != meta(c, path, "config_hash")? {
            return Err(bad(path, "config hash does not match the stored config".into()));
        }
        let vocab: Vocabulary = json_meta(c, path, "vocab")?;
        let anchors: AnchorSet = json_meta(c, path, "anchors")?;
        let spec: NetSpec = json_meta(c, path, "backbone_spec")?;
        let kind: BackboneKind = json_meta(c, path, "backbone_kind")?;
        let embed_dim = c.get("param.text.embed")?.shape.get(1).copied().unwrap_or(EMBED_DIM);
        let table = random_embeddings(&vocab, embed_dim, 0);
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let backbone = Backbone::from_spec(&mut ps, spec, kind, !cfg.visenc.freeze, &mut rng).map_err(ModelError::from)?;
        let model = Model::assemble(&mut ps, &cfg, backbone, vocab, &table, anchors, &mut rng)?;
        let mut values = BTreeMap::new();
        for (_, p) in ps.iter() {
            values.insert(p.name.clone(), tensor::<T>(c, path, &format!("param.{}", p.name), p.value.shape())?);
        }
        for (_, p) in ps.iter_mut() {
            p.value = values.remove(&p.name).expect("collected above");
        }
        Ok(Self { cfg, model, params: ps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DataConfig, SyntheticData};
    use crate::datahub::synthetic::SceneConfig;

    pub(crate) fn tiny_cfg() -> RunConfig {
        let mut c = RunConfig {
            data: DataConfig {
                synthetic: Some(SyntheticData { train: 4, val: 0, scene: SceneConfig { width: 64, height: 64, min_side: 16, max_side: 32, distractors: 0 }, seed: 3 }),
                batch_size: 2,
                eval_on_train: true,
                ..Default::default()
            },
            ..Default::default()
        };
        c.resolution = 64;
        c.scales_used = 1;
        c.visenc.stage_channels = [4, 4, 8, 8, 8];
        c.visenc.freeze = false;
        c.fusion.dim = 8;
        c.textenc.hidden_dim = 8;
        c.textenc.pool_hidden = 8;
        c.textenc.heads = 2;
        c.textenc.dropout = 0.0;
        c.schedule.total_epochs = 3;
        c.schedule.step_epochs = vec![];
        c.schedule.base_lr = 1e-3;
        c
    }

    #[test]
    fn schedules() {
        let s = ScheduleConfig::default();
        for (e, lr) in [(0, 1e-4), (34, 1e-4), (35, 1e-5), (36, 1e-5), (38, 1e-6), (39, 1e-7)] {
            assert!((lr_at(&s, e, 0, 10) - lr).abs() < 1e-18, "epoch {e}");
        }
        assert_eq!(cosine_lr(1e-4, 0.01, 0.0), 1e-4);
        assert!((cosine_lr(1e-4, 0.01, 1.0) - 1e-6).abs() < 1e-20);
        let w = ScheduleConfig { warmup_steps: 4, ..Default::default() };
        assert!((lr_at(&w, 0, 1, 10) - 0.5e-4).abs() < 1e-18);
    }

    #[test]
    fn ema_examples() {
        let mut s = ArrayD::from_elem(ndarray::IxDyn(&[2]), 0.0f64);
        let p = ArrayD::from_elem(ndarray::IxDyn(&[2]), 1.0f64);
        ema_update(&mut s, &p, 0.9998).unwrap();
        assert!((s[[0]] - 0.0002).abs() < 1e-15);
        ema_update(&mut s, &p, 0.0).unwrap();
        assert_eq!(s[[0]], 1.0);
        let q = ArrayD::from_elem(ndarray::IxDyn(&[3]), 1.0f64);
        assert!(matches!(ema_update(&mut s, &q, 0.5), Err(TrainError::ShapeMismatch { .. })));
        assert!(ema_decay(&EmaConfig { enabled: true, decay: 0.9998, warmup: true }, 0) < 0.2);
    }

    #[test]
    fn adam_moves_only_with_gradient() {
        let mut ps = ParamStore::<f64>::new();
        ps.ones("a", &[2], true);
        ps.ones("b", &[2], true);
        let mut adam = Adam::new(&ps, 0.9, 0.999, 1e-8);
        let g = vec![Some(ArrayD::from_elem(ndarray::IxDyn(&[2]), 0.5)), Some(ArrayD::zeros(ndarray::IxDyn(&[2])))];
        adam.step(&mut ps, &g, 0.1);
        // first bias-corrected step moves by lr * sign(g)
        assert!((ps.value(crate::graph::ParamId(0))[[0]] - 0.9).abs() < 1e-6);
        assert_eq!(ps.value(crate::graph::ParamId(1))[[0]], 1.0);
        let mut gg = vec![Some(ArrayD::from_elem(ndarray::IxDyn(&[4]), 5.0f64))];
        let n = clip_global_norm(&mut gg, Some(5.0));
        assert_eq!(n, 10.0);
        assert!((gg[0].as_ref().unwrap()[[0]] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let cfg = tiny_cfg();
        let (train, _) = load_data(&cfg).unwrap();
        let mut a = Trainer::<f32>::new(cfg.clone(), train.clone()).unwrap();
        a.step().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.ckpt");
        a.save_checkpoint(&p).unwrap();
        let next = a.step().unwrap();
        let mut b = Trainer::<f32>::resume(&p, train).unwrap();
        for ((_, x), (_, y)) in a.state.params.iter().zip(b.state.params.iter()) {
            assert_eq!(x.name, y.name);
        }
        let again = b.step().unwrap();
        assert_eq!(next.loss.total.to_bits(), again.loss.total.to_bits());
        for ((_, x), (_, y)) in a.state.params.iter().zip(b.state.params.iter()) {
            assert_eq!(x.value, y.value, "{}", x.name);
        }
        // version mismatch is fatal and names both versions
        let mut c = Container::load(&p).unwrap();
        c.metadata.insert("version".into(), "99".into());
        c.save(&p, true).unwrap();
        let e = Trainer::<f32>::resume(&p, load_data(&cfg).unwrap().0).err().unwrap().to_string();
        assert!(e.contains("99") && e.contains('1'), "{e}");
    }

    #[test]
    fn run_writes_layout_and_evals() {
        let mut cfg = tiny_cfg();
        cfg.ema.enabled = true;
        let (train, val) = load_data(&cfg).unwrap();
        let val = val.unwrap();
        let mut t = Trainer::<f32>::new(cfg, train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        t.attach_run_dir(dir.path()).unwrap();
        let mut hook = accuracy_hook::<f32>(&val, 8);
        t.run(Some(&mut hook)).unwrap();
        assert_eq!(t.state.global_step, 6);
        assert_eq!(t.evals.len(), 3);
        assert!(t.evals.iter().all(|e| e.ema.is_some()));
        for f in ["config.json", "events.ndjson", "checkpoints/last.ckpt", "checkpoints/best.ckpt"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let events = std::fs::read_to_string(dir.path().join("events.ndjson")).unwrap();
        assert_eq!(events.lines().count(), 9);
        let r = Restored::<f32>::load(&dir.path().join("checkpoints/last.ckpt"), true).unwrap();
        assert_eq!(r.params.len(), t.state.params.len());
    }
}
