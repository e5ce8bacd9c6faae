//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use simrec::augment::{apply_policy, track_coverage, AugmentPolicy, AugmentedSample, PolicyEntry, Transform};
use simrec::cli::{cmd_ablate, AblateArgs};
use simrec::config::{EmaConfig, RunConfig, ScheduleConfig};
use simrec::datahub::synthetic::{generate_scene, SceneConfig};
use simrec::datahub::{random_embeddings, Vocabulary};
use simrec::dethead::{
    assign_targets, decode, decode_anchor_based, decode_anchor_free, encode, total_loss, total_loss_arrays, BoxLoss, ConfLoss, GridGeom, LossConfig,
};
use simrec::fusion::{eye, gated_fuse, matrix_as_pointwise, text_gate};
use simrec::geometry::{giou, iou, BoundingBox};
use simrec::graph::{numeric_grad, relative_error, Graph, ParamStore};
use simrec::image_ops::{to_nchw, Image};
use simrec::model::{choose_anchors, Model};
use simrec::nn::Fwd;
use simrec::trainer::{accuracy_hook, ema_decay, ema_update, evaluate, load_data, lr_at, Trainer};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn presets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets")
}

fn tiny_config() -> RunConfig {
    RunConfig::load(&presets().join("tiny_overfit.json")).expect("tiny_overfit preset loads")
}

fn decode_encode_round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for i in 0..10_000 {
        let t: [f64; 4] = [rng.random_range(-4.0..=4.0), rng.random_range(-4.0..=4.0), rng.random_range(-3.0..=3.0), rng.random_range(-3.0..=3.0)];
        let (gx, gy) = (rng.random_range(0..13), rng.random_range(0..13));
        let stride = [8.0, 16.0, 32.0][i % 3];
        let (b, base) = if i % 2 == 0 {
            let prior = (rng.random_range(4.0..300.0), rng.random_range(4.0..300.0));
            (decode_anchor_based(t, gx, gy, stride, prior, false), prior)
        } else {
            (decode_anchor_free(t, gx, gy, stride, false), (stride, stride))
        };
        let back = encode(&b, gx, gy, stride, base, false);
        for j in 0..4 {
            worst = worst.max((back[j] - t[j]).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst < 1e-6 && secs < 5.0, format!("max error {worst:.2e}, {secs:.2}s"))
}

fn raster_iou(a: [i64; 4], b: [i64; 4]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..64 {
        for x in 0..64 {
            let ina = x >= a[0] && x < a[2] && y >= a[1] && y < a[3];
            let inb = x >= b[0] && x < b[2] && y >= b[1] && y < b[3];
            inter += (ina && inb) as usize;
            union += (ina || inb) as usize;
        }
    }
    inter as f64 / union as f64
}

fn random_int_box(rng: &mut ChaCha8Rng) -> [i64; 4] {
    let (x1, y1) = (rng.random_range(0..63), rng.random_range(0..63));
    [x1, y1, rng.random_range(x1 + 1..=64), rng.random_range(y1 + 1..=64)]
}

fn to_box(c: [i64; 4]) -> BoundingBox<f64> {
    BoundingBox::from_corners(c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64)
}

fn iou_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut exact) = (0.0f64, true);
    for _ in 0..1000 {
        let (a, b) = (random_int_box(&mut rng), random_int_box(&mut rng));
        let (ba, bb) = (to_box(a), to_box(b));
        worst = worst.max((iou(&ba, &bb) - raster_iou(a, b)).abs());
        exact &= iou(&ba, &bb) == iou(&bb, &ba) && iou(&ba, &ba) == 1.0;
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst < 1e-6 && exact && secs < 10.0, format!("max deviation {worst:.2e}, symmetry/self exact: {exact}, {secs:.2}s"))
}

fn giou_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0;
    for _ in 0..1000 {
        let a = BoundingBox::new(rng.random_range(0.0..50.0), rng.random_range(0.0..50.0), rng.random_range(0.5..30.0), rng.random_range(0.5..30.0));
        let b = BoundingBox::new(rng.random_range(0.0..50.0), rng.random_range(0.0..50.0), rng.random_range(0.5..30.0), rng.random_range(0.5..30.0));
        if giou(&a, &b) > iou(&a, &b) {
            violations += 1;
        }
    }
    let g = giou(&BoundingBox::from_xywh(0.0f64, 0.0, 1.0, 1.0), &BoundingBox::from_xywh(2.0, 0.0, 1.0, 1.0));
    check(violations == 0 && (g + 1.0 / 3.0).abs() <= 1e-9, format!("{violations} violations, disjoint case {g:.12}"))
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let confs = [ConfLoss::Bce, ConfLoss::Focal { gamma: 2.0, alpha: 0.25 }, ConfLoss::BceLabelSmooth { eps: 0.1 }];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for conf in confs {
        for box_loss in BoxLoss::ALL {
            let cfg = LossConfig { conf, box_loss, dual_target: false };
            for point in 0..20 {
                let priors = if point % 2 == 0 { vec![(40.0, 50.0), (80.0, 60.0)] } else { vec![] };
                let geoms = vec![GridGeom { h: 3, w: 3, stride: 32, priors }];
                let slots = geoms[0].slots();
                let targets: Vec<_> = (0..2)
                    .map(|_| {
                        let gt = BoundingBox::new(rng.random_range(10.0..86.0), rng.random_range(10.0..86.0), rng.random_range(20.0..90.0), rng.random_range(20.0..90.0));
                        assign_targets(&gt, &geoms, false, 0).unwrap()
                    })
                    .collect();
                // non-saturated: every positive slot overlaps its target, so IoU-type terms are not flat
                let raw = loop {
                    let raw = ArrayD::from_shape_simple_fn(IxDyn(&[2, 3, 3, slots, 5]), || rng.random_range(-1.5..1.5));
                    let overlapping = targets.iter().enumerate().all(|(b, m)| {
                        m.positives.iter().all(|p| {
                            let t = [0, 1, 2, 3].map(|j| raw[[b, p.gy, p.gx, p.anchor, j]]);
                            let g = &geoms[p.scale];
                            iou(&decode(t, p.gx, p.gy, g.stride as f64, g.base(p.anchor), false), &p.gt) > 0.0
                        })
                    });
                    if overlapping {
                        break raw;
                    }
                };
                let mut ps = ParamStore::<f64>::new();
                let id = ps.add("raw", raw.clone(), true);
                let g = Graph::new();
                let f = Fwd::eval(&g, &ps);
                let (loss, _) = total_loss(&g, &[f.p(id)], &geoms, &targets, &[], &cfg, false);
                let analytic = g.backward(loss).param(id).cloned().ok_or("no gradient reached the raw grid")?;
                let numeric = numeric_grad(&raw, 1e-6, |r| total_loss_arrays(std::slice::from_ref(r), &geoms, &targets, &[], &cfg, false).0.total);
                worst = worst.max(relative_error(&analytic, &numeric, 1e-8));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst < 1e-4 && secs < 120.0, format!("max relative error {worst:.2e} over 240 points, {secs:.1}s"))
}

fn shape_contract() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.data.synthetic = Some(Default::default());
    cfg.textenc.hidden_dim = 64;
    cfg.textenc.pool_hidden = 64;
    let vocab = Vocabulary::build(["the man on the left"], 1);
    let table = random_embeddings(&vocab, 300, 0);
    let mut details = Vec::new();
    let mut ok = true;
    for r in [256usize, 320, 416, 512, 608] {
        cfg.resolution = r;
        cfg.validate().map_err(|e| e.to_string())?;
        let anchors = choose_anchors(&cfg, 1, &[]).map_err(|e| e.to_string())?;
        let mut ps = ParamStore::<f32>::new();
        let (model, _) = Model::build(&mut ps, &cfg, vocab.clone(), &table, anchors, &mut ChaCha8Rng::seed_from_u64(5)).map_err(|e| e.to_string())?;
        let g = Graph::inference();
        let f = Fwd::eval(&g, &ps);
        let img = Image::from_elem((r, r, 3), 0.5);
        let x = g.constant(to_nchw::<f32>(&[&img]).into_dyn());
        let pyramid = model.backbone.extract(&f, x, 3).map_err(|e| e.to_string())?;
        let text = model.text.encode(&f, &[model.tokens("the man on the left").unwrap()]).map_err(|e| e.to_string())?;
        let fused = model.fusion.forward(&f, &pyramid, text.pooled).map_err(|e| e.to_string())?;
        let got: Vec<(usize, usize, usize)> = pyramid.shapes().iter().map(|&(_, c, h, w)| (h, w, c)).collect();
        let want = vec![(r / 8, r / 8, 256), (r / 16, r / 16, 512), (r / 32, r / 32, 1024)];
        let fs = fused[0].map.shape();
        let fused_ok = fused.len() == 1 && fs[2] == r / 32 && fs[3] == r / 32;
        ok &= got == want && fused_ok;
        if r == 416 {
            details.push(format!("416: {got:?}, fused {}x{}", fs[2], fs[3]));
        }
        if got != want || !fused_ok {
            details.push(format!("{r}: got {got:?}, fused {fs:?}"));
        }
    }
    check(ok, details.join("; "))
}

fn gated_fusion_semantics() -> Outcome {
    let g = Graph::<f64>::inference();
    let level = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2, 1, 1]), vec![1.0, -2.0]).unwrap());
    let ft = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![3.0, 4.0]).unwrap());
    let out = gated_fuse(level, text_gate(ft, g.constant(eye(2))), g.constant(matrix_as_pointwise(&eye::<f64>(2))));
    let example: Vec<f64> = out.value().iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut negatives = 0;
    let mut rand = |shape: &[usize]| ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-3.0..3.0));
    for _ in 0..10_000 {
        let g = Graph::<f64>::inference();
        let gate = text_gate(g.constant(rand(&[2, 5])), g.constant(rand(&[5, 4])));
        let out = gated_fuse(g.constant(rand(&[2, 3, 2, 2])), gate, g.constant(rand(&[4, 3, 1, 1])));
        negatives += out.value().iter().filter(|&&v| v < 0.0).count();
    }
    check(example == vec![3.0, 0.0] && negatives == 0, format!("identity example {example:?}, {negatives} negative outputs"))
}

fn referent_track(s: &AugmentedSample) -> Array2<f32> {
    let [x1, y1, x2, y2] = s.gt_box.corners();
    let mut t = Array2::zeros((s.height(), s.width()));
    t.slice_mut(s![y1 as usize..y2 as usize, x1 as usize..x2 as usize]).fill(1.0);
    t
}

fn scene_sample(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> AugmentedSample {
    let sc = generate_scene(cfg, rng);
    let s = AugmentedSample::new(sc.image, sc.gt_box, sc.expression);
    let t = referent_track(&s);
    s.with_track(t)
}

fn augmentation_consistency() -> Outcome {
    let scene = SceneConfig { width: 128, height: 128, min_side: 20, max_side: 56, distractors: 2 };
    let transforms = [
        Transform::default_resize(),
        Transform::default_elastic(),
        Transform::default_rand_augment(),
        Transform::default_erasing(),
        Transform::default_mixup(),
        Transform::default_cutmix(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = Vec::new();
    let mut ok = true;
    for t in &transforms {
        let policy = AugmentPolicy::new([t.clone()]);
        let mut min_cov = 1.0f64;
        for _ in 0..200 {
            let base = scene_sample(&scene, &mut rng);
            let partner = scene_sample(&scene, &mut rng);
            let out = apply_policy(&base, &policy, Some(&partner), 128, &mut rng);
            // a fully erased referent has no coverage to measure
            if let Some(c) = track_coverage(&out) {
                min_cov = min_cov.min(c);
            }
        }
        ok &= min_cov >= 0.9;
        worst.push(format!("{} {:.3}", t.name(), min_cov));
    }
    let mut flagged = true;
    for t in [Transform::HorizontalFlip, Transform::RandomCrop { min_scale: 0.5 }] {
        let strict = AugmentPolicy::new([t.clone()]);
        flagged &= strict.validate().is_err();
        let mut allowed = strict.clone();
        allowed.allow_harmful = true;
        flagged &= allowed.validate().map(|w| !w.is_empty()).unwrap_or(false);
        let mut any = false;
        for _ in 0..20 {
            let base = scene_sample(&scene, &mut rng);
            let out = apply_policy(&base, &allowed, None, 128, &mut rng);
            if out.image != base.image {
                any = true;
                flagged &= !out.flags.is_empty();
            }
        }
        flagged &= any;
    }
    check(ok && flagged, format!("min coverage: {}; flip/crop flagged: {flagged}", worst.join(", ")))
}

fn tiny_overfit() -> Outcome {
    let start = Instant::now();
    let cfg = tiny_config();
    let (train, val) = load_data(&cfg).map_err(|e| e.to_string())?;
    let val = val.ok_or("tiny preset has no evaluation data")?;
    let mut trainer = Trainer::<f32>::new(cfg, train).map_err(|e| e.to_string())?;
    let mut hook = accuracy_hook::<f32>(&val, 16);
    trainer.run(Some(&mut hook)).map_err(|e| e.to_string())?;
    let steps = trainer.history.len();
    let records = evaluate(&trainer.model, &trainer.state.params, &val, 16).map_err(|e| e.to_string())?;
    let acc = records.iter().filter(|r| r.iou >= 0.5).count() as f64 / records.len() as f64;
    let losses: Vec<f64> = trainer.history.iter().map(|r| r.loss.total).collect();
    let windows: Vec<f64> = losses[100.min(losses.len())..].chunks(50).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    let monotone = windows.windows(2).all(|w| w[1] < w[0]);
    let secs = start.elapsed().as_secs_f64();
    let means: Vec<String> = windows.iter().map(|m| format!("{m:.4}")).collect();
    check(
        acc == 1.0 && steps <= 500 && secs < 300.0 && monotone,
        format!("acc@0.5 {acc:.3} after {steps} steps in {secs:.1}s; 50-step window means {}", means.join(" > ")),
    )
}

fn loss_structure() -> Outcome {
    let geoms = vec![GridGeom { h: 4, w: 4, stride: 16, priors: vec![] }];
    let gt = BoundingBox::new(37.0, 21.0, 30.0, 12.0);
    let map = assign_targets(&gt, &geoms, false, 0).map_err(|e| e.to_string())?;
    if map.count_positive() != 1 {
        return Err(format!("{} positive cells", map.count_positive()));
    }
    let p = &map.positives[0];
    let mut raw = ArrayD::from_elem(IxDyn(&[1, 4, 4, 1, 5]), 0.0f64);
    raw.slice_mut(s![.., .., .., .., 4]).fill(-60.0);
    let t = encode(&gt, p.gx, p.gy, 16.0, (16.0, 16.0), false);
    for j in 0..4 {
        raw[[0, p.gy, p.gx, 0, j]] = t[j];
    }
    raw[[0, p.gy, p.gx, 0, 4]] = 60.0;
    let mut worst = 0.0f64;
    let mut gated = true;
    for box_loss in BoxLoss::ALL {
        let cfg = LossConfig { box_loss, ..Default::default() };
        let g = Graph::<f64>::inference();
        let (_, parts) = total_loss(&g, &[g.constant(raw.clone())], &geoms, std::slice::from_ref(&map), &[], &cfg, false);
        worst = worst.max(parts.total.abs());
        let mut off = raw.clone();
        off[[0, p.gy, p.gx, 0, 2]] += 1.0;
        let (z, _) = total_loss_arrays(&[off], &geoms, &[map.zeroed()], &[], &cfg, false);
        gated &= z.box_term == 0.0 && z.total == z.conf;
    }
    check(worst <= 1e-6 && gated, format!("perfect-prediction loss {worst:.2e}; zeroed c' removes box term: {gated}"))
}

fn schedule_and_ema() -> Outcome {
    let s = ScheduleConfig::default();
    let lrs: Vec<f64> = [0, 36, 38, 39].iter().map(|&e| lr_at(&s, e, 0, 100)).collect();
    let lr_ok = lrs.iter().zip([1e-4, 1e-5, 1e-6, 1e-7]).all(|(a, b)| (a - b).abs() <= b * 1e-12);
    let cfg = EmaConfig { enabled: true, decay: 0.9998, warmup: false };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let init = ArrayD::from_shape_simple_fn(IxDyn(&[8]), || rng.random_range(-1.0..1.0));
    let params: Vec<ArrayD<f64>> = (0..1000).map(|_| ArrayD::from_shape_simple_fn(IxDyn(&[8]), || rng.random_range(-1.0..1.0))).collect();
    let mut shadow = init.clone();
    for (k, p) in params.iter().enumerate() {
        ema_update(&mut shadow, p, ema_decay(&cfg, k as u64)).map_err(|e| e.to_string())?;
    }
    // shadow_n = d^n shadow_0 + (1 - d) sum_k d^(n-1-k) p_k
    let d: f64 = cfg.decay;
    let n = params.len() as i32;
    let mut closed = init.mapv(|v| v * d.powi(n));
    for (k, p) in params.iter().enumerate() {
        closed.zip_mut_with(p, |c, &v| *c += (1.0 - d) * d.powi(n - 1 - k as i32) * v);
    }
    let err = (&shadow - &closed).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    check(lr_ok && err < 1e-10, format!("lr {lrs:?}; EMA closed-form error {err:.2e}"))
}

fn determinism() -> Outcome {
    let mut cfg = tiny_config();
    cfg.schedule.max_steps = Some(6);
    cfg.data.batch_size = 8;
    cfg.augment = AugmentPolicy {
        transforms: vec![
            PolicyEntry { transform: Transform::RandomResize { scale_min: 0.6, scale_max: 1.4, snap: 32 }, prob: 1.0 },
            PolicyEntry { transform: Transform::default_elastic(), prob: 0.5 },
            PolicyEntry { transform: Transform::default_rand_augment(), prob: 0.5 },
            PolicyEntry { transform: Transform::default_erasing(), prob: 0.5 },
            PolicyEntry { transform: Transform::default_mixup(), prob: 0.5 },
        ],
        allow_harmful: false,
    };
    cfg.loss.dual_target = true;
    cfg.ema.enabled = true;
    let run = |cfg: &RunConfig| -> Result<Vec<u64>, String> {
        let (train, _) = load_data(cfg).map_err(|e| e.to_string())?;
        let mut t = Trainer::<f32>::new(cfg.clone(), train).map_err(|e| e.to_string())?;
        t.run(None).map_err(|e| e.to_string())?;
        Ok(t.history.iter().map(|r| r.loss.total.to_bits()).collect())
    };
    let a = run(&cfg)?;
    let b = run(&cfg)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ckpt = dir.path().join("k.ckpt");
    let (train, _) = load_data(&cfg).map_err(|e| e.to_string())?;
    let mut t = Trainer::<f32>::new(cfg.clone(), train.clone()).map_err(|e| e.to_string())?;
    for _ in 0..3 {
        t.step().map_err(|e| e.to_string())?;
    }
    t.save_checkpoint(&ckpt).map_err(|e| e.to_string())?;
    let next = t.step().map_err(|e| e.to_string())?;
    let mut resumed = Trainer::<f32>::resume(&ckpt, train).map_err(|e| e.to_string())?;
    let again = resumed.step().map_err(|e| e.to_string())?;
    let params_equal = t.state.params.iter().zip(resumed.state.params.iter()).all(|((_, x), (_, y))| x.value == y.value);
    let same_curve = a == b && a.len() == 6;
    let resume_exact = next.loss.total.to_bits() == again.loss.total.to_bits() && params_equal;
    check(
        same_curve && resume_exact,
        format!("identical loss curves: {same_curve} ({} steps); resume step loss {} vs {}, params equal: {params_equal}", a.len(), next.loss.total, again.loss.total),
    )
}

fn ablation_harness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let args = AblateArgs {
        config: presets().join("tiny_overfit.json"),
        axis: "scales_used".into(),
        values: vec!["1".into(), "2".into(), "3".into()],
        overrides: vec![],
        out: dir.path().to_owned(),
        parallel: true,
    };
    let rows = cmd_ablate(&args).map_err(|e| e.to_string())?;
    let csv = std::fs::read_to_string(dir.path().join("results.csv")).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = csv.lines().collect();
    let header_ok = lines.first() == Some(&"scales_used,acc,delta");
    let baseline_ok = lines.get(1).is_some_and(|l| l.starts_with("1,") && l.ends_with(",+0.00"));
    let ok = header_ok && baseline_ok && lines.len() == 4 && rows.len() == 3;
    check(ok, format!("results.csv: {}", lines.join(" | ")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("decode/encode round trip", decode_encode_round_trip),
        ("IoU oracle equivalence", iou_oracle),
        ("GIoU properties", giou_properties),
        ("loss gradient checks", gradient_checks),
        ("shape contract", shape_contract),
        ("gated fusion semantics", gated_fusion_semantics),
        ("augmentation consistency", augmentation_consistency),
        ("tiny overfit", tiny_overfit),
        ("loss structure", loss_structure),
        ("schedule and EMA", schedule_and_ema),
        ("determinism and resume", determinism),
        ("ablation harness", ablation_harness),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|w| name.contains(w.as_str()) || *w == (i + 1).to_string()) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {:>2} {name}: PASS ({d}) [{secs:.1}s]", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({d}) [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
