use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use simrec::augment::{horizontal_flip, resize_to_side, AugmentedSample};
use simrec::config::{DataConfig, EmaConfig, RunConfig, ScheduleConfig, ScheduleKind, SyntheticData};
use simrec::datahub::synthetic::SceneConfig;
use simrec::datahub::{encode_expression, tokenize, Split, Vocabulary};
use simrec::dethead::{
    assign_targets, decode, encode, select_prediction, total_loss_arrays, BoxLoss, ConfLoss, GridGeom, LossConfig, PredictionGrid,
};
use simrec::fusion::gated_fuse;
use simrec::geometry::{giou, iou, BoundingBox};
use simrec::graph::{Graph, ParamStore};
use simrec::image_ops::Image;
use simrec::metrics::{accuracy_at, make_record, Lexicon};
use simrec::trainer::{lr_at, TrainData, Trainer};

fn boxes() -> impl Strategy<Value = BoundingBox<f64>> {
    (0.0..100.0f64, 0.0..100.0f64, 0.5..60.0f64, 0.5..60.0f64).prop_map(|(x, y, w, h)| BoundingBox::from_xywh(x, y, w, h))
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in boxes(), b in boxes()) {
        let ab = iou(&a, &b);
        prop_assert_eq!(ab, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn giou_never_exceeds_iou(a in boxes(), b in boxes()) {
        let g = giou(&a, &b);
        prop_assert!(g <= iou(&a, &b));
        prop_assert!(g >= -1.0);
    }

    #[test]
    fn decode_encode_round_trip(
        tx in -4.0..4.0f64, ty in -4.0..4.0f64, tw in -3.0..3.0f64, th in -3.0..3.0f64,
        gx in 0usize..13, gy in 0usize..13, prior in prop::option::of((4.0..200.0f64, 4.0..200.0f64)),
    ) {
        let stride = 32.0;
        let base = prior.unwrap_or((4.0 * stride, 4.0 * stride));
        let b = decode([tx, ty, tw, th], gx, gy, stride, base, false);
        let (cx, cy) = (b.cx, b.cy);
        prop_assert!(cx > gx as f64 * stride && cx < (gx + 1) as f64 * stride);
        prop_assert!(cy > gy as f64 * stride && cy < (gy + 1) as f64 * stride);
        let t = encode(&b, gx, gy, stride, base, false);
        for (u, v) in t.iter().zip([tx, ty, tw, th]) {
            prop_assert!((u - v).abs() < 1e-6, "{:?} vs {:?}", t, [tx, ty, tw, th]);
        }
    }

    #[test]
    fn accuracy_is_monotone_in_threshold(pairs in prop::collection::vec((boxes(), boxes()), 1..40)) {
        let (attr, spatial) = (Lexicon::default_attribute(), Lexicon::default_spatial());
        let records: Vec<_> = pairs.iter().enumerate().map(|(i, (p, g))| make_record(i.to_string(), *p, *g, 0.5, "red box", &attr, &spatial)).collect();
        let mut last = f64::INFINITY;
        for k in 0..=20 {
            let a = accuracy_at(&records, k as f64 / 20.0).unwrap();
            prop_assert!(a <= last);
            last = a;
        }
    }

    #[test]
    fn expression_encoding_is_deterministic(text in "[a-z ,.!]{1,40}") {
        let vocab = Vocabulary::build(["the red car on the left", "a blue box"], 1);
        let tokens = tokenize(&text);
        let first = encode_expression(&tokens, &vocab, 15);
        let again = encode_expression(&tokenize(&text), &vocab, 15);
        prop_assert_eq!(first.is_ok(), again.is_ok());
        if let (Ok(a), Ok(b)) = (first, again) {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn selection_over_scales_equals_best_per_scale(seed in 0u64..1000, ties in any::<bool>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grids: Vec<PredictionGrid<f64>> = [(8, 16), (4, 32), (2, 64)]
            .iter()
            .map(|&(n, stride)| {
                let geom = GridGeom { h: n, w: n, stride, priors: vec![(20.0, 30.0), (50.0, 40.0)] };
                let raw = ArrayD::from_shape_simple_fn(IxDyn(&[n, n, 2, 5]), || if ties { rng.random_range(0..3) as f64 } else { rng.random_range(-5.0..5.0) });
                PredictionGrid::new(raw, geom)
            })
            .collect();
        let all = select_prediction(&grids, false).unwrap();
        let mut best = None::<(usize, f64)>;
        for (s, g) in grids.iter().enumerate() {
            let one = select_prediction(std::slice::from_ref(g), false).unwrap();
            if best.is_none_or(|(_, z)| one.logit > z) {
                best = Some((s, one.logit));
            }
        }
        let (s, z) = best.unwrap();
        prop_assert_eq!(all.scale, s);
        prop_assert_eq!(all.logit, z);
    }

    #[test]
    fn every_loss_combination_is_nonnegative(seed in 0u64..500, x in 2.0..50.0f64, y in 2.0..50.0f64, w in 3.0..12.0f64, h in 3.0..12.0f64) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = BoundingBox::from_xywh(x, y, w, h);
        for geoms in [vec![GridGeom { h: 4, w: 4, stride: 16, priors: vec![] }], vec![GridGeom { h: 4, w: 4, stride: 16, priors: vec![(10.0, 12.0), (24.0, 20.0)] }]] {
            let map = assign_targets(&gt, &geoms, false, 0).unwrap();
            let slots = geoms[0].slots();
            let raw = ArrayD::from_shape_simple_fn(IxDyn(&[1, 4, 4, slots, 5]), || rng.random_range(-3.0..3.0f64));
            for conf in [ConfLoss::Bce, ConfLoss::Focal { gamma: 2.0, alpha: 0.25 }, ConfLoss::BceLabelSmooth { eps: 0.1 }] {
                for box_loss in BoxLoss::ALL {
                    let cfg = LossConfig { conf, box_loss, dual_target: false };
                    let (parts, _) = total_loss_arrays(std::slice::from_ref(&raw), &geoms, std::slice::from_ref(&map), &[], &cfg, false);
                    prop_assert!(parts.total >= 0.0 && parts.conf >= 0.0 && parts.box_term >= 0.0, "{:?}", parts);
                }
            }
        }
    }

    #[test]
    fn gated_fuse_is_nonnegative(seed in 0u64..1000) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = |shape: &[usize]| ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-2.0..2.0f64));
        let g = Graph::<f64>::inference();
        let level = g.constant(u(&[2, 3, 4, 4]));
        let gate = g.constant(u(&[2, 5]).mapv(|v: f64| v.max(0.0)));
        let w_v = g.constant(u(&[5, 3, 1, 1]));
        prop_assert!(gated_fuse(level, gate, w_v).value().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn lr_is_a_pure_function(epoch in 0usize..60, step in 0usize..50, warmup in 0usize..200, cosine in any::<bool>()) {
        let s = ScheduleConfig {
            kind: if cosine { ScheduleKind::Cosine } else { ScheduleKind::Step },
            warmup_steps: warmup,
            total_epochs: 60,
            step_epochs: vec![35, 37, 39],
            ..Default::default()
        };
        let a = lr_at(&s, epoch, step, 50);
        prop_assert_eq!(a.to_bits(), lr_at(&s, epoch, step, 50).to_bits());
        prop_assert!(a > 0.0 && a <= s.base_lr);
    }

    #[test]
    fn resize_and_flip_move_corners_analytically(b in boxes(), n in 1usize..5, m in 1usize..6) {
        let side = 160;
        let b = b.clamped(side as f64, side as f64);
        prop_assume!(b.is_valid() && b.w > 1.0 && b.h > 1.0);
        let sample = AugmentedSample::new(Image::from_elem((side, side, 3), 0.3), b, "the thing");
        let out = side * m / n.max(1);
        prop_assume!(out >= 8);
        if let Some(r) = resize_to_side(&sample, out) {
            let k = out as f64 / side as f64;
            for (u, v) in r.gt_box.corners().iter().zip(b.corners()) {
                prop_assert!((u - v * k).abs() < 1e-6);
            }
        }
        let f = horizontal_flip(&sample);
        let [x1, y1, x2, y2] = b.corners();
        let [fx1, fy1, fx2, fy2] = f.gt_box.corners();
        prop_assert!((fx1 - (side as f64 - x2)).abs() < 1e-6 && (fx2 - (side as f64 - x1)).abs() < 1e-6);
        prop_assert!((fy1 - y1).abs() < 1e-6 && (fy2 - y2).abs() < 1e-6);
    }
}

fn tiny_cfg(ema: bool) -> RunConfig {
    let mut c = RunConfig {
        data: DataConfig {
            synthetic: Some(SyntheticData { train: 4, val: 0, scene: SceneConfig { width: 64, height: 64, min_side: 16, max_side: 32, distractors: 0 }, seed: 5 }),
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
    c.ema = EmaConfig { enabled: ema, decay: 0.5, warmup: false };
    c
}

fn trajectory(ema: bool) -> (Vec<f64>, ParamStore<f32>, bool) {
    let cfg = tiny_cfg(ema);
    let data = TrainData::synthetic(cfg.data.synthetic.as_ref().unwrap(), Split::Train);
    let mut t = Trainer::<f32>::new(cfg, data).unwrap();
    let losses = (0..5).map(|_| t.step().unwrap().loss.total).collect();
    let has_shadow = t.state.ema.is_some();
    (losses, t.state.params.clone(), has_shadow)
}

#[test]
fn averaged_weights_never_reach_the_training_forward() {
    let (plain, p_plain, s_plain) = trajectory(false);
    let (avg, p_avg, s_avg) = trajectory(true);
    assert!(!s_plain && s_avg);
    assert_eq!(plain, avg);
    for ((_, a), (_, b)) in p_plain.iter().zip(p_avg.iter()) {
        assert_eq!(a.value, b.value);
    }
}
