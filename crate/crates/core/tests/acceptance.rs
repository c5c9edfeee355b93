//! Acceptance suite. Every test prints one `criterion N PASS|FAIL` line.

mod common;

use std::time::Instant;

use brnet::detector::{roi_align, Detector, ProposalMode};
use brnet::gradcheck::{check_gradients, check_param_gradients, max_rel_error, GradPair};
use brnet::harness::{cli_ablate, component_rows, train_on, METRICS_LOG};
use brnet::heads::{BilayerHeads, CoarseHead, HeadConfig, RecombineHead};
use brnet::losses::{cls_loss, cons_loss, dec_loss, mask_bce, reg_loss, rmask_loss};
use brnet::mask_algebra::{decompose_instances, soft_xor_merge, soft_xor_merge_var, BinaryMask, SoftMask};
use brnet::metrics::{evaluate, Detection, GroundTruth, ImageInfo, MiouMode};
use brnet::model::BrNet;
use brnet::params::{Checkpoint, Init, ParamStore, Session};
use brnet::tensor::Tensor;
use brnet::train::{checkpoint_path, evaluate_model, load_model, predict_scenes, synthesize, Trainer};
use brnet::uam::attention_maps;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn criterion_01_decomposition_matches_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    let mut partition_breaks = 0;
    for _ in 0..1000 {
        let k = rng.gen_range(2..=5);
        let masks = random_masks(&mut rng, 16, 16, k);
        let got = decompose_instances(&masks).unwrap();
        let want = decompose_oracle(&masks);
        for ((m, (o, n)), (wo, wn)) in masks.iter().zip(&got).zip(&want) {
            if to_bools(o) != *wo || to_bools(n) != *wn {
                mismatches += 1;
            }
            let rejoined = o.or(n).unwrap();
            if rejoined != *m || !o.and(n).unwrap().is_empty() {
                partition_breaks += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "mask decomposition oracle on 1000 scenes",
        mismatches == 0 && partition_breaks == 0 && secs < 10.0,
        &format!("{mismatches} mismatches, {partition_breaks} partition breaks, {secs:.2}s"),
    );
}

fn random_soft<R: Rng>(rng: &mut R, n: usize) -> SoftMask {
    SoftMask::from_values(n, n, (0..n * n).map(|_| rng.gen_range(0.0..=1.0)).collect()).unwrap()
}

fn random_binary<R: Rng>(rng: &mut R, n: usize) -> BinaryMask {
    BinaryMask::from_bits(n, n, (0..n * n).map(|_| rng.gen_range(0..2)).collect()).unwrap()
}

#[test]
fn criterion_02_soft_xor_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.gen_range(1..=8);
        let a = random_soft(&mut rng, n);
        let b = random_soft(&mut rng, n);
        let zero = SoftMask::filled(n, n, 0.0).unwrap();
        let bin = random_binary(&mut rng, n);
        let bin2 = random_binary(&mut rng, n);
        let diff = |x: &SoftMask, y: &[f64]| x.values().iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);

        worst = worst.max(diff(&soft_xor_merge(&a, &zero).unwrap(), a.values()));
        let same = soft_xor_merge(&bin.to_soft(), &bin.to_soft()).unwrap();
        worst = worst.max(diff(&same, &vec![0.0; n * n]));
        let ab = soft_xor_merge(&a, &b).unwrap();
        worst = worst.max(diff(&ab, soft_xor_merge(&b, &a).unwrap().values()));
        let hard = bin.xor(&bin2).unwrap().to_soft();
        worst = worst.max(diff(&soft_xor_merge(&bin.to_soft(), &bin2.to_soft()).unwrap(), hard.values()));
    }
    report(2, "soft XOR identities on 200 cases", worst <= 1e-12, &format!("max deviation {worst:e}"));
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

#[test]
fn criterion_03_gradient_checks() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-6;

    // attention module on a 4×8×8 input
    let uam_err = {
        let mut store = ParamStore::<f64>::new(4);
        let mut cfg = brnet::uam::UamConfig::new(4);
        cfg.reduction = 2;
        let p = brnet::uam::UamParams::new(&mut store, "uam", cfg).unwrap();
        *store.get_mut(p.fc2.w) = random_tensor(&mut rng, &[4, 2], -1.0, 1.0);
        let input = store.add("input", &[1, 4, 8, 8], Init::Zeros, true);
        *store.get_mut(input) = random_tensor(&mut rng, &[1, 4, 8, 8], -1.0, 1.0);
        let weights = random_tensor(&mut rng, &[1, 4, 8, 8], -1.0, 1.0);
        let mut ids = vec![input];
        ids.extend(p.param_ids().into_iter().filter(|&id| store.trainable(id)));
        let pairs = check_param_gradients(&mut store, &ids, h, usize::MAX, |s| {
            let x = s.p(input);
            let y = p.forward(s, x)?;
            let w = s.g.constant(weights.clone());
            let y = s.g.mul(y, w)?;
            Ok(s.g.sum(y))
        })
        .unwrap();
        max_rel_error(&pairs)
    };

    // RoIAlign over a two-level pyramid, one box per level
    let roi_err = {
        let mut store = ParamStore::<f64>::new(5);
        let p0 = store.add("p0", &[1, 4, 8, 8], Init::Zeros, true);
        let p1 = store.add("p1", &[1, 4, 4, 4], Init::Zeros, true);
        *store.get_mut(p0) = random_tensor(&mut rng, &[1, 4, 8, 8], -1.0, 1.0);
        *store.get_mut(p1) = random_tensor(&mut rng, &[1, 4, 4, 4], -1.0, 1.0);
        let rois = vec![(0, [10.3, 22.7, 51.9, 60.2]), (0, [3.5, 1.25, 124.0, 118.5])];
        let weights = random_tensor(&mut rng, &[2, 4, 14, 14], -1.0, 1.0);
        let pairs = check_param_gradients(&mut store, &[p0, p1], h, usize::MAX, |s| {
            let levels = [s.p(p0), s.p(p1)];
            let y = roi_align(s, &levels, &[16, 32], (128, 128), &rois, 2)?;
            let w = s.g.constant(weights.clone());
            let y = s.g.mul(y, w)?;
            Ok(s.g.sum(y))
        })
        .unwrap();
        max_rel_error(&pairs)
    };

    // soft XOR on 4×8×8 probabilities
    let xor_err = {
        let o = random_tensor(&mut rng, &[4, 8, 8], 0.0, 1.0);
        let n = random_tensor(&mut rng, &[4, 8, 8], 0.0, 1.0);
        let weights = random_tensor(&mut rng, &[4, 8, 8], -1.0, 1.0);
        let pairs = check_gradients(&[o, n], h, |g, v| {
            let m = soft_xor_merge_var(g, v[0], v[1])?;
            let w = g.constant(weights.clone());
            let y = g.mul(m, w)?;
            Ok(g.sum(y))
        });
        max_rel_error(&pairs)
    };

    // weighted total objective of a tiny model, consistency target attached
    let total_err = {
        let cfg = tiny_config();
        let (model_cfg, weights) = cfg.effective().unwrap();
        let mut store = ParamStore::<f64>::new(6);
        let model = BrNet::new(&mut store, model_cfg).unwrap();
        let mut data = cfg.data.clone();
        data.train_scenes = 2;
        data.test_scenes = 0;
        let (scenes, _) = synthesize(&data, 1).unwrap();
        let refs: Vec<_> = scenes.iter().collect();
        let ids: Vec<_> = store.ids().filter(|&id| store.trainable(id)).collect();
        // zero biases put many ReLUs exactly on their kink; move to a generic point
        for &id in &ids {
            for v in store.get_mut(id).data_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
        let pairs = check_param_gradients(&mut store, &ids, h, 2, |s| {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            Ok(model.train_forward(s, &refs, ProposalMode::GroundTruth, &weights, false, &mut r)?.total)
        })
        .unwrap();
        // one vector over every probe: per-parameter ratios of near-zero
        // gradients (biases ahead of a norm) only measure round-off
        let joined = GradPair {
            analytic: pairs.iter().flat_map(|p| p.analytic.clone()).collect(),
            numeric: pairs.iter().flat_map(|p| p.numeric.clone()).collect(),
        };
        joined.rel_error()
    };

    let secs = start.elapsed().as_secs_f64();
    let worst = uam_err.max(roi_err).max(xor_err).max(total_err);
    report(
        3,
        "finite-difference gradient checks",
        worst < 1e-4 && secs < 120.0,
        &format!("uam {uam_err:.1e}, roi_align {roi_err:.1e}, soft_xor {xor_err:.1e}, total {total_err:.1e}, {secs:.1}s"),
    );
}

#[test]
fn criterion_04_loss_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut track = |a: f64, b: f64| worst = worst.max((a - b).abs());
    for _ in 0..200 {
        let rows = rng.gen_range(1..=6);
        let logits: Vec<[f64; 2]> = (0..rows).map(|_| [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)]).collect();
        let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..2)).collect();
        track(cls_loss(&logits, &labels).unwrap(), ce_loop(&logits, &labels));

        let pred: Vec<[f64; 4]> = (0..rows).map(|_| std::array::from_fn(|_| rng.gen_range(-3.0..3.0))).collect();
        let target: Vec<[f64; 4]> = (0..rows).map(|_| std::array::from_fn(|_| rng.gen_range(-3.0..3.0))).collect();
        track(reg_loss(&pred, &target).unwrap(), smooth_l1_loop(&pred, &target));

        let side = rng.gen_range(2..=6);
        let p = random_soft(&mut rng, side);
        let t = random_binary(&mut rng, side);
        track(mask_bce(&p, &t).unwrap(), bce_loop(p.values(), t.to_soft().values()));

        // unequal instance counts, sometimes an image without instances
        let images = rng.gen_range(1..=3);
        let counts: Vec<usize> = (0..images).map(|_| rng.gen_range(0..=4)).collect();
        let mut counts = counts;
        if counts.iter().all(|&c| c == 0) {
            counts[0] = 1;
        }
        let side = rng.gen_range(2..=5);
        let parts: Vec<Vec<(SoftMask, SoftMask)>> = counts
            .iter()
            .map(|&a| (0..a).map(|_| (random_soft(&mut rng, side), random_soft(&mut rng, side))).collect())
            .collect();
        let part_t: Vec<Vec<(BinaryMask, BinaryMask)>> = counts
            .iter()
            .map(|&a| (0..a).map(|_| (random_binary(&mut rng, side), random_binary(&mut rng, side))).collect())
            .collect();
        let refined: Vec<Vec<SoftMask>> =
            counts.iter().map(|&a| (0..a).map(|_| random_soft(&mut rng, side)).collect()).collect();
        let amodal: Vec<Vec<BinaryMask>> =
            counts.iter().map(|&a| (0..a).map(|_| random_binary(&mut rng, side)).collect()).collect();
        let soft = |m: &BinaryMask| m.to_soft().values().to_vec();

        let want_dec = nested_loop(&counts, |k, i| {
            let (o, n) = &parts[k][i];
            let (to, tn) = &part_t[k][i];
            bce_loop(o.values(), &soft(to)) + bce_loop(n.values(), &soft(tn))
        });
        track(dec_loss(&parts, &part_t).unwrap(), want_dec);

        let want_r = nested_loop(&counts, |k, i| bce_loop(refined[k][i].values(), &soft(&amodal[k][i])));
        track(rmask_loss(&refined, &amodal).unwrap(), want_r);

        let want_c = nested_loop(&counts, |k, i| {
            let (o, n) = &parts[k][i];
            let merged: Vec<f64> = o.values().iter().zip(n.values()).map(|(a, b)| a + b - 2.0 * a * b).collect();
            bce_loop(refined[k][i].values(), &merged)
        });
        track(cons_loss(&refined, &parts).unwrap(), want_c);
    }
    report(4, "loss formulas against scalar loops on 200 batches", worst <= 1e-12, &format!("max deviation {worst:e}"));
}

#[test]
fn criterion_05_head_shapes() {
    let cfg = HeadConfig::default();
    let mut store = ParamStore::<f32>::new(7);
    let coarse = CoarseHead::new(&mut store, 256, &cfg);
    let bilayer = BilayerHeads::new(&mut store, 256, &cfg);
    let recombine = RecombineHead::new(&mut store, 256, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = Session::new(&store, false);
    let f_roi = s.g.constant(Tensor::from_fn(&[2, 256, 14, 14], |_| rng.gen_range(-1.0f32..1.0)));
    let cm = coarse.coarse_mask(&mut s, f_roi).unwrap();
    let (o, n) = bilayer.forward(&mut s, f_roi, cm.inner).unwrap();
    let (o, n) = (o.unwrap(), n.unwrap());
    let r = recombine.forward(&mut s, f_roi, o.upsampled, n.upsampled).unwrap();
    let mut bad = Vec::new();
    for (name, head) in [("coarse", cm), ("overlap", o), ("nonoverlap", n), ("recombined", r)] {
        if s.g.shape(head.inner) != [2, 256, 14, 14] || s.g.shape(head.probs) != [2, 1, 28, 28] {
            bad.push(name);
        }
    }
    report(
        5,
        "mask heads give 14x14x256 features and 28x28x1 masks",
        bad.is_empty(),
        &format!("4 heads checked, mismatched: {bad:?}"),
    );
}

fn rect(y0: usize, x0: usize, h: usize, w: usize) -> BinaryMask {
    BinaryMask::from_fn(16, 16, |y, x| y >= y0 && y < y0 + h && x >= x0 && x < x0 + w).unwrap()
}

fn det(score: f64, mask: BinaryMask, image_id: usize) -> Detection {
    Detection { score, mask, image_id }
}

fn gt(mask: BinaryMask, image_id: usize) -> GroundTruth {
    GroundTruth { mask, image_id }
}

fn images3() -> Vec<ImageInfo> {
    (0..3).map(|image_id| ImageInfo { image_id, height: 16, width: 16 }).collect()
}

fn oracle_images() -> Vec<(usize, usize, usize)> {
    (0..3).map(|i| (i, 16, 16)).collect()
}

/// Jittered copies of the truth plus stray blobs, with random scores.
fn random_benchmark(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GroundTruth>) {
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for img in 0..3 {
        let count = rng.gen_range(1..=3);
        for m in random_masks(rng, 16, 16, count) {
            let (dy, dx): (i32, i32) = (rng.gen_range(-2..=2), rng.gen_range(-2..=2));
            let shifted = BinaryMask::from_fn(16, 16, |y, x| {
                let (sy, sx) = (y as i32 - dy, x as i32 - dx);
                (0..16).contains(&sy) && (0..16).contains(&sx) && m.get(sy as usize, sx as usize)
            })
            .unwrap();
            if rng.gen_bool(0.8) {
                dets.push(det(rng.gen_range(0.0..=1.0), shifted, img));
            }
            gts.push(gt(m, img));
        }
        let count = rng.gen_range(0..=2);
        for m in random_masks(rng, 16, 16, count) {
            dets.push(det(rng.gen_range(0.0..=1.0), m, img));
        }
    }
    (dets, gts)
}

#[test]
fn criterion_06_metric_oracles() {
    // Hand-built benchmark. Image 0: exact hit and a 0.75-IoU hit. Image 1:
    // a half-IoU hit ranked above an exact duplicate. Image 2: a stray
    // detection and a missed instance.
    let gts = vec![
        gt(rect(0, 0, 8, 8), 0),
        gt(rect(8, 8, 8, 8), 0),
        gt(rect(0, 0, 8, 16), 1),
        gt(rect(4, 4, 4, 4), 2),
    ];
    let dets = vec![
        det(0.9, rect(0, 0, 8, 8), 0),
        det(0.6, rect(8, 10, 8, 6), 0),
        det(0.8, rect(0, 0, 8, 8), 1),
        det(0.3, rect(0, 0, 8, 16), 1),
        det(0.7, rect(10, 10, 4, 4), 2),
    ];
    let r = evaluate(&dets, &gts, &images3(), MiouMode::Semantic).unwrap();
    let (ap, ap50, ap75) = coco_ap_oracle(&dets, &gts);
    let miou = miou_oracle(&dets, &gts, &oracle_images(), 0.5);
    let hand = [(r.ap50, 0.6875), (r.ap75, 0.55), (r.ap, 0.48375), (r.miou, (480.0 / 592.0 + 176.0 / 288.0) / 2.0)];
    let mut worst: f64 = hand.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    for (a, b) in [(r.ap, ap), (r.ap50, ap50), (r.ap75, ap75), (r.miou, miou)] {
        worst = worst.max((a - b).abs());
    }

    // randomised three-image benchmarks against the oracle
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut order_violations = 0;
    for _ in 0..100 {
        let (dets, gts) = random_benchmark(&mut rng);
        let r = evaluate(&dets, &gts, &images3(), MiouMode::Semantic).unwrap();
        let (ap, ap50, ap75) = coco_ap_oracle(&dets, &gts);
        let miou = miou_oracle(&dets, &gts, &oracle_images(), 0.5);
        for (a, b) in [(r.ap, ap), (r.ap50, ap50), (r.ap75, ap75), (r.miou, miou)] {
            worst = worst.max((a - b).abs());
        }
        if r.ap50 < r.ap75 {
            order_violations += 1;
        }
    }

    let perfect: Vec<Detection> = gts.iter().map(|g| det(1.0, g.mask.clone(), g.image_id)).collect();
    let p = evaluate(&perfect, &gts, &images3(), MiouMode::Semantic).unwrap();
    let perfect_ok = [p.ap, p.ap50, p.ap75, p.miou].iter().all(|&v| v == 1.0);

    report(
        6,
        "metrics against an independent matcher and integrator",
        worst <= 1e-12 && order_violations == 0 && perfect_ok,
        &format!("max deviation {worst:e}, AP50<AP75 in {order_violations}/100, perfect={perfect_ok}"),
    );
}

#[test]
fn criterion_07_uam_complementarity() {
    let cfg = tiny_config();
    let mut store = ParamStore::<f64>::new(8);
    let detector = Detector::new(&mut store, cfg.model.detector.clone()).unwrap();
    let c = cfg.model.detector.fpn_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (h, w) = cfg.data.scene.image_size;
    let mut failures = Vec::new();
    for (level, block) in detector.uam_blocks().iter().enumerate() {
        let stride = brnet::detector::LEVEL_STRIDES[level];
        let shape = [2, c, h / stride, w / stride];
        for scale in [1.0, 50.0] {
            let x = random_tensor(&mut rng, &shape, -scale, scale);
            let maps = attention_maps(&store, block, &x).unwrap();
            let y = brnet::uam::uam_forward(&store, block, &x).unwrap();
            let sums_exact = maps.phi.data().iter().zip(maps.phi_prime.data()).all(|(a, b)| a + b == 1.0)
                && maps.psi.data().iter().zip(maps.psi_prime.data()).all(|(a, b)| a + b == 1.0);
            let in_range = [&maps.phi, &maps.phi_prime, &maps.psi, &maps.psi_prime]
                .iter()
                .all(|t| t.data().iter().all(|v| (0.0..=1.0).contains(v)));
            if !sums_exact || !in_range || y.shape() != shape {
                failures.push(level);
            }
        }
    }
    report(
        7,
        "attention gates complementary, bounded and shape preserving",
        failures.is_empty() && detector.uam_blocks().len() == 4,
        &format!("{} pyramid levels, failing levels {failures:?}", detector.uam_blocks().len()),
    );
}

/// Desk-scale smoke configuration, pinned after the first full run.
fn smoke_config() -> brnet::train::TrainConfig {
    let mut cfg = brnet::train::TrainConfig::default();
    cfg.proposal_mode = ProposalMode::GroundTruth;
    cfg.model.heads.channels = 32;
    cfg.model.heads.det_hidden = 64;
    cfg.model.detector.rpn.channels = 32;
    // narrower pyramid keeps the attention convolutions affordable on one core
    cfg.model.detector.fpn_channels = 64;
    cfg.model.detector.uam_mid_channels = 16;
    cfg.train.batch_size = 8;
    cfg.data.train_scenes = 8;
    cfg.data.test_scenes = 0;
    cfg
}

#[test]
fn criterion_08_smoke_training() {
    let cfg = smoke_config();
    let (scenes, _) = synthesize(&cfg.data, 1).unwrap();
    let start = Instant::now();
    let mut trainer = Trainer::<f32>::new(cfg.clone()).unwrap();
    let history = trainer.fit(&scenes, &mut std::io::sink(), None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let initial = history[0].losses.total;
    let last = history.last().unwrap().losses.total;
    let r = evaluate_model(&trainer.model, &trainer.store, &scenes, ProposalMode::GroundTruth, MiouMode::Semantic)
        .unwrap();
    let ratio = last / initial;
    report(
        8,
        "smoke training on 8 scenes for 200 steps",
        history.len() == 200 && ratio < 0.10 && r.ap50 >= 0.90,
        &format!("loss {initial:.4} -> {last:.4} ({:.1}%), train AP50 {:.3}, {secs:.0}s", 100.0 * ratio, r.ap50),
    );
}

#[test]
fn criterion_09_ablation_structure() {
    let cfg = tiny_config();
    let a = cli_ablate(&cfg, None, None).unwrap();
    let b = cli_ablate(&cfg, None, None).unwrap();
    let marks: Vec<[bool; 5]> = a.components.iter().map(|r| r.toggles.marks()).collect();
    let expected: Vec<[bool; 5]> = component_rows().iter().map(|t| t.marks()).collect();
    let labels: Vec<&str> = a.modules.iter().map(|r| r.label.as_str()).collect();
    let populated = a.components.iter().chain(&a.modules).all(|r| {
        let m = &r.metrics;
        [m.ap, m.ap50, m.ap75, m.miou].iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
            && m.num_images == cfg.data.test_scenes
    });
    let deterministic = a == b && a.to_tsv() == b.to_tsv();
    report(
        9,
        "ablation tables have 5 and 3 populated, reproducible rows",
        marks == expected && labels == ["CMSM", "CMSM+BSM", "CMSM+BSM+SCRM"] && populated && deterministic,
        &format!("{} component rows, {} module rows, deterministic={deterministic}", marks.len(), labels.len()),
    );
}

#[test]
fn criterion_10_determinism_and_persistence() {
    let mut cfg = tiny_config();
    cfg.train.checkpoint_every = 2;
    let (scenes, _) = synthesize(&cfg.data, 2).unwrap();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    train_on(&cfg, &scenes, dir_a.path()).unwrap();
    train_on(&cfg, &scenes, dir_b.path()).unwrap();
    let read = |d: &std::path::Path, f: &str| std::fs::read(d.join(f)).unwrap();
    let same_ckpt = read(dir_a.path(), "checkpoint.bin") == read(dir_b.path(), "checkpoint.bin");
    let same_mid = read(dir_a.path(), "checkpoint_2.bin") == read(dir_b.path(), "checkpoint_2.bin");
    let same_log = read(dir_a.path(), METRICS_LOG) == read(dir_b.path(), METRICS_LOG);

    let path = checkpoint_path(dir_a.path());
    let bytes = std::fs::read(&path).unwrap();
    let ckpt = Checkpoint::<f32>::load(&path).unwrap();
    let byte_round_trip = ckpt.to_bytes() == bytes;
    let loaded = load_model(&ckpt).unwrap();
    let values_round_trip = loaded.store.ids().all(|id| {
        let name = loaded.store.name(id);
        ckpt.params.find(name).is_some_and(|src| ckpt.params.get(src).data() == loaded.store.get(id).data())
    });
    let mut fresh = Trainer::<f32>::new(cfg.clone()).unwrap();
    fresh.fit(&scenes, &mut std::io::sink(), None).unwrap();
    let from_disk = predict_scenes(&loaded.model, &loaded.store, &scenes, ProposalMode::GroundTruth, 1).unwrap();
    let in_memory = predict_scenes(&fresh.model, &fresh.store, &scenes, ProposalMode::GroundTruth, 1).unwrap();
    let same_predictions = from_disk.len() == in_memory.len()
        && from_disk.iter().zip(&in_memory).all(|(a, b)| {
            a.len() == b.len() && a.iter().zip(b).all(|(p, q)| p.score == q.score && p.mask == q.mask && p.coarse == q.coarse)
        });
    report(
        10,
        "byte-identical reruns and exact checkpoint round trip",
        same_ckpt && same_mid && same_log && byte_round_trip && values_round_trip && same_predictions,
        &format!(
            "checkpoint {same_ckpt}, cadence {same_mid}, log {same_log}, bytes {byte_round_trip}, values {values_round_trip}, predictions {same_predictions}"
        ),
    );
}
