//! Reference implementations written with plain loops, sharing no code with
//! the library beyond its data types.

#![allow(dead_code)]

use brnet::mask_algebra::BinaryMask;
use brnet::metrics::{Detection, GroundTruth};
use rand::Rng;

pub const EPS: f64 = 1e-7;

/// Random blob scene: each instance is a union of one to three rectangles.
pub fn random_masks<R: Rng>(rng: &mut R, h: usize, w: usize, count: usize) -> Vec<BinaryMask> {
    (0..count)
        .map(|_| {
            let mut bits = vec![0u8; h * w];
            for _ in 0..rng.gen_range(1..=3) {
                let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
                let (y1, x1) = (rng.gen_range(y0..h) + 1, rng.gen_range(x0..w) + 1);
                for y in y0..y1 {
                    for x in x0..x1 {
                        bits[y * w + x] = 1;
                    }
                }
            }
            BinaryMask::from_bits(h, w, bits).unwrap()
        })
        .collect()
}

/// Per-pixel coverage count decides overlap (≥ 2) and non-overlap (= 1).
pub fn decompose_oracle(masks: &[BinaryMask]) -> Vec<(Vec<bool>, Vec<bool>)> {
    let (h, w) = masks[0].dims();
    let mut cover = vec![0usize; h * w];
    for m in masks {
        for y in 0..h {
            for x in 0..w {
                if m.get(y, x) {
                    cover[y * w + x] += 1;
                }
            }
        }
    }
    masks
        .iter()
        .map(|m| {
            let mut o = vec![false; h * w];
            let mut n = vec![false; h * w];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    if m.get(y, x) {
                        o[i] = cover[i] >= 2;
                        n[i] = cover[i] == 1;
                    }
                }
            }
            (o, n)
        })
        .collect()
}

pub fn to_bools(m: &BinaryMask) -> Vec<bool> {
    let (h, w) = m.dims();
    (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| m.get(y, x)).collect()
}

pub fn bce_pixel(p: f64, y: f64) -> f64 {
    let p = p.clamp(EPS, 1.0 - EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

pub fn bce_loop(pred: &[f64], target: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.len() {
        s += bce_pixel(pred[i], target[i]);
    }
    s / pred.len() as f64
}

/// `1/K Σ_k 1/A_k Σ_i term(k, i)` over images that have instances.
pub fn nested_loop(counts: &[usize], term: impl Fn(usize, usize) -> f64) -> f64 {
    let k = counts.iter().filter(|&&a| a > 0).count();
    if k == 0 {
        return 0.0;
    }
    let mut outer = 0.0;
    for (img, &a) in counts.iter().enumerate() {
        if a == 0 {
            continue;
        }
        let mut inner = 0.0;
        for i in 0..a {
            inner += term(img, i);
        }
        outer += inner / a as f64;
    }
    outer / k as f64
}

pub fn ce_loop(logits: &[[f64; 2]], labels: &[usize]) -> f64 {
    let mut s = 0.0;
    for (l, &y) in logits.iter().zip(labels) {
        let m = l[0].max(l[1]);
        let lse = m + ((l[0] - m).exp() + (l[1] - m).exp()).ln();
        s += lse - l[y];
    }
    s / logits.len() as f64
}

pub fn smooth_l1_loop(pred: &[[f64; 4]], target: &[[f64; 4]]) -> f64 {
    let mut s = 0.0;
    for (p, t) in pred.iter().zip(target) {
        for j in 0..4 {
            let x = (p[j] - t[j]).abs();
            s += if x < 1.0 { 0.5 * x * x } else { x - 0.5 };
        }
    }
    s / pred.len() as f64
}

fn iou_loop(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (h, w) = a.dims();
    let (mut i, mut u) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            let (p, q) = (a.get(y, x), b.get(y, x));
            i += (p && q) as usize;
            u += (p || q) as usize;
        }
    }
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

/// Greedy matcher plus all-point integrator. Precision envelope is taken
/// per true positive rather than over a padded curve.
pub fn ap_oracle(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(dets[a].image_id.cmp(&dets[b].image_id))
            .then(dets[a].mask.bits().cmp(dets[b].mask.bits()))
            .then(a.cmp(&b))
    });
    let mut used = vec![false; gts.len()];
    let mut hits = Vec::new();
    for &d in &order {
        let mut best = -1.0;
        let mut best_g = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.image_id != dets[d].image_id {
                continue;
            }
            let v = iou_loop(&dets[d].mask, &gt.mask);
            if v > best {
                best = v;
                best_g = Some(g);
            }
        }
        let hit = match best_g {
            Some(g) if best >= thr && best > 0.0 => {
                used[g] = true;
                true
            }
            _ => false,
        };
        hits.push(hit);
    }
    let mut precision = Vec::new();
    let mut tp = 0;
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (k + 1) as f64);
    }
    let mut ap = 0.0;
    for k in 0..hits.len() {
        if hits[k] {
            let env = precision[k..].iter().cloned().fold(0.0, f64::max);
            ap += env / gts.len() as f64;
        }
    }
    ap
}

pub fn coco_ap_oracle(dets: &[Detection], gts: &[GroundTruth]) -> (f64, f64, f64) {
    let per: Vec<f64> = (0..10).map(|k| ap_oracle(dets, gts, (50 + 5 * k) as f64 / 100.0)).collect();
    (per.iter().sum::<f64>() / 10.0, per[0], per[5])
}

/// Semantic two-class IoU pooled over images `(id, h, w)`.
pub fn miou_oracle(dets: &[Detection], gts: &[GroundTruth], images: &[(usize, usize, usize)], min_score: f64) -> f64 {
    let mut inter = [0usize; 2];
    let mut uni = [0usize; 2];
    for &(id, h, w) in images {
        for y in 0..h {
            for x in 0..w {
                let p = dets.iter().any(|d| d.image_id == id && d.score >= min_score && d.mask.get(y, x));
                let t = gts.iter().any(|g| g.image_id == id && g.mask.get(y, x));
                inter[1] += (p && t) as usize;
                uni[1] += (p || t) as usize;
                inter[0] += (!p && !t) as usize;
                uni[0] += (!p || !t) as usize;
            }
        }
    }
    let f = |c: usize| if uni[c] == 0 { 0.0 } else { inter[c] as f64 / uni[c] as f64 };
    (f(0) + f(1)) / 2.0
}

/// A model small enough to train for a few steps in a test.
pub fn tiny_config() -> brnet::train::TrainConfig {
    let mut cfg = brnet::train::TrainConfig::default();
    cfg.seed = 11;
    cfg.proposal_mode = brnet::detector::ProposalMode::GroundTruth;
    let d = &mut cfg.model.detector;
    d.backbone_channels = vec![4, 8, 8, 8];
    d.norm_groups = 4;
    d.fpn_channels = 8;
    d.uam_mid_channels = 8;
    d.rpn.channels = 8;
    let h = &mut cfg.model.heads;
    h.channels = 8;
    h.det_hidden = 16;
    h.norm_groups = 4;
    cfg.data.scene.image_size = (64, 64);
    cfg.data.scene.seed = 5;
    cfg.data.train_scenes = 4;
    cfg.data.test_scenes = 2;
    cfg.train.total_iters = 4;
    cfg.train.warmup_iters = 2;
    cfg
}

/// Writes a result line straight to stderr so it shows without
/// `--nocapture`, then fails the test on a miss.
pub fn report(id: u32, name: &str, pass: bool, detail: &str) {
    use std::io::Write;
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr().lock(), "criterion {id:>2} {verdict}: {name} ({detail})");
    assert!(pass, "criterion {id} failed: {name} ({detail})");
}
