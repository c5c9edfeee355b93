//! Two-stage scaffold: residual backbone, feature pyramid with attention on
//! each lateral, anchor-based proposals and RoIAlign.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{self, Bbox};
use crate::error::{Error, Result};
use crate::graph::{ResampleItem, Var};
use crate::mask_algebra::BinaryMask;
use crate::nn::{Conv2d, ConvNormRelu};
use crate::params::{Init, ParamStore, Session};
use crate::synth::GrayImage;
use crate::tensor::{Float, Tensor};
use crate::uam::{UamConfig, UamParams};

/// Side of the RoI feature grid.
pub const ROI_SIZE: usize = 14;
/// Side of the predicted mask grid.
pub const MASK_SIZE: usize = 28;
/// Strides of the pyramid levels P2..P5.
pub const LEVEL_STRIDES: [usize; 4] = [4, 8, 16, 32];
/// Input sides must be multiples of this.
pub const TOTAL_STRIDE: usize = 32;

/// Box coding weights of the detection branch.
pub const HEAD_BOX_WEIGHTS: [f64; 4] = [10.0, 10.0, 5.0, 5.0];
/// Box coding weights of the proposal network.
pub const RPN_BOX_WEIGHTS: [f64; 4] = [1.0, 1.0, 1.0, 1.0];

/// Where proposals come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProposalMode {
    #[serde(rename = "rpn")]
    Rpn,
    #[serde(rename = "gt", alias = "ground_truth")]
    GroundTruth,
}

impl FromStr for ProposalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rpn" => Ok(ProposalMode::Rpn),
            "gt" | "ground_truth" => Ok(ProposalMode::GroundTruth),
            other => Err(Error::invalid(format!("unknown proposal mode {other:?} (expected rpn or gt)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalSource {
    Rpn,
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: Bbox,
    pub score: f64,
    pub source: ProposalSource,
}

impl Proposal {
    pub fn new(bbox: Bbox, score: f64, source: ProposalSource) -> Result<Self> {
        if !boxes::is_valid(&bbox) {
            return Err(Error::invalid(format!("degenerate box {bbox:?}")));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid(format!("proposal score {score} outside [0, 1]")));
        }
        Ok(Proposal { bbox, score, source })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RpnConfig {
    pub channels: usize,
    /// Base anchor side per pyramid level.
    pub anchor_sizes: Vec<f64>,
    pub anchor_scales: Vec<f64>,
    /// Height-to-width ratios.
    pub anchor_ratios: Vec<f64>,
    pub nms_iou: f64,
    pub pre_nms_top_n: usize,
    pub post_nms_top_n: usize,
    pub fg_iou: f64,
    pub bg_iou: f64,
    pub batch_per_image: usize,
    pub positive_fraction: f64,
    pub min_size: f64,
}

impl Default for RpnConfig {
    fn default() -> Self {
        RpnConfig {
            channels: 256,
            anchor_sizes: vec![32.0, 64.0, 128.0, 256.0],
            anchor_scales: vec![1.0, 2f64.powf(1.0 / 3.0), 2f64.powf(2.0 / 3.0)],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            nms_iou: 0.7,
            pre_nms_top_n: 500,
            post_nms_top_n: 64,
            fg_iou: 0.7,
            bg_iou: 0.3,
            batch_per_image: 128,
            positive_fraction: 0.5,
            min_size: 1.0,
        }
    }
}

impl RpnConfig {
    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Widths of the four residual stages.
    pub backbone_channels: Vec<usize>,
    /// Group-norm groups after every backbone convolution and pyramid
    /// lateral; 0 disables.
    pub norm_groups: usize,
    /// Width of the pyramid laterals and therefore of every RoI feature.
    pub fpn_channels: usize,
    pub uam: bool,
    pub uam_mid_channels: usize,
    pub uam_reduction: usize,
    pub rpn: RpnConfig,
    /// Bilinear samples per RoI bin along each axis.
    pub sampling_ratio: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            backbone_channels: vec![16, 32, 64, 128],
            norm_groups: 32,
            fpn_channels: 256,
            uam: true,
            uam_mid_channels: 256,
            uam_reduction: 4,
            rpn: RpnConfig::default(),
            sampling_ratio: 2,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone_channels.len() != LEVEL_STRIDES.len() || self.backbone_channels.contains(&0) {
            return Err(Error::Config("backbone_channels needs four positive widths".into()));
        }
        if self.fpn_channels == 0 || self.sampling_ratio == 0 {
            return Err(Error::Config("fpn_channels and sampling_ratio must be positive".into()));
        }
        let r = &self.rpn;
        if r.anchor_sizes.len() != LEVEL_STRIDES.len() || r.anchor_scales.is_empty() || r.anchor_ratios.is_empty() {
            return Err(Error::Config("rpn needs four anchor sizes and at least one scale and ratio".into()));
        }
        if r.channels == 0 || r.post_nms_top_n == 0 || r.batch_per_image == 0 {
            return Err(Error::Config("rpn sizes must be positive".into()));
        }
        if !(r.bg_iou <= r.fg_iou && (0.0..=1.0).contains(&r.positive_fraction)) {
            return Err(Error::Config("rpn thresholds out of order".into()));
        }
        if self.uam {
            self.uam_config().validate()?;
        }
        Ok(())
    }

    pub fn uam_config(&self) -> UamConfig {
        let mut c = UamConfig::new(self.fpn_channels);
        c.mid_channels = self.uam_mid_channels;
        c.reduction = self.uam_reduction;
        c
    }

    /// Number of attention blocks in the pyramid (one per lateral).
    pub fn uam_sites(&self) -> usize {
        if self.uam {
            LEVEL_STRIDES.len()
        } else {
            0
        }
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: ConvNormRelu,
    conv2: ConvNormRelu,
    shortcut: ConvNormRelu,
}

impl ResBlock {
    fn new<T: Float>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, groups: usize) -> Self {
        let unit = |store: &mut ParamStore<T>, part: &str, ci: usize, k: usize, stride: usize, init: Option<Init>| {
            let n = format!("{name}.{part}");
            let conv = Conv2d::new(store, &n, ci, cout, k, 1, stride, init);
            ConvNormRelu::new(store, &n, conv, cout, groups)
        };
        ResBlock {
            conv1: unit(store, "conv1", cin, 3, 2, None),
            conv2: unit(store, "conv2", cout, 3, 1, Some(Init::He(2 * 9 * cout))),
            shortcut: unit(store, "shortcut", cin, 1, 2, Some(Init::He(2 * cin))),
        }
    }

    fn forward<T: Float>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(s, x)?;
        let y = self.conv2.forward_linear(s, y)?;
        let short = self.shortcut.forward_linear(s, x)?;
        let sum = s.g.add(y, short)?;
        Ok(s.g.relu(sum))
    }
}

/// Per-level raw outputs of the proposal network.
#[derive(Clone, Copy, Debug)]
pub struct RpnLevel {
    /// `(N, A, H, W)` objectness logits.
    pub objectness: Var,
    /// `(N, 4A, H, W)` box deltas.
    pub deltas: Var,
}

/// Backbone, pyramid and proposal network parameters.
#[derive(Clone, Debug)]
pub struct Detector {
    pub config: DetectorConfig,
    stem: ConvNormRelu,
    blocks: Vec<ResBlock>,
    laterals: Vec<ConvNormRelu>,
    uams: Vec<UamParams>,
    rpn_conv: Conv2d,
    rpn_obj: Conv2d,
    rpn_delta: Conv2d,
}

impl Detector {
    pub fn new<T: Float>(store: &mut ParamStore<T>, config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let widths = config.backbone_channels.clone();
        let groups = config.norm_groups;
        let stem_conv = Conv2d::new(store, "backbone.stem", 1, widths[0], 3, 1, 2, None);
        let stem = ConvNormRelu::new(store, "backbone.stem", stem_conv, widths[0], groups);
        let mut blocks = Vec::new();
        let mut cin = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            blocks.push(ResBlock::new(store, &format!("backbone.stage{}", i + 2), cin, w, groups));
            cin = w;
        }
        let f = config.fpn_channels;
        let laterals = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let n = format!("fpn.lateral{}", i + 2);
                let conv = Conv2d::new(store, &n, w, f, 1, 1, 1, None);
                ConvNormRelu::new(store, &n, conv, f, groups)
            })
            .collect();
        let mut uams = Vec::new();
        if config.uam {
            for i in 0..LEVEL_STRIDES.len() {
                uams.push(UamParams::new(store, &format!("fpn.uam{}", i + 2), config.uam_config())?);
            }
        }
        let a = config.rpn.anchors_per_cell();
        let rc = config.rpn.channels;
        let rpn_conv = Conv2d::new(store, "rpn.conv", f, rc, 3, 1, 1, None);
        let rpn_obj = Conv2d::new(store, "rpn.objectness", rc, a, 1, 1, 1, Some(Init::Normal(0.01)));
        let rpn_delta = Conv2d::new(store, "rpn.deltas", rc, 4 * a, 1, 1, 1, Some(Init::Normal(0.01)));
        Ok(Detector {
            config,
            stem,
            blocks,
            laterals,
            uams,
            rpn_conv,
            rpn_obj,
            rpn_delta,
        })
    }

    pub fn uam_blocks(&self) -> &[UamParams] {
        &self.uams
    }

    /// Pyramid levels P2..P5 for an `(N, 1, H, W)` normalised image batch.
    pub fn features<T: Float>(&self, s: &mut Session<T>, images: Var) -> Result<Vec<Var>> {
        let shape = s.g.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::invalid(format!("expected (N, 1, H, W) images, got {shape:?}")));
        }
        check_divisible(shape[2], shape[3])?;
        let mut x = self.stem.forward(s, images)?;
        let mut stages = Vec::new();
        for b in &self.blocks {
            x = b.forward(s, x)?;
            stages.push(x);
        }
        let mut lateral = Vec::new();
        for (i, &c) in stages.iter().enumerate() {
            let mut l = self.laterals[i].forward_linear(s, c)?;
            if let Some(u) = self.uams.get(i) {
                l = u.forward(s, l)?;
            }
            lateral.push(l);
        }
        let mut levels = vec![lateral[3]];
        for i in (0..3).rev() {
            let up = s.g.upsample2x(levels[0])?;
            let p = s.g.add(lateral[i], up)?;
            levels.insert(0, p);
        }
        Ok(levels)
    }

    pub fn rpn_forward<T: Float>(&self, s: &mut Session<T>, levels: &[Var]) -> Result<Vec<RpnLevel>> {
        levels
            .iter()
            .map(|&p| {
                let t = self.rpn_conv.forward_relu(s, p)?;
                Ok(RpnLevel {
                    objectness: self.rpn_obj.forward(s, t)?,
                    deltas: self.rpn_delta.forward(s, t)?,
                })
            })
            .collect()
    }

    /// Anchors of one level ordered `(anchor, y, x)` to match the
    /// objectness layout.
    pub fn anchors(&self, level: usize, h: usize, w: usize) -> Vec<Bbox> {
        let cfg = &self.config.rpn;
        let stride = LEVEL_STRIDES[level] as f64;
        let base = cfg.anchor_sizes[level];
        let mut out = Vec::with_capacity(cfg.anchors_per_cell() * h * w);
        for &scale in &cfg.anchor_scales {
            for &ratio in &cfg.anchor_ratios {
                let size = base * scale;
                let aw = size / ratio.sqrt();
                let ah = size * ratio.sqrt();
                for y in 0..h {
                    for x in 0..w {
                        let (cx, cy) = ((x as f64 + 0.5) * stride, (y as f64 + 0.5) * stride);
                        out.push([cx - aw / 2.0, cy - ah / 2.0, cx + aw / 2.0, cy + ah / 2.0]);
                    }
                }
            }
        }
        out
    }

    /// Proposals per image. Ground-truth mode passes the boxes through with
    /// score 1.
    pub fn propose<T: Float>(
        &self,
        s: &Session<T>,
        rpn: &[RpnLevel],
        image_size: (usize, usize),
        mode: ProposalMode,
        gt_boxes: Option<&[Vec<Bbox>]>,
    ) -> Result<Vec<Vec<Proposal>>> {
        match mode {
            ProposalMode::GroundTruth => {
                let gt = gt_boxes.ok_or_else(|| Error::invalid("ground-truth proposals need gt boxes"))?;
                gt.iter()
                    .map(|bs| bs.iter().map(|&b| Proposal::new(b, 1.0, ProposalSource::GroundTruth)).collect())
                    .collect()
            }
            ProposalMode::Rpn => {
                let n = rpn.first().map_or(0, |l| s.g.shape(l.objectness)[0]);
                (0..n).map(|i| self.rpn_proposals(s, rpn, i, image_size)).collect()
            }
        }
    }

    fn rpn_proposals<T: Float>(
        &self,
        s: &Session<T>,
        rpn: &[RpnLevel],
        image: usize,
        (ih, iw): (usize, usize),
    ) -> Result<Vec<Proposal>> {
        let cfg = &self.config.rpn;
        let mut cand_boxes = Vec::new();
        let mut cand_scores = Vec::new();
        for (level, out) in rpn.iter().enumerate() {
            let obj = s.g.value(out.objectness);
            let del = s.g.value(out.deltas);
            let (_, a, h, w) = obj.dims4();
            let hw = h * w;
            let logits = obj.item(image);
            let deltas = del.item(image);
            let anchors = self.anchors(level, h, w);
            let mut order: Vec<usize> = (0..a * hw).collect();
            order.sort_by(|&p, &q| logits[q].partial_cmp(&logits[p]).unwrap_or(std::cmp::Ordering::Equal).then(p.cmp(&q)));
            order.truncate(cfg.pre_nms_top_n);
            for idx in order {
                let (ai, pos) = (idx / hw, idx % hw);
                let d = [0, 1, 2, 3].map(|j| deltas[(4 * ai + j) * hw + pos].to_f64_lossy());
                let b = boxes::clip(&boxes::decode(&anchors[idx], d, RPN_BOX_WEIGHTS), ih, iw);
                if boxes::width(&b) < cfg.min_size || boxes::height(&b) < cfg.min_size {
                    continue;
                }
                let z = logits[idx].to_f64_lossy();
                cand_boxes.push(b);
                cand_scores.push(1.0 / (1.0 + (-z).exp()));
            }
        }
        let keep = boxes::nms(&cand_boxes, &cand_scores, cfg.nms_iou, cfg.post_nms_top_n);
        keep.into_iter()
            .map(|k| Proposal::new(cand_boxes[k], cand_scores[k], ProposalSource::Rpn))
            .collect()
    }

    /// Objectness and box-regression losses of the proposal network, each
    /// averaged over the whole batch.
    pub fn rpn_loss<T: Float>(
        &self,
        s: &mut Session<T>,
        rpn: &[RpnLevel],
        gt_boxes: &[Vec<Bbox>],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Var)> {
        let cfg = self.config.rpn.clone();
        let n = gt_boxes.len();
        let mut obj_flat = Vec::new();
        let mut del_flat = Vec::new();
        let mut anchors = Vec::new(); // (anchor box, obj offset, delta offsets base, hw)
        let (mut obj_off, mut del_off) = (0usize, 0usize);
        for (level, out) in rpn.iter().enumerate() {
            let (_, a, h, w) = s.g.value(out.objectness).dims4();
            let len_o = n * a * h * w;
            obj_flat.push(s.g.reshape(out.objectness, &[len_o])?);
            del_flat.push(s.g.reshape(out.deltas, &[4 * len_o])?);
            anchors.push((self.anchors(level, h, w), obj_off, del_off, a, h * w));
            obj_off += len_o;
            del_off += 4 * len_o;
        }
        let obj_all = s.g.concat(&obj_flat, 0)?;
        let del_all = s.g.concat(&del_flat, 0)?;

        let mut obj_idx = Vec::new();
        let mut obj_lbl = Vec::new();
        let mut del_idx = Vec::new();
        let mut del_tgt = Vec::new();
        for (img, gts) in gt_boxes.iter().enumerate() {
            // (global flat objectness index, delta base index, hw, anchor)
            let mut entries = Vec::new();
            for (list, o_off, d_off, a, hw) in &anchors {
                for (k, anc) in list.iter().enumerate() {
                    let (ai, pos) = (k / hw, k % hw);
                    let oi = o_off + (img * a + ai) * hw + pos;
                    let di = d_off + (img * 4 * a + 4 * ai) * hw + pos;
                    entries.push((oi, di, *hw, *anc));
                }
            }
            let mut best = vec![(0.0f64, usize::MAX); entries.len()];
            let mut best_for_gt = vec![0.0f64; gts.len()];
            for (e, (_, _, _, anc)) in entries.iter().enumerate() {
                for (g, gt) in gts.iter().enumerate() {
                    let v = boxes::iou(anc, gt);
                    if v > best[e].0 {
                        best[e] = (v, g);
                    }
                    best_for_gt[g] = best_for_gt[g].max(v);
                }
            }
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for (e, &(v, g)) in best.iter().enumerate() {
                let is_best = g != usize::MAX && best_for_gt[g] > 0.0 && v == best_for_gt[g];
                if v >= cfg.fg_iou || is_best {
                    pos.push(e);
                } else if v < cfg.bg_iou {
                    neg.push(e);
                }
            }
            pos.shuffle(rng);
            neg.shuffle(rng);
            let max_pos = (cfg.batch_per_image as f64 * cfg.positive_fraction).round() as usize;
            pos.truncate(max_pos);
            neg.truncate(cfg.batch_per_image - pos.len());
            for &e in &pos {
                let (oi, di, hw, anc) = entries[e];
                obj_idx.push(oi);
                obj_lbl.push(T::one());
                let t = boxes::encode(&anc, &gts[best[e].1], RPN_BOX_WEIGHTS);
                for (j, tj) in t.iter().enumerate() {
                    del_idx.push(di + j * hw);
                    del_tgt.push(T::of(*tj));
                }
            }
            for &e in &neg {
                obj_idx.push(entries[e].0);
                obj_lbl.push(T::zero());
            }
        }
        let sampled = obj_idx.len();
        let obj_loss = if sampled == 0 {
            s.g.constant(Tensor::scalar(T::zero()))
        } else {
            let logits = s.g.gather(obj_all, obj_idx, &[sampled, 1])?;
            let probs = s.g.sigmoid(logits);
            let target = Tensor::from_vec(&[sampled, 1], obj_lbl)?;
            let w = vec![T::one() / T::of(sampled as f64); sampled];
            s.g.bce_rows(probs, target, w, T::of(crate::losses::BCE_EPS))?
        };
        let npos = del_tgt.len() / 4;
        let box_loss = if npos == 0 {
            s.g.constant(Tensor::scalar(T::zero()))
        } else {
            let d = s.g.gather(del_all, del_idx, &[npos, 4])?;
            let target = Tensor::from_vec(&[npos, 4], del_tgt)?;
            s.g.smooth_l1_rows(d, target, vec![T::one() / T::of(npos as f64); npos])?
        };
        Ok((obj_loss, box_loss))
    }
}

fn check_divisible(h: usize, w: usize) -> Result<()> {
    if !h.is_multiple_of(TOTAL_STRIDE) || !w.is_multiple_of(TOTAL_STRIDE) || h == 0 || w == 0 {
        let pad = |v: usize| (TOTAL_STRIDE - v % TOTAL_STRIDE) % TOTAL_STRIDE;
        return Err(Error::invalid(format!(
            "image {h}x{w} is not divisible by {TOTAL_STRIDE}; pad by {} rows and {} columns",
            pad(h),
            pad(w)
        )));
    }
    Ok(())
}

/// Stacks same-sized images into a normalised `(N, 1, H, W)` tensor.
pub fn image_batch<T: Float>(images: &[&GrayImage]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        if (im.height, im.width) != (h, w) {
            return Err(Error::invalid("images in a batch must share their size"));
        }
        data.extend(im.pixels.iter().map(|&p| T::of((p - 0.5) / 0.25)));
    }
    Tensor::from_vec(&[images.len(), 1, h, w], data)
}

/// Runs backbone and pyramid on one image in inference mode and returns the
/// levels as `(C, H, W)` tensors.
pub fn backbone_fpn_forward<T: Float>(
    store: &ParamStore<T>,
    detector: &Detector,
    image: &GrayImage,
) -> Result<Vec<Tensor<T>>> {
    let mut s = Session::new(store, false);
    let x = s.g.constant(image_batch(&[image])?);
    let levels = detector.features(&mut s, x)?;
    levels
        .iter()
        .map(|&l| {
            let t = s.g.value(l).clone();
            let (_, c, h, w) = t.dims4();
            t.reshaped(&[c, h, w])
        })
        .collect()
}

/// Pyramid index for a box under the area heuristic (canonical 224 px box on
/// P4), clamped to the available levels.
pub fn roi_level(bbox: &Bbox, num_levels: usize) -> usize {
    let side = boxes::area(bbox).sqrt().max(1e-6);
    let k = (4.0 + (side / 224.0).log2()).floor();
    (k - 2.0).clamp(0.0, (num_levels - 1) as f64) as usize
}

/// Bilinear RoIAlign weights along one axis. `lo`/`hi` are the box edges in
/// feature coordinates; `size` is the feature extent.
pub fn roi_axis_weights<T: Float>(lo: f64, hi: f64, size: usize, out: usize, sampling: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[out, size]);
    let bin = (hi - lo) / out as f64;
    let inv = 1.0 / sampling as f64;
    for i in 0..out {
        for sidx in 0..sampling {
            let c = lo + i as f64 * bin + (sidx as f64 + 0.5) * bin * inv - 0.5;
            if c < -1.0 || c > size as f64 {
                continue;
            }
            let c = c.max(0.0);
            let low = c.floor() as usize;
            let (low, high, frac) = if low + 1 >= size {
                (size - 1, size - 1, 0.0)
            } else {
                (low, low + 1, c - low as f64)
            };
            m.data_mut()[i * size + low] += T::of((1.0 - frac) * inv);
            m.data_mut()[i * size + high] += T::of(frac * inv);
        }
    }
    m
}

/// RoIAlign of `(batch index, box)` pairs over a pyramid of `(N, C, H, W)`
/// levels. Output `(R, C, 14, 14)` in input order.
pub fn roi_align<T: Float>(
    s: &mut Session<T>,
    levels: &[Var],
    strides: &[usize],
    image_size: (usize, usize),
    rois: &[(usize, Bbox)],
    sampling: usize,
) -> Result<Var> {
    if levels.is_empty() || levels.len() != strides.len() {
        return Err(Error::invalid("roi_align needs one stride per level"));
    }
    if rois.is_empty() {
        return Err(Error::invalid("roi_align of no boxes"));
    }
    let mut parts = Vec::with_capacity(rois.len());
    for &(img, b) in rois {
        if !boxes::is_valid(&b) {
            return Err(Error::invalid(format!("degenerate RoI box {b:?}")));
        }
        let (ih, iw) = (image_size.0 as f64, image_size.1 as f64);
        if b[2] <= 0.0 || b[3] <= 0.0 || b[0] >= iw || b[1] >= ih {
            return Err(Error::invalid(format!("RoI box {b:?} does not intersect the image")));
        }
        let level = roi_level(&b, levels.len());
        let (_, _, h, w) = s.g.value(levels[level]).dims4();
        let scale = 1.0 / strides[level] as f64;
        let wy = roi_axis_weights(b[1] * scale, b[3] * scale, h, ROI_SIZE, sampling);
        let wx = roi_axis_weights(b[0] * scale, b[2] * scale, w, ROI_SIZE, sampling);
        parts.push(s.g.resample(levels[level], vec![ResampleItem::new(img, wy, wx)])?);
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    s.g.concat(&parts, 0)
}

/// A fixed-size RoI feature with the proposal it was pooled from.
#[derive(Clone, Debug)]
pub struct RoiFeature<T> {
    /// `(C, 14, 14)`
    pub data: Tensor<T>,
    pub proposal: Proposal,
}

/// Pools one proposal from `(C, H, W)` pyramid levels at the standard strides.
pub fn roi_align_features<T: Float>(
    store: &ParamStore<T>,
    levels: &[Tensor<T>],
    image_size: (usize, usize),
    proposal: &Proposal,
    sampling: usize,
) -> Result<RoiFeature<T>> {
    let mut s = Session::new(store, false);
    let vars = levels
        .iter()
        .map(|t| {
            if t.shape().len() != 3 {
                return Err(Error::invalid("pyramid levels must be (C, H, W)"));
            }
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            Ok(s.g.constant(t.clone().reshaped(&shape)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let out = roi_align(&mut s, &vars, &LEVEL_STRIDES[..levels.len()], image_size, &[(0, proposal.bbox)], sampling)?;
    let t = s.g.value(out).clone();
    let c = t.shape()[1];
    Ok(RoiFeature {
        data: t.reshaped(&[c, ROI_SIZE, ROI_SIZE])?,
        proposal: proposal.clone(),
    })
}

/// Samples a full-image mask into a `size × size` target aligned with `bbox`.
pub fn rasterize_mask(mask: &BinaryMask, bbox: &Bbox, size: usize) -> Vec<f64> {
    let (h, w) = mask.dims();
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
            0.0
        } else if mask.get(y as usize, x as usize) {
            1.0
        } else {
            0.0
        }
    };
    let (bw, bh) = (boxes::width(bbox), boxes::height(bbox));
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let y = bbox[1] + (i as f64 + 0.5) * bh / size as f64 - 0.5;
            let x = bbox[0] + (j as f64 + 0.5) * bw / size as f64 - 0.5;
            let (y0, x0) = (y.floor(), x.floor());
            let (fy, fx) = (y - y0, x - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
            out.push(if v >= 0.5 { 1.0 } else { 0.0 });
        }
    }
    out
}

/// Pastes a `size × size` probability grid into a full-image binary mask.
pub fn paste_mask(probs: &[f64], size: usize, bbox: &Bbox, height: usize, width: usize, threshold: f64) -> Result<BinaryMask> {
    if probs.len() != size * size {
        return Err(Error::invalid("mask grid has the wrong length"));
    }
    let (bw, bh) = (boxes::width(bbox), boxes::height(bbox));
    if bw <= 0.0 || bh <= 0.0 {
        return Err(Error::invalid(format!("degenerate box {bbox:?}")));
    }
    let at = |r: usize, c: usize| probs[r * size + c];
    let last = (size - 1) as f64;
    BinaryMask::from_fn(height, width, |y, x| {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        if py < bbox[1] || py >= bbox[3] || px < bbox[0] || px >= bbox[2] {
            return false;
        }
        let v = ((py - bbox[1]) / bh * size as f64 - 0.5).clamp(0.0, last);
        let u = ((px - bbox[0]) / bw * size as f64 - 0.5).clamp(0.0, last);
        let (r0, c0) = (v.floor() as usize, u.floor() as usize);
        let (r1, c1) = ((r0 + 1).min(size - 1), (c0 + 1).min(size - 1));
        let (fy, fx) = (v - r0 as f64, u - c0 as f64);
        let p = (1.0 - fy) * ((1.0 - fx) * at(r0, c0) + fx * at(r0, c1)) + fy * ((1.0 - fx) * at(r1, c0) + fx * at(r1, c1));
        p >= threshold
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradients;
    use rand::{Rng, SeedableRng};

    fn tiny_config() -> DetectorConfig {
        DetectorConfig {
            backbone_channels: vec![4, 4, 8, 8],
            fpn_channels: 8,
            uam_mid_channels: 4,
            uam_reduction: 2,
            rpn: RpnConfig {
                channels: 8,
                ..RpnConfig::default()
            },
            ..DetectorConfig::default()
        }
    }

    #[test]
    fn pyramid_shapes_and_divisibility() {
        let mut store = ParamStore::<f32>::new(0);
        let det = Detector::new(&mut store, tiny_config()).unwrap();
        let img = GrayImage::filled(64, 96, 0.0);
        let levels = backbone_fpn_forward(&store, &det, &img).unwrap();
        let sizes: Vec<_> = levels.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(sizes, vec![vec![8, 16, 24], vec![8, 8, 12], vec![8, 4, 6], vec![8, 2, 3]]);
        assert!(levels.iter().all(|t| t.all_finite()));
        let err = backbone_fpn_forward(&store, &det, &GrayImage::filled(60, 64, 0.0)).unwrap_err();
        assert!(err.to_string().contains("pad by 4 rows"), "{err}");
    }

    #[test]
    fn ground_truth_proposals_pass_through() {
        let mut store = ParamStore::<f32>::new(0);
        let det = Detector::new(&mut store, tiny_config()).unwrap();
        let s = Session::new(&store, false);
        let gt = vec![vec![[1.0, 2.0, 10.0, 12.0], [0.0, 0.0, 5.0, 5.0], [3.0, 3.0, 9.0, 9.0]]];
        let p = det.propose(&s, &[], (32, 32), ProposalMode::GroundTruth, Some(&gt)).unwrap();
        assert_eq!(p[0].len(), 3);
        assert!(p[0].iter().zip(&gt[0]).all(|(p, b)| p.bbox == *b && p.score == 1.0));
        assert!(det.propose(&s, &[], (32, 32), ProposalMode::GroundTruth, None).is_err());
    }

    #[test]
    fn untrained_rpn_proposals_are_clipped() {
        let mut store = ParamStore::<f32>::new(1);
        let det = Detector::new(&mut store, tiny_config()).unwrap();
        let mut s = Session::new(&store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::from_fn(&[1, 1, 64, 64], |_| rng.gen_range(-1.0..1.0));
        let x = s.g.constant(img);
        let levels = det.features(&mut s, x).unwrap();
        let rpn = det.rpn_forward(&mut s, &levels).unwrap();
        let props = det.propose(&s, &rpn, (64, 64), ProposalMode::Rpn, None).unwrap();
        assert!(!props[0].is_empty() && props[0].len() <= 64);
        for p in &props[0] {
            assert!(p.bbox[0] >= 0.0 && p.bbox[1] >= 0.0 && p.bbox[2] <= 64.0 && p.bbox[3] <= 64.0);
        }
    }

    /// Direct 2-D bilinear sampling averaged over each bin.
    fn dense_oracle(plane: &[f64], h: usize, w: usize, b: Bbox, sampling: usize) -> Vec<f64> {
        let bilinear = |y: f64, x: f64| -> f64 {
            if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
                return 0.0;
            }
            let (y, x) = (y.max(0.0), x.max(0.0));
            let (mut y0, mut x0) = (y.floor() as usize, x.floor() as usize);
            let (mut y1, mut x1) = (y0 + 1, x0 + 1);
            let (mut ly, mut lx) = (y - y0 as f64, x - x0 as f64);
            if y0 >= h - 1 {
                y0 = h - 1;
                y1 = h - 1;
                ly = 0.0;
            }
            if x0 >= w - 1 {
                x0 = w - 1;
                x1 = w - 1;
                lx = 0.0;
            }
            let v = |r: usize, c: usize| plane[r * w + c];
            (1.0 - ly) * (1.0 - lx) * v(y0, x0) + (1.0 - ly) * lx * v(y0, x1) + ly * (1.0 - lx) * v(y1, x0) + ly * lx * v(y1, x1)
        };
        let (bh, bw) = ((b[3] - b[1]) / ROI_SIZE as f64, (b[2] - b[0]) / ROI_SIZE as f64);
        let mut out = Vec::new();
        for i in 0..ROI_SIZE {
            for j in 0..ROI_SIZE {
                let mut acc = 0.0;
                for sy in 0..sampling {
                    for sx in 0..sampling {
                        let y = b[1] + i as f64 * bh + (sy as f64 + 0.5) * bh / sampling as f64 - 0.5;
                        let x = b[0] + j as f64 * bw + (sx as f64 + 0.5) * bw / sampling as f64 - 0.5;
                        acc += bilinear(y, x);
                    }
                }
                out.push(acc / (sampling * sampling) as f64);
            }
        }
        out
    }

    #[test]
    fn roi_align_matches_dense_oracle() {
        let store = ParamStore::<f64>::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (c, h, w) = (2, 9, 11);
        let level = Tensor::from_fn(&[c, h, w], |_| rng.gen_range(-1.0..1.0));
        for b in [[0.0, 0.0, w as f64, h as f64], [1.3, 2.2, 7.9, 8.4], [-0.7, 0.4, 4.0, 3.1]] {
            let p = Proposal::new(b, 1.0, ProposalSource::GroundTruth).unwrap();
            // stride 1 so the box is in feature coordinates
            let mut s = Session::new(&store, false);
            let v = s.g.constant(level.clone().reshaped(&[1, c, h, w]).unwrap());
            let out = roi_align(&mut s, &[v], &[1], (h, w), &[(0, p.bbox)], 2).unwrap();
            let got = s.g.value(out);
            for ch in 0..c {
                let expect = dense_oracle(&level.data()[ch * h * w..(ch + 1) * h * w], h, w, b, 2);
                let slice = &got.data()[ch * 196..(ch + 1) * 196];
                for (a, e) in slice.iter().zip(&expect) {
                    assert!((a - e).abs() < 1e-12, "{b:?}");
                }
            }
        }
    }

    #[test]
    fn roi_align_of_constant_is_constant() {
        let store = ParamStore::<f64>::new(0);
        let levels: Vec<Tensor<f64>> = [16, 8, 4, 2].iter().map(|&n| Tensor::full(&[3, n, n], 2.5)).collect();
        let p = Proposal::new([3.0, 5.0, 40.0, 29.0], 0.9, ProposalSource::Rpn).unwrap();
        let f = roi_align_features(&store, &levels, (64, 64), &p, 2).unwrap();
        assert_eq!(f.data.shape(), &[3, 14, 14]);
        assert!(f.data.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
        let bad = Proposal { bbox: [3.0, 3.0, 3.0, 9.0], score: 1.0, source: ProposalSource::Rpn };
        assert!(roi_align_features(&store, &levels, (64, 64), &bad, 2).is_err());
    }

    #[test]
    fn roi_align_gradient() {
        let mut store = ParamStore::<f64>::new(0);
        let f = store.add("feature", &[1, 1, 8, 8], Init::Normal(1.0), true);
        let pairs = check_param_gradients(&mut store, &[f], 1e-6, usize::MAX, |s| {
            let x = s.p(f);
            let y = roi_align(s, &[x], &[1], (8, 8), &[(0, [0.6, 1.2, 6.3, 7.1])], 2)?;
            let y = s.g.mul(y, y)?;
            Ok(s.g.sum(y))
        })
        .unwrap();
        assert!(pairs[0].rel_error() < 1e-4, "{}", pairs[0].rel_error());
    }

    #[test]
    fn rasterize_then_paste_roundtrips_a_box_filling_mask() {
        let mask = BinaryMask::from_fn(32, 32, |y, x| (4..20).contains(&y) && (6..30).contains(&x)).unwrap();
        let bbox = [6.0, 4.0, 30.0, 20.0];
        let grid = rasterize_mask(&mask, &bbox, MASK_SIZE);
        assert!(grid.iter().all(|&v| v == 1.0));
        let pasted = paste_mask(&grid, MASK_SIZE, &bbox, 32, 32, 0.5).unwrap();
        assert_eq!(pasted, mask);
    }

    #[test]
    fn level_assignment() {
        assert_eq!(roi_level(&[0.0, 0.0, 224.0, 224.0], 4), 2);
        assert_eq!(roi_level(&[0.0, 0.0, 20.0, 20.0], 4), 0);
        assert_eq!(roi_level(&[0.0, 0.0, 1000.0, 1000.0], 4), 3);
    }
}
