//! The assembled network: detector scaffold, coarse head, bilayer heads and
//! recombination head, with the training objective and inference.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{self, Bbox};
use crate::detector::{
    image_batch, paste_mask, rasterize_mask, roi_align, Detector, DetectorConfig, ProposalMode, HEAD_BOX_WEIGHTS,
    LEVEL_STRIDES, MASK_SIZE,
};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::heads::{BilayerHeads, CoarseHead, HeadConfig, MaskHeadOut, RecombineHead};
use crate::losses::{self, LossBundle, LossWeights};
use crate::mask_algebra::{BinaryMask, DEFAULT_THRESHOLD};
use crate::params::{ParamStore, Session};
use crate::synth::{AnnotatedScene, GrayImage};
use crate::tensor::{Float, Tensor};

/// RoI sampling and inference post-processing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoiConfig {
    pub batch_per_image: usize,
    pub fg_fraction: f64,
    pub fg_iou: f64,
    pub max_mask_rois_per_image: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for RoiConfig {
    fn default() -> Self {
        RoiConfig {
            batch_per_image: 64,
            fg_fraction: 0.25,
            fg_iou: 0.5,
            max_mask_rois_per_image: 16,
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 32,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub detector: DetectorConfig,
    pub heads: HeadConfig,
    pub roi: RoiConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.heads.validate()?;
        let r = &self.roi;
        if r.batch_per_image == 0 || r.max_mask_rois_per_image == 0 || r.max_detections == 0 {
            return Err(Error::Config("roi sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&r.fg_fraction) || !(0.0..=1.0).contains(&r.score_threshold) {
            return Err(Error::Config("roi fractions must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Which mask a prediction reports as its final output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMask {
    Coarse,
    /// Hard XOR of the binarised overlap and non-overlap masks.
    Bilayer,
    Recombined,
}

/// One predicted instance.
#[derive(Clone, Debug)]
pub struct InstancePrediction {
    pub bbox: Bbox,
    pub score: f64,
    /// 28×28 grids in row-major order.
    pub coarse: Vec<f64>,
    pub overlap: Option<Vec<f64>>,
    pub nonoverlap: Option<Vec<f64>>,
    pub recombined: Option<Vec<f64>>,
    pub output: OutputMask,
    /// Final full-image amodal mask.
    pub mask: BinaryMask,
}

/// Result of one training forward pass.
pub struct TrainStep {
    pub total: Var,
    pub bundle: LossBundle,
    /// Ground-truth instances that received no foreground RoI.
    pub unmatched: usize,
}

/// A sampled RoI with its training targets.
#[derive(Clone, Copy)]
struct SampledRoi {
    image: usize,
    bbox: Bbox,
    /// Matched instance, `None` for background.
    gt: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct BrNet {
    pub config: ModelConfig,
    pub detector: Detector,
    pub coarse: CoarseHead,
    pub bilayer: Option<BilayerHeads>,
    pub recombine: Option<RecombineHead>,
}

fn gt_boxes(scene: &AnnotatedScene) -> Vec<Bbox> {
    scene.instances.iter().map(|i| i.bbox.to_f64()).collect()
}

fn stack_targets<T: Float>(grids: &[Vec<f64>]) -> Result<Tensor<T>> {
    Tensor::from_vec(
        &[grids.len(), 1, MASK_SIZE, MASK_SIZE],
        grids.iter().flatten().map(|&v| T::of(v)).collect(),
    )
}

impl BrNet {
    pub fn new<T: Float>(store: &mut ParamStore<T>, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let detector = Detector::new(store, config.detector.clone())?;
        let c = config.detector.fpn_channels;
        let coarse = CoarseHead::new(store, c, &config.heads);
        let bilayer = (config.heads.overlap_head || config.heads.nonoverlap_head)
            .then(|| BilayerHeads::new(store, c, &config.heads));
        let recombine = config.heads.recombine_head.then(|| RecombineHead::new(store, c, &config.heads));
        Ok(BrNet {
            config,
            detector,
            coarse,
            bilayer,
            recombine,
        })
    }

    /// Which mask inference reports.
    pub fn output_mask(&self) -> OutputMask {
        match &self.bilayer {
            _ if self.recombine.is_some() => OutputMask::Recombined,
            Some(b) if b.overlap.is_some() && b.nonoverlap.is_some() => OutputMask::Bilayer,
            _ => OutputMask::Coarse,
        }
    }

    fn sample_rois(
        &self,
        proposals: &[Vec<Bbox>],
        scenes: &[&AnnotatedScene],
        rng: &mut ChaCha8Rng,
    ) -> (Vec<SampledRoi>, Vec<SampledRoi>, usize) {
        let cfg = &self.config.roi;
        let mut all = Vec::new();
        let mut masks = Vec::new();
        let mut unmatched = 0;
        for (img, scene) in scenes.iter().enumerate() {
            let gts = gt_boxes(scene);
            let mut cands: Vec<Bbox> = gts.clone();
            cands.extend(proposals[img].iter().copied());
            let mut fg = Vec::new();
            let mut bg = Vec::new();
            for b in cands {
                let best = gts
                    .iter()
                    .enumerate()
                    .map(|(g, gb)| (boxes::iou(&b, gb), g))
                    .fold((0.0, usize::MAX), |acc, x| if x.0 > acc.0 { x } else { acc });
                if best.0 >= cfg.fg_iou {
                    fg.push((b, best.1));
                } else {
                    bg.push(b);
                }
            }
            let mut covered = vec![false; gts.len()];
            for &(_, g) in &fg {
                covered[g] = true;
            }
            unmatched += covered.iter().filter(|c| !**c).count();
            fg.shuffle(rng);
            bg.shuffle(rng);
            let max_fg = ((cfg.batch_per_image as f64 * cfg.fg_fraction).round() as usize).max(1);
            fg.truncate(max_fg);
            bg.truncate(cfg.batch_per_image.saturating_sub(fg.len()));
            for (k, &(b, g)) in fg.iter().enumerate() {
                all.push(SampledRoi { image: img, bbox: b, gt: Some(g) });
                if k < cfg.max_mask_rois_per_image {
                    masks.push(SampledRoi { image: img, bbox: b, gt: Some(g) });
                }
            }
            for b in bg {
                all.push(SampledRoi { image: img, bbox: b, gt: None });
            }
        }
        (all, masks, unmatched)
    }

    /// Builds the full training objective for a batch of same-sized scenes.
    pub fn train_forward<T: Float>(
        &self,
        s: &mut Session<T>,
        scenes: &[&AnnotatedScene],
        mode: ProposalMode,
        weights: &LossWeights,
        cons_detach: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<TrainStep> {
        let images: Vec<&GrayImage> = scenes.iter().map(|sc| &sc.image).collect();
        let size = scenes.first().ok_or_else(|| Error::invalid("empty batch"))?.dims();
        let x = s.g.constant(image_batch(&images)?);
        let levels = self.detector.features(s, x)?;
        let gts: Vec<Vec<Bbox>> = scenes.iter().map(|sc| gt_boxes(sc)).collect();

        let zero = |s: &mut Session<T>| s.g.constant(Tensor::scalar(T::zero()));
        let (rpn_obj, rpn_box, all, mask_rois, unmatched) = match mode {
            ProposalMode::GroundTruth => {
                let rois: Vec<SampledRoi> = gts
                    .iter()
                    .enumerate()
                    .flat_map(|(img, bs)| {
                        bs.iter().enumerate().map(move |(g, &b)| SampledRoi { image: img, bbox: b, gt: Some(g) })
                    })
                    .collect();
                let masks = rois.clone();
                (zero(s), zero(s), rois, masks, 0)
            }
            ProposalMode::Rpn => {
                let rpn = self.detector.rpn_forward(s, &levels)?;
                let (obj, rbox) = self.detector.rpn_loss(s, &rpn, &gts, rng)?;
                let props = self.detector.propose(s, &rpn, size, ProposalMode::Rpn, None)?;
                let props: Vec<Vec<Bbox>> = props.iter().map(|p| p.iter().map(|q| q.bbox).collect()).collect();
                let (all, masks, unmatched) = self.sample_rois(&props, scenes, rng);
                (obj, rbox, all, masks, unmatched)
            }
        };

        let sampling = self.config.detector.sampling_ratio;
        let mut head_losses = LossBundle::default();
        let (l_cls, l_reg) = if all.is_empty() {
            (losses::cls_loss_var(&mut s.g, rpn_obj, &[])?, zero(s))
        } else {
            let rois: Vec<(usize, Bbox)> = all.iter().map(|r| (r.image, r.bbox)).collect();
            let f_roi = roi_align(s, &levels, &LEVEL_STRIDES, size, &rois, sampling)?;
            let det = self.coarse.detect(s, f_roi)?;
            let labels: Vec<usize> = all.iter().map(|r| r.gt.is_some() as usize).collect();
            let cls = losses::cls_loss_var(&mut s.g, det.cls_logits, &labels)?;
            let fg: Vec<usize> = (0..all.len()).filter(|&i| all[i].gt.is_some()).collect();
            let reg = if fg.is_empty() {
                zero(s)
            } else {
                let idx = fg.iter().flat_map(|&i| (0..4).map(move |j| 4 * i + j)).collect();
                let d = s.g.gather(det.box_deltas, idx, &[fg.len(), 4])?;
                let targets: Vec<[f64; 4]> = fg
                    .iter()
                    .map(|&i| {
                        let r = &all[i];
                        boxes::encode(&r.bbox, &gts[r.image][r.gt.expect("foreground")], HEAD_BOX_WEIGHTS)
                    })
                    .collect();
                losses::reg_loss_var(&mut s.g, d, &targets)?
            };
            (cls, reg)
        };
        let l_cls = s.g.add(l_cls, rpn_obj)?;
        let l_reg = s.g.add(l_reg, rpn_box)?;

        let (l_cmask, l_dec, l_rmask, l_cons) = if mask_rois.is_empty() {
            (zero(s), zero(s), zero(s), zero(s))
        } else {
            self.mask_losses(s, &levels, size, scenes, &mask_rois, weights, cons_detach)?
        };
        let coarse = s.g.add(l_cls, l_reg)?;
        let coarse = s.g.add(coarse, l_cmask)?;
        let total = losses::total_var(&mut s.g, coarse, l_dec, l_rmask, l_cons, weights)?;
        let val = |s: &Session<T>, v: Var| s.g.value(v).data()[0].to_f64_lossy();
        head_losses.l_cls = val(s, l_cls);
        head_losses.l_reg = val(s, l_reg);
        head_losses.l_cmask = val(s, l_cmask);
        head_losses.l_dec = val(s, l_dec);
        head_losses.l_rmask = val(s, l_rmask);
        head_losses.l_cons = val(s, l_cons);
        let mut bundle = losses::total_loss(head_losses, weights);
        // report the graph's own total so the log matches the optimised value
        bundle.total = val(s, total);
        Ok(TrainStep { total, bundle, unmatched })
    }

    #[allow(clippy::too_many_arguments)]
    fn mask_losses<T: Float>(
        &self,
        s: &mut Session<T>,
        levels: &[Var],
        size: (usize, usize),
        scenes: &[&AnnotatedScene],
        rois: &[SampledRoi],
        weights: &LossWeights,
        cons_detach: bool,
    ) -> Result<(Var, Var, Var, Var)> {
        let zero = |s: &mut Session<T>| s.g.constant(Tensor::scalar(T::zero()));
        let boxes_in: Vec<(usize, Bbox)> = rois.iter().map(|r| (r.image, r.bbox)).collect();
        let f_roi = roi_align(s, levels, &LEVEL_STRIDES, size, &boxes_in, self.config.detector.sampling_ratio)?;
        let mut counts = vec![0; scenes.len()];
        for r in rois {
            counts[r.image] += 1;
        }
        // rois are grouped by image already, so weights line up
        let w = losses::nested_weights(&counts);
        let target = |pick: &dyn Fn(&crate::synth::Instance) -> &BinaryMask| -> Vec<Vec<f64>> {
            rois.iter()
                .map(|r| {
                    let inst = &scenes[r.image].instances[r.gt.expect("mask rois are foreground")];
                    rasterize_mask(pick(inst), &r.bbox, MASK_SIZE)
                })
                .collect()
        };
        let amodal = stack_targets::<T>(&target(&|i| &i.amodal))?;
        let cm = self.coarse.coarse_mask(s, f_roi)?;
        let l_cmask = losses::mask_loss_var(&mut s.g, cm.probs, amodal.clone(), &w)?;

        let mut l_dec = zero(s);
        let mut l_rmask = zero(s);
        let mut l_cons = zero(s);
        if let Some(bilayer) = &self.bilayer {
            let (o, n) = bilayer.forward(s, f_roi, cm.inner)?;
            if let Some(o) = o {
                let t = stack_targets::<T>(&target(&|i| &i.overlap))?;
                let l = losses::mask_loss_var(&mut s.g, o.probs, t, &w)?;
                l_dec = s.g.add(l_dec, l)?;
            }
            if let Some(n) = n {
                let t = stack_targets::<T>(&target(&|i| &i.nonoverlap))?;
                let l = losses::mask_loss_var(&mut s.g, n.probs, t, &w)?;
                l_dec = s.g.add(l_dec, l)?;
            }
            if let (Some(rh), Some(o), Some(n)) = (&self.recombine, o, n) {
                let r = rh.forward(s, f_roi, o.upsampled, n.upsampled)?;
                l_rmask = losses::mask_loss_var(&mut s.g, r.probs, amodal, &w)?;
                if weights.lambda_cons != 0.0 {
                    l_cons = losses::cons_loss_var(&mut s.g, r.probs, o.probs, n.probs, &w, cons_detach)?;
                }
            }
        }
        Ok((l_cmask, l_dec, l_rmask, l_cons))
    }

    /// Mask-branch outputs for RoIs: coarse, overlap, non-overlap, refined.
    #[allow(clippy::type_complexity)]
    pub fn mask_branch<T: Float>(
        &self,
        s: &mut Session<T>,
        f_roi: Var,
    ) -> Result<(MaskHeadOut, Option<MaskHeadOut>, Option<MaskHeadOut>, Option<MaskHeadOut>)> {
        let cm = self.coarse.coarse_mask(s, f_roi)?;
        let (o, n) = match &self.bilayer {
            Some(b) => b.forward(s, f_roi, cm.inner)?,
            None => (None, None),
        };
        let r = match (&self.recombine, o, n) {
            (Some(rh), Some(o), Some(n)) => Some(rh.forward(s, f_roi, o.upsampled, n.upsampled)?),
            _ => None,
        };
        Ok((cm, o, n, r))
    }

    /// Predicts instances for one image. Ground-truth mode uses `gt_boxes`
    /// as the proposals and keeps them as the output boxes.
    pub fn predict<T: Float>(
        &self,
        store: &ParamStore<T>,
        image: &GrayImage,
        mode: ProposalMode,
        gt_boxes: Option<&[Bbox]>,
    ) -> Result<Vec<InstancePrediction>> {
        let cfg = &self.config.roi;
        let size = (image.height, image.width);
        let mut s = Session::new(store, false);
        let x = s.g.constant(image_batch(&[image])?);
        let levels = self.detector.features(&mut s, x)?;
        let sampling = self.config.detector.sampling_ratio;

        let (final_boxes, final_scores) = match mode {
            ProposalMode::GroundTruth => {
                let gt = gt_boxes.ok_or_else(|| Error::invalid("ground-truth proposals need gt boxes"))?;
                if gt.is_empty() {
                    return Ok(Vec::new());
                }
                let rois: Vec<(usize, Bbox)> = gt.iter().map(|&b| (0, b)).collect();
                let f = roi_align(&mut s, &levels, &LEVEL_STRIDES, size, &rois, sampling)?;
                let det = self.coarse.detect(&mut s, f)?;
                let logits = s.g.value(det.cls_logits).cast::<f64>();
                let scores: Vec<f64> = logits.data().chunks(2).map(|l| 1.0 / (1.0 + (l[0] - l[1]).exp())).collect();
                (gt.to_vec(), scores)
            }
            ProposalMode::Rpn => {
                let rpn = self.detector.rpn_forward(&mut s, &levels)?;
                let props = self.detector.propose(&s, &rpn, size, ProposalMode::Rpn, None)?;
                let props = &props[0];
                if props.is_empty() {
                    return Ok(Vec::new());
                }
                let rois: Vec<(usize, Bbox)> = props.iter().map(|p| (0, p.bbox)).collect();
                let f = roi_align(&mut s, &levels, &LEVEL_STRIDES, size, &rois, sampling)?;
                let det = self.coarse.detect(&mut s, f)?;
                let logits = s.g.value(det.cls_logits).cast::<f64>();
                let deltas = s.g.value(det.box_deltas).cast::<f64>();
                let mut bxs = Vec::new();
                let mut scs = Vec::new();
                for (k, p) in props.iter().enumerate() {
                    let l = &logits.data()[2 * k..2 * k + 2];
                    let score = 1.0 / (1.0 + (l[0] - l[1]).exp());
                    let d = &deltas.data()[4 * k..4 * k + 4];
                    let b = boxes::clip(&boxes::decode(&p.bbox, [d[0], d[1], d[2], d[3]], HEAD_BOX_WEIGHTS), size.0, size.1);
                    if score >= cfg.score_threshold && boxes::width(&b) >= 1.0 && boxes::height(&b) >= 1.0 {
                        bxs.push(b);
                        scs.push(score);
                    }
                }
                let keep = boxes::nms(&bxs, &scs, cfg.nms_iou, cfg.max_detections);
                (keep.iter().map(|&k| bxs[k]).collect(), keep.iter().map(|&k| scs[k]).collect())
            }
        };
        if final_boxes.is_empty() {
            return Ok(Vec::new());
        }
        let rois: Vec<(usize, Bbox)> = final_boxes.iter().map(|&b| (0, b)).collect();
        let f = roi_align(&mut s, &levels, &LEVEL_STRIDES, size, &rois, sampling)?;
        let (cm, o, n, r) = self.mask_branch(&mut s, f)?;
        let grid = MASK_SIZE * MASK_SIZE;
        let rows = |s: &Session<T>, v: Option<MaskHeadOut>, k: usize| -> Option<Vec<f64>> {
            v.map(|h| s.g.value(h.probs).data()[k * grid..(k + 1) * grid].iter().map(|x| x.to_f64_lossy()).collect())
        };
        let output = self.output_mask();
        let mut out = Vec::with_capacity(final_boxes.len());
        for (k, (&bbox, &score)) in final_boxes.iter().zip(&final_scores).enumerate() {
            let coarse = rows(&s, Some(cm), k).expect("coarse mask");
            let overlap = rows(&s, o, k);
            let nonoverlap = rows(&s, n, k);
            let recombined = rows(&s, r, k);
            let chosen: Vec<f64> = match output {
                OutputMask::Recombined => recombined.clone().expect("recombined"),
                OutputMask::Bilayer => {
                    let (ov, nv) = (overlap.as_ref().expect("overlap"), nonoverlap.as_ref().expect("nonoverlap"));
                    ov.iter()
                        .zip(nv)
                        .map(|(&a, &b)| ((a >= DEFAULT_THRESHOLD) != (b >= DEFAULT_THRESHOLD)) as u8 as f64)
                        .collect()
                }
                OutputMask::Coarse => coarse.clone(),
            };
            let mask = paste_mask(&chosen, MASK_SIZE, &bbox, size.0, size.1, DEFAULT_THRESHOLD)?;
            out.push(InstancePrediction {
                bbox,
                score,
                coarse,
                overlap,
                nonoverlap,
                recombined,
                output,
                mask,
            });
        }
        Ok(out)
    }
}
