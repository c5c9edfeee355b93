//! Detection branch, coarse mask head, bilayer (overlap / non-overlap) heads
//! and the recombination head.
//!
//! Every mask head is four 3×3 convolutions at 14×14, a 2×2 transposed
//! convolution to 28×28 and a 1×1 predictor. The recombination head works on
//! 28×28 fused features, so its first convolution has stride 2.

use serde::{Deserialize, Serialize};

use crate::detector::{MASK_SIZE, ROI_SIZE};
use crate::error::{Error, Result};
use crate::graph::{ConvGeom, ResampleItem, Var};
use crate::nn::{Conv2d, ConvNormRelu, Deconv, GroupNorm, Linear};
use crate::params::{Init, ParamId, ParamStore, Session};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Width of every mask-head convolution and of the connection and
    /// fusion blocks.
    pub channels: usize,
    /// Width of the two hidden fully connected layers of the detection branch.
    pub det_hidden: usize,
    /// Group-norm groups after each mask-head convolution and hidden
    /// detection layer; 0 disables.
    pub norm_groups: usize,
    pub overlap_head: bool,
    pub nonoverlap_head: bool,
    pub recombine_head: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            channels: 256,
            det_hidden: 256,
            norm_groups: 32,
            overlap_head: true,
            nonoverlap_head: true,
            recombine_head: true,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.det_hidden == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        if self.recombine_head && !(self.overlap_head && self.nonoverlap_head) {
            return Err(Error::Config("the recombination head needs both bilayer heads".into()));
        }
        Ok(())
    }
}

/// Outputs of one mask head.
#[derive(Clone, Copy, Debug)]
pub struct MaskHeadOut {
    /// `(R, 1, 28, 28)` probabilities.
    pub probs: Var,
    /// `(R, C, 14, 14)` output of the convolution stack.
    pub inner: Var,
    /// `(R, C, 28, 28)` activations after the transposed convolution.
    pub upsampled: Var,
}

#[derive(Clone, Debug)]
pub struct MaskHead {
    pub convs: Vec<ConvNormRelu>,
    pub deconv: Deconv,
    pub predictor: Conv2d,
}

impl MaskHead {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        width: usize,
        first_stride: usize,
        norm_groups: usize,
    ) -> Self {
        let convs = (0..4)
            .map(|i| {
                let (ci, stride) = if i == 0 { (cin, first_stride) } else { (width, 1) };
                let cname = format!("{name}.conv{}", i + 1);
                let conv = Conv2d::new(store, &cname, ci, width, 3, 1, stride, None);
                ConvNormRelu::new(store, &cname, conv, width, norm_groups)
            })
            .collect();
        MaskHead {
            convs,
            deconv: Deconv::new(store, &format!("{name}.deconv"), width, width),
            predictor: Conv2d::new(store, &format!("{name}.predictor"), width, 1, 1, 1, 1, Some(Init::Normal(0.001))),
        }
    }

    pub fn forward<T: Float>(&self, s: &mut Session<T>, x: Var) -> Result<MaskHeadOut> {
        let mut y = x;
        for c in &self.convs {
            y = c.forward(s, y)?;
        }
        let inner = y;
        let up = self.deconv.forward(s, inner)?;
        let upsampled = s.g.relu(up);
        let logits = self.predictor.forward(s, upsampled)?;
        Ok(MaskHeadOut {
            probs: s.g.sigmoid(logits),
            inner,
            upsampled,
        })
    }

    /// Every parameter in registration order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for c in &self.convs {
            v.push(c.conv.w);
            v.extend(c.conv.b);
            if let Some(n) = &c.norm {
                v.extend([n.gamma, n.beta]);
            }
        }
        v.extend([self.deconv.w, self.deconv.b, self.predictor.w]);
        v.extend(self.predictor.b);
        v
    }
}

/// Detection outputs for a set of RoIs.
#[derive(Clone, Copy, Debug)]
pub struct DetectionOut {
    /// `(R, 2)` background / worm logits.
    pub cls_logits: Var,
    /// `(R, 4)` box deltas.
    pub box_deltas: Var,
}

/// Detection branch plus the coarse instance-mask head.
#[derive(Clone, Debug)]
pub struct CoarseHead {
    fc1: Linear,
    fc2: Linear,
    /// Normalisation of the two hidden layers.
    norms: Option<[GroupNorm; 2]>,
    cls: Linear,
    bbox: Linear,
    pub mask: MaskHead,
}

impl CoarseHead {
    pub fn new<T: Float>(store: &mut ParamStore<T>, roi_channels: usize, cfg: &HeadConfig) -> Self {
        let pooled = ROI_SIZE / 2;
        CoarseHead {
            fc1: Linear::new(store, "coarse.fc1", roi_channels * pooled * pooled, cfg.det_hidden, true, None),
            fc2: Linear::new(store, "coarse.fc2", cfg.det_hidden, cfg.det_hidden, true, None),
            norms: (cfg.norm_groups > 0).then(|| {
                [1, 2].map(|i| GroupNorm::new(store, &format!("coarse.fc{i}.norm"), cfg.det_hidden, cfg.norm_groups))
            }),
            cls: Linear::new(store, "coarse.cls", cfg.det_hidden, 2, true, Some(Init::Normal(0.01))),
            bbox: Linear::new(store, "coarse.bbox", cfg.det_hidden, 4, true, Some(Init::Normal(0.001))),
            mask: MaskHead::new(store, "coarse.mask", roi_channels, cfg.channels, 1, cfg.norm_groups),
        }
    }

    /// Classification and box regression from `(R, C, 14, 14)` RoI features
    /// average-pooled to 7×7.
    pub fn detect<T: Float>(&self, s: &mut Session<T>, f_roi: Var) -> Result<DetectionOut> {
        let pooled = s.g.avg_pool2(f_roi)?;
        let shape = s.g.shape(pooled).to_vec();
        let flat = s.g.reshape(pooled, &[shape[0], shape[1..].iter().product()])?;
        let mut h = flat;
        for (i, fc) in [&self.fc1, &self.fc2].into_iter().enumerate() {
            h = fc.forward(s, h)?;
            if let Some(norms) = &self.norms {
                let r = s.g.shape(h)[0];
                let c = s.g.shape(h)[1];
                let h4 = s.g.reshape(h, &[r, c, 1, 1])?;
                let n = norms[i].forward(s, h4)?;
                h = s.g.reshape(n, &[r, c])?;
            }
            h = s.g.relu(h);
        }
        Ok(DetectionOut {
            cls_logits: self.cls.forward(s, h)?,
            box_deltas: self.bbox.forward(s, h)?,
        })
    }

    /// Coarse mask and its 14×14 features.
    pub fn coarse_mask<T: Float>(&self, s: &mut Session<T>, f_roi: Var) -> Result<MaskHeadOut> {
        self.mask.forward(s, f_roi)
    }
}

/// Connection block and the two sub-region heads.
#[derive(Clone, Debug)]
pub struct BilayerHeads {
    pub connection: Conv2d,
    pub overlap: Option<MaskHead>,
    pub nonoverlap: Option<MaskHead>,
}

impl BilayerHeads {
    pub fn new<T: Float>(store: &mut ParamStore<T>, roi_channels: usize, cfg: &HeadConfig) -> Self {
        let c = cfg.channels;
        BilayerHeads {
            connection: Conv2d::new(store, "bilayer.connection", roi_channels + c, roi_channels, 1, 1, 1, None),
            overlap: cfg
                .overlap_head
                .then(|| MaskHead::new(store, "bilayer.overlap", roi_channels, c, 1, cfg.norm_groups)),
            nonoverlap: cfg
                .nonoverlap_head
                .then(|| MaskHead::new(store, "bilayer.nonoverlap", roi_channels, c, 1, cfg.norm_groups)),
        }
    }

    /// Merges the RoI features with the coarse head's features.
    pub fn connect<T: Float>(&self, s: &mut Session<T>, f_roi: Var, f_m: Var) -> Result<Var> {
        let cat = s.g.concat(&[f_roi, f_m], 1)?;
        self.connection.forward_relu(s, cat)
    }

    pub fn forward<T: Float>(
        &self,
        s: &mut Session<T>,
        f_roi: Var,
        f_m: Var,
    ) -> Result<(Option<MaskHeadOut>, Option<MaskHeadOut>)> {
        let joined = self.connect(s, f_roi, f_m)?;
        let o = self.overlap.as_ref().map(|h| h.forward(s, joined)).transpose()?;
        let n = self.nonoverlap.as_ref().map(|h| h.forward(s, joined)).transpose()?;
        Ok((o, n))
    }
}

/// Row-stochastic bilinear upsampling matrix (`out × input`) with
/// half-pixel alignment.
pub fn bilinear_matrix<T: Float>(input: usize, out: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[out, input]);
    let scale = input as f64 / out as f64;
    for i in 0..out {
        let c = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(input - 1);
        let f = c - lo as f64;
        m.data_mut()[i * input + lo] += T::of(1.0 - f);
        m.data_mut()[i * input + hi] += T::of(f);
    }
    m
}

/// Fusion block plus the recombined mask head.
#[derive(Clone, Debug)]
pub struct RecombineHead {
    pub fusion: Conv2d,
    pub head: MaskHead,
}

impl RecombineHead {
    pub fn new<T: Float>(store: &mut ParamStore<T>, roi_channels: usize, cfg: &HeadConfig) -> Self {
        let c = cfg.channels;
        RecombineHead {
            fusion: Conv2d::new(store, "recombine.fusion", roi_channels + 2 * c, c, 1, 1, 1, None),
            head: MaskHead::new(store, "recombine.head", c, c, 2, cfg.norm_groups),
        }
    }

    /// Upsamples the RoI features to 28×28 and fuses them with the two
    /// sub-region feature maps.
    pub fn fuse<T: Float>(&self, s: &mut Session<T>, f_roi: Var, f_o: Var, f_n: Var) -> Result<Var> {
        let r = s.g.shape(f_roi)[0];
        let m = bilinear_matrix::<T>(ROI_SIZE, MASK_SIZE);
        let items = (0..r).map(|i| ResampleItem::new(i, m.clone(), m.clone())).collect();
        let up = s.g.resample(f_roi, items)?;
        let cat = s.g.concat(&[up, f_o, f_n], 1)?;
        self.fusion.forward_relu(s, cat)
    }

    pub fn forward<T: Float>(&self, s: &mut Session<T>, f_roi: Var, f_o: Var, f_n: Var) -> Result<MaskHeadOut> {
        let fused = self.fuse(s, f_roi, f_o, f_n)?;
        debug_assert_eq!(self.head.convs[0].conv.geom, ConvGeom { stride: 2, pad: 1, dilation: 1 });
        self.head.forward(s, fused)
    }
}
