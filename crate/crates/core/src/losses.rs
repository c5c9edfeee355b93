//! Training objectives.
//!
//! Every loss exists twice: as a graph builder (`*_var`) used in training and
//! as a plain function over masks and arrays built on top of it.
//!
//! Mask terms for the decomposition, refined and consistency losses use the
//! nested average `1/K Σ_k 1/A_k Σ_i`, where `K` counts images with at least
//! one matched instance and `A_k` is that image's instance count. The coarse
//! mask term uses the same weights so the four mask terms stay commensurate.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mask_algebra::{soft_xor_merge_var, BinaryMask, SoftMask};
use crate::tensor::{Float, Tensor};

/// Probability clamp of every binary cross-entropy term.
pub const BCE_EPS: f64 = 1e-7;

static EMPTY_BATCHES: AtomicUsize = AtomicUsize::new(0);

/// How many classification losses were asked for over an empty match set.
pub fn empty_batch_warnings() -> usize {
    EMPTY_BATCHES.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_dec: f64,
    pub lambda_rmask: f64,
    pub lambda_cons: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_dec: 1.0,
            lambda_rmask: 1.0,
            lambda_cons: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_dec", self.lambda_dec),
            ("lambda_rmask", self.lambda_rmask),
            ("lambda_cons", self.lambda_cons),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar values of every loss term of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_cmask: f64,
    pub l_coarse: f64,
    pub l_dec: f64,
    pub l_rmask: f64,
    pub l_cons: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.l_cls, self.l_reg, self.l_cmask, self.l_coarse, self.l_dec, self.l_rmask, self.l_cons, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "l_cls={} l_reg={} l_cmask={} l_coarse={} l_dec={} l_rmask={} l_cons={} total={}",
            self.l_cls, self.l_reg, self.l_cmask, self.l_coarse, self.l_dec, self.l_rmask, self.l_cons, self.total
        )
    }
}

/// `L_cls + L_reg + L_cmask`.
pub fn coarse_loss(l_cls: f64, l_reg: f64, l_cmask: f64) -> f64 {
    l_cls + l_reg + l_cmask
}

/// Fills `l_coarse` and `total` from the individual terms.
pub fn total_loss(parts: LossBundle, weights: &LossWeights) -> LossBundle {
    let l_coarse = coarse_loss(parts.l_cls, parts.l_reg, parts.l_cmask);
    LossBundle {
        l_coarse,
        total: l_coarse
            + weights.lambda_dec * parts.l_dec
            + weights.lambda_rmask * parts.l_rmask
            + weights.lambda_cons * parts.l_cons,
        ..parts
    }
}

/// Per-instance weights `1/(K·A_k)` for per-image instance counts.
pub fn nested_weights(counts: &[usize]) -> Vec<f64> {
    let k = counts.iter().filter(|&&a| a > 0).count();
    counts
        .iter()
        .flat_map(|&a| std::iter::repeat_n(1.0 / (k as f64 * a as f64), a))
        .collect()
}

fn zero<T: Float>(g: &mut Graph<T>) -> Var {
    g.constant(Tensor::scalar(T::zero()))
}

/// Softmax cross-entropy averaged over rows of `(R, 2)` logits.
pub fn cls_loss_var<T: Float>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    if labels.is_empty() {
        EMPTY_BATCHES.fetch_add(1, Ordering::Relaxed);
        return Ok(zero(g));
    }
    let w = vec![T::one() / T::of(labels.len() as f64); labels.len()];
    g.softmax_ce_rows(logits, labels.to_vec(), w)
}

/// Smooth-L1 summed over the 4 coordinates, averaged over rows.
pub fn reg_loss_var<T: Float>(g: &mut Graph<T>, deltas: Var, targets: &[[f64; 4]]) -> Result<Var> {
    if targets.is_empty() {
        return Ok(zero(g));
    }
    let n = targets.len();
    let t = Tensor::from_vec(&[n, 4], targets.iter().flatten().map(|&v| T::of(v)).collect())?;
    g.smooth_l1_rows(deltas, t, vec![T::one() / T::of(n as f64); n])
}

/// Weighted per-row mean-over-pixels BCE of `(R, ...)` probabilities.
pub fn mask_loss_var<T: Float>(g: &mut Graph<T>, probs: Var, targets: Tensor<T>, weights: &[f64]) -> Result<Var> {
    if weights.is_empty() {
        return Ok(zero(g));
    }
    g.bce_rows(probs, targets, weights.iter().map(|&w| T::of(w)).collect(), T::of(BCE_EPS))
}

/// Consistency between the refined mask and the soft XOR of the two
/// sub-region predictions. With `detach` the merged target carries no
/// gradient.
pub fn cons_loss_var<T: Float>(
    g: &mut Graph<T>,
    refined: Var,
    overlap: Var,
    nonoverlap: Var,
    weights: &[f64],
    detach: bool,
) -> Result<Var> {
    if weights.is_empty() {
        return Ok(zero(g));
    }
    let merged = soft_xor_merge_var(g, overlap, nonoverlap)?;
    let w = weights.iter().map(|&w| T::of(w)).collect();
    if detach {
        let t = g.value(merged).clone();
        g.bce_rows(refined, t, w, T::of(BCE_EPS))
    } else {
        g.bce_rows_var(refined, merged, w, T::of(BCE_EPS))
    }
}

/// `coarse + λ_dec·dec + λ_rmask·rmask + λ_cons·cons` on the graph.
pub fn total_var<T: Float>(
    g: &mut Graph<T>,
    coarse: Var,
    dec: Var,
    rmask: Var,
    cons: Var,
    weights: &LossWeights,
) -> Result<Var> {
    let mut total = coarse;
    for (v, lambda) in [(dec, weights.lambda_dec), (rmask, weights.lambda_rmask), (cons, weights.lambda_cons)] {
        if lambda != 0.0 {
            let scaled = g.scale(v, T::of(lambda));
            total = g.add(total, scaled)?;
        }
    }
    Ok(total)
}

fn scalar(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).data()[0]
}

/// Mean softmax cross-entropy of two-class logits.
pub fn cls_loss(logits: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::invalid("one label per logit row"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    if logits.is_empty() {
        EMPTY_BATCHES.fetch_add(1, Ordering::Relaxed);
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(&[logits.len(), 2], logits.iter().flatten().copied().collect())?);
    let v = cls_loss_var(&mut g, x, labels)?;
    Ok(scalar(&g, v))
}

/// Smooth-L1 regression loss averaged over foreground rows.
pub fn reg_loss(pred: &[[f64; 4]], target: &[[f64; 4]]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::invalid("one target per prediction"));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(&[pred.len(), 4], pred.iter().flatten().copied().collect())?);
    let v = reg_loss_var(&mut g, x, target)?;
    Ok(scalar(&g, v))
}

fn check_dims(p: &SoftMask, t: &BinaryMask) -> Result<()> {
    if (p.height(), p.width()) != t.dims() {
        return Err(Error::ShapeMismatch {
            expected: vec![t.height(), t.width()],
            actual: vec![p.height(), p.width()],
        });
    }
    Ok(())
}

fn stack_soft<'a>(masks: impl Iterator<Item = &'a SoftMask>) -> Result<Tensor<f64>> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut n = 0;
    for m in masks {
        let d = (m.height(), m.width());
        if *dims.get_or_insert(d) != d {
            return Err(Error::invalid("all masks in a batch must share their size"));
        }
        data.extend_from_slice(m.values());
        n += 1;
    }
    let (h, w) = dims.unwrap_or((0, 0));
    Tensor::from_vec(&[n, h, w], data)
}

fn stack_binary<'a>(masks: impl Iterator<Item = &'a BinaryMask>) -> Result<Tensor<f64>> {
    let soft: Vec<SoftMask> = masks.map(BinaryMask::to_soft).collect();
    stack_soft(soft.iter())
}

/// Mean-over-pixels binary cross-entropy with clamped probabilities.
pub fn mask_bce(pred: &SoftMask, target: &BinaryMask) -> Result<f64> {
    check_dims(pred, target)?;
    let mut g = Graph::new();
    let p = g.constant(stack_soft(std::iter::once(pred))?);
    let v = mask_loss_var(&mut g, p, stack_binary(std::iter::once(target))?, &[1.0])?;
    Ok(scalar(&g, v))
}

fn counts_match<A, B>(a: &[Vec<A>], b: &[Vec<B>]) -> Result<Vec<usize>> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::invalid("predictions and targets must pair up per image"));
    }
    Ok(a.iter().map(Vec::len).collect())
}

/// Nested-average BCE over per-image lists of predictions.
fn nested_bce(preds: &[Vec<&SoftMask>], targets: &[Vec<&BinaryMask>]) -> Result<f64> {
    let counts = counts_match(preds, targets)?;
    let weights = nested_weights(&counts);
    if weights.is_empty() {
        return Ok(0.0);
    }
    for (p, t) in preds.iter().flatten().zip(targets.iter().flatten()) {
        check_dims(p, t)?;
    }
    let mut g = Graph::new();
    let p = g.constant(stack_soft(preds.iter().flatten().copied())?);
    let t = stack_binary(targets.iter().flatten().copied())?;
    let v = mask_loss_var(&mut g, p, t, &weights)?;
    Ok(scalar(&g, v))
}

/// Decomposition loss: BCE of the overlap and non-overlap predictions.
/// The outer slices index images, the inner ones instances.
pub fn dec_loss(preds: &[Vec<(SoftMask, SoftMask)>], targets: &[Vec<(BinaryMask, BinaryMask)>]) -> Result<f64> {
    counts_match(preds, targets)?;
    let o_pred: Vec<Vec<&SoftMask>> = preds.iter().map(|v| v.iter().map(|p| &p.0).collect()).collect();
    let n_pred: Vec<Vec<&SoftMask>> = preds.iter().map(|v| v.iter().map(|p| &p.1).collect()).collect();
    let o_tgt: Vec<Vec<&BinaryMask>> = targets.iter().map(|v| v.iter().map(|t| &t.0).collect()).collect();
    let n_tgt: Vec<Vec<&BinaryMask>> = targets.iter().map(|v| v.iter().map(|t| &t.1).collect()).collect();
    Ok(nested_bce(&o_pred, &o_tgt)? + nested_bce(&n_pred, &n_tgt)?)
}

/// Refined-mask loss against the amodal targets.
pub fn rmask_loss(preds: &[Vec<SoftMask>], targets: &[Vec<BinaryMask>]) -> Result<f64> {
    let p: Vec<Vec<&SoftMask>> = preds.iter().map(|v| v.iter().collect()).collect();
    let t: Vec<Vec<&BinaryMask>> = targets.iter().map(|v| v.iter().collect()).collect();
    nested_bce(&p, &t)
}

/// Consistency loss between refined masks and the soft XOR of the
/// predicted sub-regions.
pub fn cons_loss(refined: &[Vec<SoftMask>], parts: &[Vec<(SoftMask, SoftMask)>]) -> Result<f64> {
    let counts = counts_match(refined, parts)?;
    let weights = nested_weights(&counts);
    if weights.is_empty() {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let r = g.constant(stack_soft(refined.iter().flatten())?);
    let o = g.constant(stack_soft(parts.iter().flatten().map(|p| &p.0))?);
    let n = g.constant(stack_soft(parts.iter().flatten().map(|p| &p.1))?);
    if g.shape(r) != g.shape(o) || g.shape(o) != g.shape(n) {
        return Err(Error::invalid("refined and sub-region masks must share their size"));
    }
    let v = cons_loss_var(&mut g, r, o, n, &weights, true)?;
    Ok(scalar(&g, v))
}
