//! Mask-level evaluation: greedy matching, precision-recall, AP and mIoU.
//!
//! Detections are ranked by descending score, then image id, then mask bytes,
//! so reports do not depend on input order. Each detection claims the unmatched
//! ground truth of its image with the highest IoU (lowest index on ties) and is
//! a true positive when that IoU reaches the threshold.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask_algebra::{mask_iou, BinaryMask};

/// Score a detection needs to count towards mIoU.
pub const MIOU_SCORE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub score: f64,
    pub mask: BinaryMask,
    pub image_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub mask: BinaryMask,
    pub image_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchEntry {
    /// Index into the detection slice.
    pub detection: usize,
    pub image_id: usize,
    pub score: f64,
    /// Index into the ground-truth slice.
    pub matched: Option<usize>,
    pub iou: f64,
}

impl MatchEntry {
    pub fn is_tp(&self) -> bool {
        self.matched.is_some()
    }
}

/// Matching result at one IoU threshold, entries in rank order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchTable {
    pub threshold: f64,
    pub entries: Vec<MatchEntry>,
    pub num_gt: usize,
    /// Unmatched ground truths per image id.
    pub false_negatives: BTreeMap<usize, usize>,
}

impl MatchTable {
    pub fn true_positives(&self) -> usize {
        self.entries.iter().filter(|e| e.is_tp()).count()
    }

    pub fn false_positives(&self) -> usize {
        self.entries.len() - self.true_positives()
    }

    pub fn total_false_negatives(&self) -> usize {
        self.false_negatives.values().sum()
    }
}

/// Detection rank order.
fn rank(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&dets[a], &dets[b]);
        db.score
            .total_cmp(&da.score)
            .then(da.image_id.cmp(&db.image_id))
            .then_with(|| da.mask.bits().cmp(db.mask.bits()))
            .then(a.cmp(&b))
    });
    order
}

/// IoU of every detection with every ground truth of the same image.
struct IouCache {
    /// Per detection: (gt index, iou) for gts of its image, gt-index order.
    rows: Vec<Vec<(usize, f64)>>,
}

impl IouCache {
    fn new(dets: &[Detection], gts: &[GroundTruth]) -> Result<Self> {
        let mut by_image: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (g, gt) in gts.iter().enumerate() {
            by_image.entry(gt.image_id).or_default().push(g);
        }
        let rows = dets
            .iter()
            .map(|d| {
                by_image
                    .get(&d.image_id)
                    .map(|gs| gs.iter().map(|&g| Ok((g, mask_iou(&d.mask, &gts[g].mask)?))).collect())
                    .unwrap_or_else(|| Ok(Vec::new()))
            })
            .collect::<Result<_>>()?;
        Ok(IouCache { rows })
    }
}

fn validate(dets: &[Detection], gts: &[GroundTruth]) -> Result<()> {
    if let Some(d) = dets.iter().find(|d| !(0.0..=1.0).contains(&d.score)) {
        return Err(Error::invalid(format!("detection score {} outside [0, 1]", d.score)));
    }
    let mut dims: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (id, m) in gts.iter().map(|g| (g.image_id, &g.mask)).chain(dets.iter().map(|d| (d.image_id, &d.mask))) {
        if *dims.entry(id).or_insert(m.dims()) != m.dims() {
            return Err(Error::invalid(format!("masks of image {id} disagree in size")));
        }
    }
    Ok(())
}

fn match_cached(dets: &[Detection], gts: &[GroundTruth], cache: &IouCache, order: &[usize], threshold: f64) -> MatchTable {
    let mut taken = vec![false; gts.len()];
    let mut entries = Vec::with_capacity(dets.len());
    for &d in order {
        let mut best: Option<(usize, f64)> = None;
        for &(g, v) in &cache.rows[d] {
            if !taken[g] && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        let (matched, iou) = match best {
            Some((g, v)) if v >= threshold && v > 0.0 => {
                taken[g] = true;
                (Some(g), v)
            }
            Some((_, v)) => (None, v),
            None => (None, 0.0),
        };
        entries.push(MatchEntry {
            detection: d,
            image_id: dets[d].image_id,
            score: dets[d].score,
            matched,
            iou,
        });
    }
    let mut false_negatives = BTreeMap::new();
    for (g, gt) in gts.iter().enumerate() {
        let slot = false_negatives.entry(gt.image_id).or_insert(0);
        if !taken[g] {
            *slot += 1;
        }
    }
    MatchTable {
        threshold,
        entries,
        num_gt: gts.len(),
        false_negatives,
    }
}

pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> Result<MatchTable> {
    validate(dets, gts)?;
    let cache = IouCache::new(dets, gts)?;
    Ok(match_cached(dets, gts, &cache, &rank(dets), iou_threshold))
}

/// Cumulative `(recall, precision)` after each ranked detection.
pub fn precision_recall(table: &MatchTable) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(table.entries.len());
    for (k, e) in table.entries.iter().enumerate() {
        tp += e.is_tp() as usize;
        let recall = if table.num_gt == 0 { 0.0 } else { tp as f64 / table.num_gt as f64 };
        curve.push((recall, tp as f64 / (k + 1) as f64));
    }
    curve
}

/// All-point interpolated area under a precision-recall curve.
pub fn average_precision(curve: &[(f64, f64)]) -> f64 {
    let mut rec = vec![0.0];
    let mut prec = vec![0.0];
    for &(r, p) in curve {
        rec.push(r);
        prec.push(p);
    }
    rec.push(1.0);
    prec.push(0.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    for i in 0..rec.len() - 1 {
        if rec[i + 1] > rec[i] {
            ap += (rec[i + 1] - rec[i]) * prec[i + 1];
        }
    }
    ap
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiouMode {
    /// Per-category pixel IoU over {background, worm}, pooled over images.
    #[default]
    Semantic,
    /// Mean over ground truths of the best IoU with any kept detection.
    Instance,
}

/// Image extent for mIoU; images without any instance still count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageInfo {
    pub image_id: usize,
    pub height: usize,
    pub width: usize,
}

fn union_mask(masks: &[&BinaryMask], h: usize, w: usize) -> Result<BinaryMask> {
    let mut acc = BinaryMask::new(h, w)?;
    for m in masks {
        acc = acc.or(m)?;
    }
    Ok(acc)
}

/// Semantic mean IoU over {background, worm}. An empty category scores 0.
pub fn mean_iou(dets: &[Detection], gts: &[GroundTruth], images: &[ImageInfo]) -> Result<f64> {
    validate(dets, gts)?;
    let mut inter = [0usize; 2];
    let mut union = [0usize; 2];
    for info in images {
        let pred: Vec<&BinaryMask> = dets
            .iter()
            .filter(|d| d.image_id == info.image_id && d.score >= MIOU_SCORE_THRESHOLD)
            .map(|d| &d.mask)
            .collect();
        let truth: Vec<&BinaryMask> = gts.iter().filter(|g| g.image_id == info.image_id).map(|g| &g.mask).collect();
        let p = union_mask(&pred, info.height, info.width)?;
        let t = union_mask(&truth, info.height, info.width)?;
        for (a, b) in p.bits().iter().zip(t.bits()) {
            let (a, b) = (*a != 0, *b != 0);
            // category 1 is worm, 0 is background
            for (c, (pa, tb)) in [(!a, !b), (a, b)].into_iter().enumerate() {
                inter[c] += (pa && tb) as usize;
                union[c] += (pa || tb) as usize;
            }
        }
    }
    let iou = |c: usize| if union[c] == 0 { 0.0 } else { inter[c] as f64 / union[c] as f64 };
    Ok((iou(0) + iou(1)) / 2.0)
}

/// Instance-averaged IoU: each ground truth's best IoU with a kept detection.
pub fn instance_mean_iou(dets: &[Detection], gts: &[GroundTruth]) -> Result<f64> {
    validate(dets, gts)?;
    if gts.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for g in gts {
        let mut best: f64 = 0.0;
        for d in dets.iter().filter(|d| d.image_id == g.image_id && d.score >= MIOU_SCORE_THRESHOLD) {
            best = best.max(mask_iou(&d.mask, &g.mask)?);
        }
        sum += best;
    }
    Ok(sum / gts.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub miou: f64,
    pub miou_mode: MiouMode,
    /// Curve at IoU 0.5.
    pub pr_curve: Vec<(f64, f64)>,
    pub ap_per_threshold: Vec<(f64, f64)>,
    pub num_images: usize,
    pub num_gt: usize,
    pub num_detections: usize,
}

/// Full metric suite. `images` lists every evaluated image.
pub fn evaluate(dets: &[Detection], gts: &[GroundTruth], images: &[ImageInfo], miou_mode: MiouMode) -> Result<MetricsReport> {
    validate(dets, gts)?;
    let cache = IouCache::new(dets, gts)?;
    let order = rank(dets);
    let mut per = Vec::new();
    let mut pr50 = Vec::new();
    for t in iou_thresholds() {
        let table = match_cached(dets, gts, &cache, &order, t);
        let curve = precision_recall(&table);
        let ap = if gts.is_empty() { 0.0 } else { average_precision(&curve) };
        if per.is_empty() {
            pr50 = curve;
        }
        per.push((t, ap));
    }
    let ap = per.iter().map(|p| p.1).sum::<f64>() / per.len() as f64;
    let miou = match miou_mode {
        MiouMode::Semantic => mean_iou(dets, gts, images)?,
        MiouMode::Instance => instance_mean_iou(dets, gts)?,
    };
    Ok(MetricsReport {
        ap,
        ap50: per[0].1,
        ap75: per[5].1,
        miou,
        miou_mode,
        pr_curve: pr50,
        ap_per_threshold: per,
        num_images: images.len(),
        num_gt: gts.len(),
        num_detections: dets.len(),
    })
}

impl MetricsReport {
    /// Header and row in the layout of the comparison tables.
    pub fn table_header() -> &'static str {
        "AP\tAP50\tAP75\tmIoU"
    }

    pub fn table_row(&self) -> String {
        format!("{:.4}\t{:.4}\t{:.4}\t{:.4}", self.ap, self.ap50, self.ap75, self.miou)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(n: usize, y0: usize, x0: usize, s: usize) -> BinaryMask {
        BinaryMask::from_fn(n, n, |y, x| (y0..y0 + s).contains(&y) && (x0..x0 + s).contains(&x)).unwrap()
    }

    #[test]
    fn identity_predictions_are_perfect() {
        let gts = vec![
            GroundTruth { mask: square(16, 0, 0, 4), image_id: 0 },
            GroundTruth { mask: square(16, 8, 8, 5), image_id: 0 },
        ];
        let dets: Vec<Detection> = gts.iter().map(|g| Detection { score: 1.0, mask: g.mask.clone(), image_id: 0 }).collect();
        let t = match_detections(&dets, &gts, 0.5).unwrap();
        assert_eq!((t.true_positives(), t.false_positives(), t.total_false_negatives()), (2, 0, 0));
        let r = evaluate(&dets, &gts, &[ImageInfo { image_id: 0, height: 16, width: 16 }], MiouMode::Semantic).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75, r.miou), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn curve_edge_cases() {
        let gts = vec![GroundTruth { mask: square(8, 0, 0, 3), image_id: 0 }];
        assert_eq!(match_detections(&[], &gts, 0.5).unwrap().total_false_negatives(), 1);
        let tp = vec![Detection { score: 0.9, mask: square(8, 0, 0, 3), image_id: 0 }];
        let curve = precision_recall(&match_detections(&tp, &gts, 0.5).unwrap());
        assert_eq!(curve.last(), Some(&(1.0, 1.0)));
        let fp = vec![Detection { score: 0.9, mask: square(8, 5, 5, 3), image_id: 0 }];
        let curve = precision_recall(&match_detections(&fp, &gts, 0.5).unwrap());
        assert_eq!(curve, vec![(0.0, 0.0)]);
        assert_eq!(average_precision(&curve), 0.0);
    }

    #[test]
    fn hand_integrated_envelope() {
        // TP, FP, TP, FP against 4 gts: envelope is 1.0 up to r=0.25, 2/3 up to 0.5
        let curve = [(0.25, 1.0), (0.25, 0.5), (0.5, 2.0 / 3.0), (0.5, 0.5)];
        let expect = 0.25 * 1.0 + 0.25 * (2.0 / 3.0);
        assert!((average_precision(&curve) - expect).abs() < 1e-15);
    }

    #[test]
    fn miou_conventions() {
        let info = [ImageInfo { image_id: 0, height: 4, width: 4 }];
        assert_eq!(mean_iou(&[], &[], &info).unwrap(), 0.5);
        let gts = vec![GroundTruth { mask: square(4, 0, 0, 2), image_id: 0 }];
        // all background: bg IoU 12/16, worm IoU 0
        assert!((mean_iou(&[], &gts, &info).unwrap() - 0.375).abs() < 1e-15);
    }
}
