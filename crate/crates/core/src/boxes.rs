//! Axis-aligned boxes `[x0, y0, x1, y1]` in image pixels (edges, not centres).

/// Box in continuous pixel coordinates.
pub type Bbox = [f64; 4];

/// Largest log-scale change allowed when decoding, as in common detectors.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

pub fn width(b: &Bbox) -> f64 {
    b[2] - b[0]
}

pub fn height(b: &Bbox) -> f64 {
    b[3] - b[1]
}

pub fn area(b: &Bbox) -> f64 {
    width(b).max(0.0) * height(b).max(0.0)
}

pub fn is_valid(b: &Bbox) -> bool {
    b.iter().all(|v| v.is_finite()) && b[2] > b[0] && b[3] > b[1]
}

pub fn iou(a: &Bbox, b: &Bbox) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn clip(b: &Bbox, height: usize, width: usize) -> Bbox {
    let (w, h) = (width as f64, height as f64);
    [b[0].clamp(0.0, w), b[1].clamp(0.0, h), b[2].clamp(0.0, w), b[3].clamp(0.0, h)]
}

/// Regression target that maps `anchor` onto `target`, scaled by `weights`.
pub fn encode(anchor: &Bbox, target: &Bbox, weights: [f64; 4]) -> [f64; 4] {
    let (aw, ah) = (width(anchor), height(anchor));
    let (ax, ay) = (anchor[0] + 0.5 * aw, anchor[1] + 0.5 * ah);
    let (tw, th) = (width(target), height(target));
    let (tx, ty) = (target[0] + 0.5 * tw, target[1] + 0.5 * th);
    [
        weights[0] * (tx - ax) / aw,
        weights[1] * (ty - ay) / ah,
        weights[2] * (tw / aw).ln(),
        weights[3] * (th / ah).ln(),
    ]
}

/// Inverse of [`encode`]; scale deltas are clamped to [`MAX_LOG_SCALE`].
pub fn decode(anchor: &Bbox, delta: [f64; 4], weights: [f64; 4]) -> Bbox {
    let (aw, ah) = (width(anchor), height(anchor));
    let (ax, ay) = (anchor[0] + 0.5 * aw, anchor[1] + 0.5 * ah);
    let dx = delta[0] / weights[0];
    let dy = delta[1] / weights[1];
    let dw = (delta[2] / weights[2]).min(MAX_LOG_SCALE);
    let dh = (delta[3] / weights[3]).min(MAX_LOG_SCALE);
    let (cx, cy) = (ax + dx * aw, ay + dy * ah);
    let (w, h) = (aw * dw.exp(), ah * dh.exp());
    [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; ties keep the lower index first.
pub fn nms(boxes: &[Bbox], scores: &[f64], iou_threshold: f64, max_keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.len() >= max_keep {
            break;
        }
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_cases() {
        let a = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &[2.0, 2.0, 3.0, 3.0]), 0.0);
        assert!((iou(&a, &[1.0, 0.0, 3.0, 2.0]) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn nms_suppresses_duplicates() {
        let boxes = [[0.0, 0.0, 10.0, 10.0], [1.0, 1.0, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0]];
        assert_eq!(nms(&boxes, &[0.9, 0.8, 0.7], 0.5, 10), vec![0, 2]);
        assert_eq!(nms(&boxes, &[0.9, 0.8, 0.7], 0.5, 1), vec![0]);
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(
            x0 in 0.0..50.0f64, y0 in 0.0..50.0f64, w in 1.0..60.0f64, h in 1.0..60.0f64,
            tx in 0.0..50.0f64, ty in 0.0..50.0f64, tw in 1.0..60.0f64, th in 1.0..60.0f64,
        ) {
            let a = [x0, y0, x0 + w, y0 + h];
            let t = [tx, ty, tx + tw, ty + th];
            let wts = [10.0, 10.0, 5.0, 5.0];
            let back = decode(&a, encode(&a, &t, wts), wts);
            for k in 0..4 {
                prop_assert!((back[k] - t[k]).abs() < 1e-9);
            }
        }
    }
}
