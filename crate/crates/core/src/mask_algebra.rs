//! Set operations on instance masks.
//!
//! An instance's amodal mask splits into an *overlap* region (pixels shared
//! with at least one other instance) and a *non-overlap* region (the rest).
//! The soft XOR `a + b − 2ab` merges predicted sub-regions back into a whole
//! instance while staying differentiable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Float;

/// Default threshold for turning probabilities into pixels.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Binary `height × width` pixel grid.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BinaryMask({}x{}, {} px)", self.height, self.width, self.count())
    }
}

/// Inclusive-exclusive pixel bounding box `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBox {
    pub fn to_f64(self) -> [f64; 4] {
        [self.x0 as f64, self.y0 as f64, self.x1 as f64, self.y1 as f64]
    }
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("mask dimensions must be at least 1x1"));
        }
        Ok(BinaryMask {
            height,
            width,
            bits: vec![0; height * width],
        })
    }

    /// Builds a mask from row-major values; each must be 0 or 1.
    pub fn from_bits(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(Error::invalid(format!(
                "{} values do not form a {height}x{width} mask",
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("binary mask values must be 0 or 1"));
        }
        Ok(BinaryMask {
            height,
            width,
            bits,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut m = Self::new(height, width)?;
        for y in 0..height {
            for x in 0..width {
                m.bits[y * width + x] = f(y, x) as u8;
            }
        }
        Ok(m)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.bits[y * self.width + x] = on as u8;
    }

    /// Number of set pixels.
    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    /// Tight bounding box of the set pixels, `None` for an empty mask.
    pub fn bbox(&self) -> Option<PixelBox> {
        let mut b: Option<PixelBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    let nb = b.get_or_insert(PixelBox { x0: x, y0: y, x1: x + 1, y1: y + 1 });
                    nb.x0 = nb.x0.min(x);
                    nb.y0 = nb.y0.min(y);
                    nb.x1 = nb.x1.max(x + 1);
                    nb.y1 = nb.y1.max(y + 1);
                }
            }
        }
        b
    }

    fn check_same(&self, other: &BinaryMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.height, self.width],
                actual: vec![other.height, other.width],
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(u8, u8) -> u8) -> Result<BinaryMask> {
        self.check_same(other)?;
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a | b)
    }

    pub fn xor(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a ^ b)
    }

    pub fn and_not(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a & (1 - b))
    }

    pub fn to_soft(&self) -> SoftMask {
        SoftMask {
            height: self.height,
            width: self.width,
            values: self.bits.iter().map(|&b| b as f64).collect(),
        }
    }
}

/// Probability grid with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftMask {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SoftMask {
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::invalid(format!(
                "{} values do not form a {height}x{width} mask",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("soft mask values must lie in [0, 1]"));
        }
        Ok(SoftMask {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::from_values(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Splits each amodal mask into `(overlap, nonoverlap)`, where overlap is the
/// part covered by the union of all *other* masks.
pub fn decompose_instances(masks: &[BinaryMask]) -> Result<Vec<(BinaryMask, BinaryMask)>> {
    let first = masks
        .first()
        .ok_or_else(|| Error::invalid("decompose_instances needs at least one mask"))?;
    for m in masks {
        first.check_same(m)?;
    }
    // per-pixel coverage count; overlap_i = m_i ∧ (count − m_i ≥ 1)
    let mut coverage = vec![0u16; first.bits.len()];
    for m in masks {
        for (c, &b) in coverage.iter_mut().zip(&m.bits) {
            *c += b as u16;
        }
    }
    Ok(masks
        .iter()
        .map(|m| {
            let overlap: Vec<u8> = m
                .bits
                .iter()
                .zip(&coverage)
                .map(|(&b, &c)| (b == 1 && c >= 2) as u8)
                .collect();
            let nonoverlap = m.bits.iter().zip(&overlap).map(|(&b, &o)| b & (1 - o)).collect();
            (
                BinaryMask {
                    height: m.height,
                    width: m.width,
                    bits: overlap,
                },
                BinaryMask {
                    height: m.height,
                    width: m.width,
                    bits: nonoverlap,
                },
            )
        })
        .collect())
}

/// Soft XOR: `o + n − 2·o·n` elementwise.
pub fn soft_xor_merge(o: &SoftMask, n: &SoftMask) -> Result<SoftMask> {
    if (o.height, o.width) != (n.height, n.width) {
        return Err(Error::ShapeMismatch {
            expected: vec![o.height, o.width],
            actual: vec![n.height, n.width],
        });
    }
    let values = o
        .values
        .iter()
        .zip(&n.values)
        .map(|(&a, &b)| soft_xor(a, b))
        .collect();
    Ok(SoftMask {
        height: o.height,
        width: o.width,
        values,
    })
}

/// Scalar soft XOR, clamped to `[0, 1]` against rounding.
pub fn soft_xor<T: Float>(a: T, b: T) -> T {
    let two = T::one() + T::one();
    let v = a + b - two * a * b;
    v.max(T::zero()).min(T::one())
}

/// Differentiable soft XOR on graph variables of equal shape.
pub fn soft_xor_merge_var<T: Float>(g: &mut Graph<T>, o: Var, n: Var) -> Result<Var> {
    let sum = g.add(o, n)?;
    let prod = g.mul(o, n)?;
    let twice = g.scale(prod, T::of(2.0));
    g.sub(sum, twice)
}

/// Pixel is set iff its value is `>= threshold`.
pub fn binarize(m: &SoftMask, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!(
            "binarization threshold {threshold} outside (0, 1)"
        )));
    }
    Ok(BinaryMask {
        height: m.height,
        width: m.width,
        bits: m.values.iter().map(|&v| (v >= threshold) as u8).collect(),
    })
}

/// Intersection over union; two empty masks score 0.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_same(b)?;
    let (inter, union) = a.bits.iter().zip(&b.bits).fold((0usize, 0usize), |(i, u), (&x, &y)| {
        (i + (x & y) as usize, u + (x | y) as usize)
    });
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}
