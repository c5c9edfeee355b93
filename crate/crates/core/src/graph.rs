//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of that scalar with respect to every node that requires one.
//! Convolutions lower to im2col + gemm, so the dense kernels of the network
//! all end up in `matrixmultiply`.

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Float, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    /// Stride 1, padding that preserves spatial size for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvGeom {
            stride: 1,
            pad: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.pad - self.dilation * (kernel - 1) - 1) / self.stride + 1
    }
}

/// One output item of a separable resampling: output = `wy · x[src] · wxᵀ`
/// per channel. `wy` is `out_h × in_h`, `wx` is `out_w × in_w`; rows/columns
/// of the input outside `y_range`/`x_range` carry zero weight.
#[derive(Clone, Debug)]
pub struct ResampleItem<T> {
    pub src: usize,
    pub wy: Tensor<T>,
    pub wx: Tensor<T>,
    pub y_range: (usize, usize),
    pub x_range: (usize, usize),
}

impl<T: Float> ResampleItem<T> {
    /// Builds an item from dense weight matrices, trimming the support.
    pub fn new(src: usize, wy: Tensor<T>, wx: Tensor<T>) -> Self {
        let support = |m: &Tensor<T>| {
            let (rows, cols) = (m.shape()[0], m.shape()[1]);
            let mut lo = cols;
            let mut hi = 0;
            for r in 0..rows {
                for c in 0..cols {
                    if m.data()[r * cols + c] != T::zero() {
                        lo = lo.min(c);
                        hi = hi.max(c + 1);
                    }
                }
            }
            if lo >= hi {
                (0, 0)
            } else {
                (lo, hi)
            }
        };
        let y_range = support(&wy);
        let x_range = support(&wx);
        ResampleItem {
            src,
            wy,
            wx,
            y_range,
            x_range,
        }
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    BroadcastAdd(Var, Var),
    BroadcastMul(Var, Var),
    Affine(Var, T),
    Sigmoid(Var),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Deconv2x2 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    NormalizeChannels {
        x: Var,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    GroupNorm {
        x: Var,
        /// One entry per (sample, group).
        inv_std: Vec<T>,
    },
    GlobalAvgPool(Var),
    AvgPool2(Var),
    Upsample2x(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Resample {
        x: Var,
        items: Vec<ResampleItem<T>>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Sum(Var),
    BceRows {
        p: Var,
        target: Tensor<T>,
        weights: Vec<T>,
        eps: T,
    },
    BceRowsVar {
        p: Var,
        target: Var,
        weights: Vec<T>,
        eps: T,
    },
    SoftmaxCeRows {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<T>,
    },
    SmoothL1Rows {
        x: Var,
        target: Tensor<T>,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Recording tape of tensor operations.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Largest im2col buffer materialised at once, in elements.
const COL_BUDGET: usize = 1 << 24;

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: gradients will be reported for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the current value of `v` into a new constant, cutting the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                expected: self.shape(a).to_vec(),
                actual: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    fn broadcast_strides(&self, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa.iter().zip(sb).any(|(&x, &y)| y != 1 && y != x) {
            return Err(Error::invalid(format!(
                "cannot broadcast {sb:?} onto {sa:?}"
            )));
        }
        Ok(broadcast_strides(sa, sb))
    }

    /// `a + b` where every axis of `b` either matches `a` or has size 1.
    pub fn broadcast_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let strides = self.broadcast_strides(a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = ta.clone();
        for_each_broadcast(ta.shape(), &strides, |ia, ib| {
            out.data_mut()[ia] += tb.data()[ib];
        });
        Ok(self.push(out, Op::BroadcastAdd(a, b), &[a, b]))
    }

    /// `a ⊙ b` where every axis of `b` either matches `a` or has size 1.
    pub fn broadcast_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let strides = self.broadcast_strides(a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = ta.clone();
        for_each_broadcast(ta.shape(), &strides, |ia, ib| {
            out.data_mut()[ia] *= tb.data()[ib];
        });
        Ok(self.push(out, Op::BroadcastMul(a, b), &[a, b]))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        let v = self.value(a).map(|x| scale * x + shift);
        self.push(v, Op::Affine(a, scale), &[a])
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -T::one(), T::one())
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.affine(a, s, T::zero())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// 2-D convolution of `(N, Cin, H, W)` with `(Cout, Cin, kh, kw)` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::invalid(format!(
                "conv2d input {xs:?} incompatible with weight {ws:?}"
            )));
        }
        if let Some(b) = b {
            self.value(b).ensure_shape(&[ws[0]])?;
        }
        let span_h = geom.dilation * (ws[2] - 1) + 1;
        let span_w = geom.dilation * (ws[3] - 1) + 1;
        if xs[2] + 2 * geom.pad < span_h || xs[3] + 2 * geom.pad < span_w {
            return Err(Error::invalid("conv2d kernel larger than padded input"));
        }
        let out = conv_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            geom,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Transposed convolution with a 2×2 kernel and stride 2 (doubles H and W).
    /// Weights are `(Cin, Cout, 2, 2)`.
    pub fn deconv2x2(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] || ws[2] != 2 || ws[3] != 2 {
            return Err(Error::invalid(format!(
                "deconv2x2 input {xs:?} incompatible with weight {ws:?}"
            )));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ws[1];
        let hw = h * wd;
        let wmat = self.value(w).data();
        let mut out = Tensor::zeros(&[n, cout, 2 * h, 2 * wd]);
        let mut tmp = vec![T::zero(); cout * 4 * hw];
        for i in 0..n {
            let xi = self.value(x).item(i);
            matmul_into(cout * 4, cin, hw, wmat, true, xi, false, T::zero(), &mut tmp);
            let oi = &mut out.data_mut()[i * cout * 4 * hw..(i + 1) * cout * 4 * hw];
            for co in 0..cout {
                let bias = b.map_or(T::zero(), |b| self.value(b).data()[co]);
                for k in 0..4 {
                    let (ky, kx) = (k / 2, k % 2);
                    let row = &tmp[(co * 4 + k) * hw..(co * 4 + k + 1) * hw];
                    for y in 0..h {
                        for xx in 0..wd {
                            oi[(co * 2 * h + 2 * y + ky) * 2 * wd + 2 * xx + kx] =
                                row[y * wd + xx] + bias;
                        }
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Deconv2x2 { x, w, b }, &inputs))
    }

    /// `x · wᵀ + b` for `x: (N, K)`, `w: (M, K)`, `b: (M)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::invalid(format!(
                "linear input {xs:?} incompatible with weight {ws:?}"
            )));
        }
        let (n, k, m) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(&[n, m]);
        matmul_into(
            n,
            k,
            m,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            T::zero(),
            out.data_mut(),
        );
        if let Some(b) = b {
            let bias = self.value(b);
            bias.ensure_shape(&[m])?;
            for row in out.data_mut().chunks_mut(m) {
                for (o, &bv) in row.iter_mut().zip(bias.data()) {
                    *o += bv;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    /// `(x - mean[c]) * inv_std[c]` along axis 1, with constant statistics.
    pub fn normalize_channels(&mut self, x: Var, mean: &[T], inv_std: &[T]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || shape[1] != mean.len() || mean.len() != inv_std.len() {
            return Err(Error::invalid("normalize_channels statistics length mismatch"));
        }
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / inner) % c;
            *v = (*v - mean[ch]) * inv_std[ch];
        }
        Ok(self.push(
            out,
            Op::NormalizeChannels {
                x,
                inv_std: inv_std.to_vec(),
            },
            &[x],
        ))
    }

    /// Normalises `(N, C)` with its own per-column batch mean and biased
    /// variance. Returns the output and the batch statistics.
    pub fn batch_norm(&mut self, x: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let t = self.value(x);
        if t.shape().len() != 2 || t.shape()[0] < 2 {
            return Err(Error::invalid("batch_norm expects (N, C) with N >= 2"));
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let inv_n = T::one() / T::of(n as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for row in t.data().chunks(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v * inv_n;
            }
        }
        for row in t.data().chunks(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d * inv_n;
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let v = self.push(out, Op::BatchNorm { x, inv_std }, &[x]);
        Ok((v, mean, var))
    }

    /// Normalises `(N, C, ...)` over each sample's channel groups with the
    /// group's own mean and biased variance. No affine part.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: T) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        if shape.len() < 2 || groups == 0 || !shape[1].is_multiple_of(groups) {
            return Err(Error::invalid(format!("group_norm: {groups} groups do not divide {shape:?}")));
        }
        let m = t.numel() / (shape[0] * groups);
        let inv_m = T::one() / T::of(m as f64);
        let mut out = t.clone();
        let mut inv_std = Vec::with_capacity(shape[0] * groups);
        for chunk in out.data_mut().chunks_mut(m) {
            let mean = chunk.iter().copied().sum::<T>() * inv_m;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
            let is = T::one() / (var + eps).sqrt();
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        Ok(self.push(out, Op::GroupNorm { x, inv_std }, &[x]))
    }

    /// `(N, C, H, W) -> (N, C)` mean over space.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 4 {
            return Err(Error::invalid("global_avg_pool expects rank 4"));
        }
        let (n, c, h, w) = t.dims4();
        let inv = T::one() / T::of((h * w) as f64);
        let data = t.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::from_vec(&[n, c], data)?;
        Ok(self.push(out, Op::GlobalAvgPool(x), &[x]))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 4 || !t.shape()[2].is_multiple_of(2) || !t.shape()[3].is_multiple_of(2) {
            return Err(Error::invalid("avg_pool2 expects rank 4 with even H, W"));
        }
        let (n, c, h, w) = t.dims4();
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::of(0.25);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        for p in 0..n * c {
            let src = &t.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data_mut()[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    let s = src[2 * y * w + 2 * xx]
                        + src[2 * y * w + 2 * xx + 1]
                        + src[(2 * y + 1) * w + 2 * xx]
                        + src[(2 * y + 1) * w + 2 * xx + 1];
                    dst[y * wo + xx] = s * quarter;
                }
            }
        }
        Ok(self.push(out, Op::AvgPool2(x), &[x]))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 4 {
            return Err(Error::invalid("upsample2x expects rank 4"));
        }
        let (n, c, h, w) = t.dims4();
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        for p in 0..n * c {
            let src = &t.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data_mut()[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(out, Op::Upsample2x(x), &[x]))
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat axis out of range"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::ShapeMismatch {
                    expected: first.clone(),
                    actual: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Separable linear resampling of batch items of a `(N, C, H, W)` input.
    /// Produces `(items.len(), C, out_h, out_w)`.
    pub fn resample(&mut self, x: Var, items: Vec<ResampleItem<T>>) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 4 {
            return Err(Error::invalid("resample expects rank 4"));
        }
        let (n, c, h, w) = t.dims4();
        let first = items.first().ok_or_else(|| Error::invalid("resample of nothing"))?;
        let (ho, wo) = (first.wy.shape()[0], first.wx.shape()[0]);
        for it in &items {
            if it.src >= n
                || it.wy.shape() != [ho, h]
                || it.wx.shape() != [wo, w]
            {
                return Err(Error::invalid("resample item does not fit the input"));
            }
        }
        let mut out = Tensor::zeros(&[items.len(), c, ho, wo]);
        let mut rowbuf = vec![T::zero(); h * wo];
        for (r, it) in items.iter().enumerate() {
            let (y0, y1) = it.y_range;
            let (x0, x1) = it.x_range;
            if y1 <= y0 || x1 <= x0 {
                continue;
            }
            let (hs, ws) = (y1 - y0, x1 - x0);
            let src = t.item(it.src);
            let dst = &mut out.data_mut()[r * c * ho * wo..(r + 1) * c * ho * wo];
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                // rows y0..y1 of the plane restricted to x0..x1, times wx_subᵀ
                T::gemm(
                    hs,
                    ws,
                    wo,
                    T::one(),
                    &plane[y0 * w + x0..],
                    w as isize,
                    1,
                    &it.wx.data()[x0..],
                    1,
                    w as isize,
                    T::zero(),
                    &mut rowbuf,
                    wo as isize,
                    1,
                );
                T::gemm(
                    ho,
                    hs,
                    wo,
                    T::one(),
                    &it.wy.data()[y0..],
                    h as isize,
                    1,
                    &rowbuf,
                    wo as isize,
                    1,
                    T::zero(),
                    &mut dst[ch * ho * wo..(ch + 1) * ho * wo],
                    wo as isize,
                    1,
                );
            }
        }
        Ok(self.push(out, Op::Resample { x, items }, &[x]))
    }

    /// Picks flat elements of `x` into a tensor of `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if index.iter().any(|&i| i >= t.numel()) {
            return Err(Error::invalid("gather index out of range"));
        }
        let data = index.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.push(out, Op::Gather { x, index }, &[x]))
    }

    /// `Σ_r w_r · mean_j BCE(p_rj, t_rj)` with probabilities clamped to
    /// `[eps, 1-eps]`. The first axis indexes rows.
    pub fn bce_rows(&mut self, p: Var, target: Tensor<T>, weights: Vec<T>, eps: T) -> Result<Var> {
        let tp = self.value(p);
        if tp.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                expected: tp.shape().to_vec(),
                actual: target.shape().to_vec(),
            });
        }
        let rows = tp.shape()[0];
        if weights.len() != rows {
            return Err(Error::invalid("bce_rows needs one weight per row"));
        }
        let per = tp.numel() / rows.max(1);
        let inv = T::one() / T::of(per.max(1) as f64);
        let mut total = T::zero();
        for r in 0..rows {
            let mut s = T::zero();
            for j in r * per..(r + 1) * per {
                let pc = clamp(tp.data()[j], eps, T::one() - eps);
                let y = target.data()[j];
                s -= y * pc.ln() + (T::one() - y) * (T::one() - pc).ln();
            }
            total += weights[r] * s * inv;
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::BceRows {
                p,
                target,
                weights,
                eps,
            },
            &[p],
        ))
    }

    /// [`Graph::bce_rows`] with a target that is itself a graph value and
    /// receives gradients.
    pub fn bce_rows_var(&mut self, p: Var, target: Var, weights: Vec<T>, eps: T) -> Result<Var> {
        let t = self.value(target).clone();
        let loss = self.bce_rows(p, t, weights.clone(), eps)?;
        let value = self.value(loss).clone();
        self.nodes.pop();
        Ok(self.push(value, Op::BceRowsVar { p, target, weights, eps }, &[p, target]))
    }

    /// `Σ_r w_r · CE(softmax(logits_r), label_r)`.
    pub fn softmax_ce_rows(&mut self, logits: Var, labels: Vec<usize>, weights: Vec<T>) -> Result<Var> {
        let t = self.value(logits);
        if t.shape().len() != 2 || t.shape()[0] != labels.len() || weights.len() != labels.len() {
            return Err(Error::invalid("softmax_ce_rows shape mismatch"));
        }
        let classes = t.shape()[1];
        if labels.iter().any(|&l| l >= classes) {
            return Err(Error::invalid("label out of range"));
        }
        let mut total = T::zero();
        for (r, row) in t.data().chunks(classes).enumerate() {
            total += weights[r] * (log_sum_exp(row) - row[labels[r]]);
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::SoftmaxCeRows {
                logits,
                labels,
                weights,
            },
            &[logits],
        ))
    }

    /// `Σ_r w_r · Σ_j smoothL1(x_rj - t_rj)`.
    pub fn smooth_l1_rows(&mut self, x: Var, target: Tensor<T>, weights: Vec<T>) -> Result<Var> {
        let t = self.value(x);
        if t.shape() != target.shape() || t.shape().len() != 2 || weights.len() != t.shape()[0] {
            return Err(Error::invalid("smooth_l1_rows shape mismatch"));
        }
        let d = t.shape()[1];
        let mut total = T::zero();
        for r in 0..t.shape()[0] {
            let mut s = T::zero();
            for j in r * d..(r + 1) * d {
                s += smooth_l1(t.data()[j] - target.data()[j]);
            }
            total += weights[r] * s;
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::SmoothL1Rows { x, target, weights },
            &[x],
        ))
    }

    /// Reverse-mode sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            // keep intermediate grads out of memory; leaves retain theirs
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = zip(g, self.value(*b), |x, y| x * y);
                    self.accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = zip(g, self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::BroadcastAdd(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    let tb = self.value(*b);
                    let strides = broadcast_strides(g.shape(), tb.shape());
                    let mut db = Tensor::zeros(tb.shape());
                    for_each_broadcast(g.shape(), &strides, |ia, ib| {
                        db.data_mut()[ib] += g.data()[ia];
                    });
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BroadcastMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let strides = broadcast_strides(ta.shape(), tb.shape());
                if self.wants(*a) {
                    let mut da = g.clone();
                    for_each_broadcast(ta.shape(), &strides, |ia, ib| {
                        da.data_mut()[ia] *= tb.data()[ib];
                    });
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(tb.shape());
                    for_each_broadcast(ta.shape(), &strides, |ia, ib| {
                        db.data_mut()[ib] += g.data()[ia] * ta.data()[ia];
                    });
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Affine(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::Sigmoid(a) => {
                let d = zip(g, out, |gv, y| gv * y * (T::one() - y));
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let d = zip(g, self.value(*a), |gv, x| if x > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, *a, d);
            }
            Op::Reshape(a) => {
                let d = g.clone().reshaped(self.shape(*a)).expect("reshape grad");
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let d = Tensor::full(self.shape(*a), g.data()[0]);
                self.accumulate(grads, *a, d);
            }
            Op::Conv2d { x, w, b, geom } => {
                if let Some(b) = b {
                    if self.wants(*b) {
                        let (n, cout, ho, wo) = g.dims4();
                        let mut db = Tensor::zeros(&[cout]);
                        for i in 0..n {
                            for co in 0..cout {
                                let s: T = g.data()[(i * cout + co) * ho * wo..(i * cout + co + 1) * ho * wo]
                                    .iter()
                                    .copied()
                                    .sum();
                                db.data_mut()[co] += s;
                            }
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
                let (dx, dw) = conv_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *geom,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::Deconv2x2 { x, w, b } => {
                let tx = self.value(*x);
                let tw = self.value(*w);
                let (n, cin, h, wd) = tx.dims4();
                let cout = tw.shape()[1];
                let hw = h * wd;
                let mut gathered = vec![T::zero(); cout * 4 * hw];
                let mut dw = Tensor::zeros(tw.shape());
                let mut dx = Tensor::zeros(tx.shape());
                let mut db = vec![T::zero(); cout];
                for i in 0..n {
                    let gi = g.item(i);
                    for co in 0..cout {
                        for k in 0..4 {
                            let (ky, kx) = (k / 2, k % 2);
                            for y in 0..h {
                                for xx in 0..wd {
                                    let v = gi[(co * 2 * h + 2 * y + ky) * 2 * wd + 2 * xx + kx];
                                    gathered[(co * 4 + k) * hw + y * wd + xx] = v;
                                    db[co] += v;
                                }
                            }
                        }
                    }
                    if self.wants(*w) {
                        matmul_into(cin, hw, cout * 4, tx.item(i), false, &gathered, true, T::one(), dw.data_mut());
                    }
                    if self.wants(*x) {
                        let dxi = &mut dx.data_mut()[i * cin * hw..(i + 1) * cin * hw];
                        matmul_into(cin, cout * 4, hw, tw.data(), false, &gathered, false, T::zero(), dxi);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, Tensor::from_vec(&[cout], db).expect("bias"));
                }
            }
            Op::Linear { x, w, b } => {
                let tx = self.value(*x);
                let tw = self.value(*w);
                let (n, k) = (tx.shape()[0], tx.shape()[1]);
                let m = tw.shape()[0];
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(tx.shape());
                    matmul_into(n, m, k, g.data(), false, tw.data(), false, T::zero(), dx.data_mut());
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = Tensor::zeros(tw.shape());
                    matmul_into(m, n, k, g.data(), true, tx.data(), false, T::zero(), dw.data_mut());
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    let mut db = Tensor::zeros(&[m]);
                    for row in g.data().chunks(m) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::NormalizeChannels { x, inv_std } => {
                let shape = g.shape();
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                let mut d = g.clone();
                for (i, v) in d.data_mut().iter_mut().enumerate() {
                    *v *= inv_std[(i / inner) % c];
                }
                self.accumulate(grads, *x, d);
            }
            Op::BatchNorm { x, inv_std } => {
                // out holds x̂; dx = inv_std/N (N dy - Σdy - x̂ Σ(dy x̂))
                let c = inv_std.len();
                let n = g.shape()[0];
                let nf = T::of(n as f64);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (gr, xr) in g.data().chunks(c).zip(out.data().chunks(c)) {
                    for j in 0..c {
                        sum_g[j] += gr[j];
                        sum_gx[j] += gr[j] * xr[j];
                    }
                }
                let mut d = g.clone();
                for (dr, xr) in d.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                    for j in 0..c {
                        dr[j] = inv_std[j] / nf * (nf * dr[j] - sum_g[j] - xr[j] * sum_gx[j]);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::GroupNorm { x, inv_std } => {
                let m = g.numel() / inv_std.len();
                let mf = T::of(m as f64);
                let mut d = g.clone();
                for ((dr, xr), &is) in d.data_mut().chunks_mut(m).zip(out.data().chunks(m)).zip(inv_std) {
                    let sum_g = dr.iter().copied().sum::<T>();
                    let sum_gx = dr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>();
                    for (dv, &xv) in dr.iter_mut().zip(xr) {
                        *dv = is / mf * (mf * *dv - sum_g - xv * sum_gx);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::GlobalAvgPool(x) => {
                let tx = self.value(*x);
                let (_, _, h, w) = tx.dims4();
                let inv = T::one() / T::of((h * w) as f64);
                let mut d = Tensor::zeros(tx.shape());
                for (p, chunk) in d.data_mut().chunks_mut(h * w).enumerate() {
                    let v = g.data()[p] * inv;
                    chunk.iter_mut().for_each(|e| *e = v);
                }
                self.accumulate(grads, *x, d);
            }
            Op::AvgPool2(x) => {
                let tx = self.value(*x);
                let (n, c, h, w) = tx.dims4();
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::of(0.25);
                let mut d = Tensor::zeros(tx.shape());
                for p in 0..n * c {
                    let src = &g.data()[p * ho * wo..(p + 1) * ho * wo];
                    let dst = &mut d.data_mut()[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[y * w + xx] = src[(y / 2) * wo + xx / 2] * quarter;
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Upsample2x(x) => {
                let tx = self.value(*x);
                let (n, c, h, w) = tx.dims4();
                let mut d = Tensor::zeros(tx.shape());
                for p in 0..n * c {
                    let src = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut d.data_mut()[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Concat { parts, axis } => {
                let shape = g.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let chunk = ps[*axis] * inner;
                    if self.wants(p) {
                        let mut data = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            data.extend_from_slice(&g.data()[o * total + offset..o * total + offset + chunk]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(&ps, data).expect("concat grad"));
                    }
                    offset += chunk;
                }
            }
            Op::Resample { x, items } => {
                let tx = self.value(*x);
                let (_, c, h, w) = tx.dims4();
                let (ho, wo) = (g.shape()[2], g.shape()[3]);
                let mut dx = Tensor::zeros(tx.shape());
                let mut colbuf = vec![T::zero(); h * wo];
                for (r, it) in items.iter().enumerate() {
                    let (y0, y1) = it.y_range;
                    let (x0, x1) = it.x_range;
                    if y1 <= y0 || x1 <= x0 {
                        continue;
                    }
                    let (hs, ws) = (y1 - y0, x1 - x0);
                    let gi = g.item(r);
                    let base = it.src * c * h * w;
                    for ch in 0..c {
                        let gplane = &gi[ch * ho * wo..(ch + 1) * ho * wo];
                        // wy_subᵀ · dY
                        T::gemm(
                            hs,
                            ho,
                            wo,
                            T::one(),
                            &it.wy.data()[y0..],
                            1,
                            h as isize,
                            gplane,
                            wo as isize,
                            1,
                            T::zero(),
                            &mut colbuf,
                            wo as isize,
                            1,
                        );
                        let plane = &mut dx.data_mut()[base + ch * h * w..base + (ch + 1) * h * w];
                        T::gemm(
                            hs,
                            wo,
                            ws,
                            T::one(),
                            &colbuf,
                            wo as isize,
                            1,
                            &it.wx.data()[x0..],
                            w as isize,
                            1,
                            T::one(),
                            &mut plane[y0 * w + x0..],
                            w as isize,
                            1,
                        );
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Gather { x, index } => {
                let mut d = Tensor::zeros(self.shape(*x));
                for (k, &i) in index.iter().enumerate() {
                    d.data_mut()[i] += g.data()[k];
                }
                self.accumulate(grads, *x, d);
            }
            Op::BceRows {
                p,
                target,
                weights,
                eps,
            } => {
                let tp = self.value(*p);
                let rows = tp.shape()[0];
                let per = tp.numel() / rows.max(1);
                let inv = T::one() / T::of(per.max(1) as f64);
                let g0 = g.data()[0];
                let mut d = Tensor::zeros(tp.shape());
                for r in 0..rows {
                    let scale = g0 * weights[r] * inv;
                    for j in r * per..(r + 1) * per {
                        // clamp is straight-through: the derivative is taken at the clamped point
                        let pc = clamp(tp.data()[j], *eps, T::one() - *eps);
                        let y = target.data()[j];
                        d.data_mut()[j] = scale * (-y / pc + (T::one() - y) / (T::one() - pc));
                    }
                }
                self.accumulate(grads, *p, d);
            }
            Op::BceRowsVar { p, target, weights, eps } => {
                let tp = self.value(*p);
                let tt = self.value(*target);
                let rows = tp.shape()[0];
                let per = tp.numel() / rows.max(1);
                let inv = T::one() / T::of(per.max(1) as f64);
                let g0 = g.data()[0];
                let mut dp = Tensor::zeros(tp.shape());
                let mut dt = Tensor::zeros(tp.shape());
                for r in 0..rows {
                    let scale = g0 * weights[r] * inv;
                    for j in r * per..(r + 1) * per {
                        let pc = clamp(tp.data()[j], *eps, T::one() - *eps);
                        let y = tt.data()[j];
                        dp.data_mut()[j] = scale * (-y / pc + (T::one() - y) / (T::one() - pc));
                        dt.data_mut()[j] = scale * ((T::one() - pc).ln() - pc.ln());
                    }
                }
                self.accumulate(grads, *p, dp);
                self.accumulate(grads, *target, dt);
            }
            Op::SoftmaxCeRows {
                logits,
                labels,
                weights,
            } => {
                let t = self.value(*logits);
                let classes = t.shape()[1];
                let g0 = g.data()[0];
                let mut d = Tensor::zeros(t.shape());
                for (r, row) in t.data().chunks(classes).enumerate() {
                    let lse = log_sum_exp(row);
                    for k in 0..classes {
                        let p = (row[k] - lse).exp();
                        let y = if k == labels[r] { T::one() } else { T::zero() };
                        d.data_mut()[r * classes + k] = g0 * weights[r] * (p - y);
                    }
                }
                self.accumulate(grads, *logits, d);
            }
            Op::SmoothL1Rows { x, target, weights } => {
                let t = self.value(*x);
                let dcols = t.shape()[1];
                let g0 = g.data()[0];
                let mut d = Tensor::zeros(t.shape());
                for r in 0..t.shape()[0] {
                    for j in r * dcols..(r + 1) * dcols {
                        let diff = t.data()[j] - target.data()[j];
                        d.data_mut()[j] = g0 * weights[r] * clamp(diff, -T::one(), T::one());
                    }
                }
                self.accumulate(grads, *x, d);
            }
        }
    }
}

pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn clamp<T: Float>(x: T, lo: T, hi: T) -> T {
    if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    }
}

pub(crate) fn smooth_l1<T: Float>(d: T) -> T {
    let a = d.abs();
    if a < T::one() {
        T::of(0.5) * d * d
    } else {
        a - T::of(0.5)
    }
}

pub(crate) fn log_sum_exp<T: Float>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

fn zip<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

fn broadcast_strides(full: &[usize], small: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; small.len()];
    let mut acc = 1;
    for i in (0..small.len()).rev() {
        strides[i] = if small[i] == 1 && full[i] != 1 { 0 } else { acc };
        acc *= small[i];
    }
    strides
}

fn for_each_broadcast(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut ib = 0usize;
    for ia in 0..total {
        f(ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ib += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            ib -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims<T: Float>(x: &Tensor<T>, w: &Tensor<T>, geom: ConvGeom) -> ConvDims {
    let (n, cin, h, wd) = x.dims4();
    let (cout, _, kh, kw) = w.dims4();
    ConvDims {
        n,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        ho: geom.out_size(h, kh),
        wo: geom.out_size(wd, kw),
    }
}

fn is_pointwise(d: &ConvDims, geom: ConvGeom) -> bool {
    d.kh == 1 && d.kw == 1 && geom.stride == 1 && geom.pad == 0
}

/// Fills `col` (`cin·kh·kw × items·ho·wo`) for batch items `start..start+items`.
fn im2col<T: Float>(x: &Tensor<T>, d: &ConvDims, geom: ConvGeom, start: usize, items: usize, col: &mut [T]) {
    let l = items * d.ho * d.wo;
    for ci in 0..d.cin {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let dst = &mut col[row * l..(row + 1) * l];
                for it in 0..items {
                    let plane = &x.item(start + it)[ci * d.h * d.w..(ci + 1) * d.h * d.w];
                    for oy in 0..d.ho {
                        let iy = (oy * geom.stride + ky * geom.dilation) as isize - geom.pad as isize;
                        let out = &mut dst[(it * d.ho + oy) * d.wo..(it * d.ho + oy + 1) * d.wo];
                        if iy < 0 || iy >= d.h as isize {
                            out.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * geom.stride + kx * geom.dilation) as isize - geom.pad as isize;
                            *o = if ix < 0 || ix >= d.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(col: &[T], d: &ConvDims, geom: ConvGeom, start: usize, items: usize, dx: &mut Tensor<T>) {
    let l = items * d.ho * d.wo;
    let item_len = d.cin * d.h * d.w;
    for ci in 0..d.cin {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let src = &col[row * l..(row + 1) * l];
                for it in 0..items {
                    let base = (start + it) * item_len + ci * d.h * d.w;
                    for oy in 0..d.ho {
                        let iy = (oy * geom.stride + ky * geom.dilation) as isize - geom.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let srow = &src[(it * d.ho + oy) * d.wo..(it * d.ho + oy + 1) * d.wo];
                        let drow = &mut dx.data_mut()[base + iy as usize * d.w..base + (iy as usize + 1) * d.w];
                        for (ox, &v) in srow.iter().enumerate() {
                            let ix = (ox * geom.stride + kx * geom.dilation) as isize - geom.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                drow[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn chunk_items(d: &ConvDims) -> usize {
    let per_item = d.cin * d.kh * d.kw * d.ho * d.wo;
    (COL_BUDGET / per_item.max(1)).clamp(1, d.n.max(1))
}

fn conv_forward<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, geom: ConvGeom) -> Tensor<T> {
    let d = conv_dims(x, w, geom);
    let k = d.cin * d.kh * d.kw;
    let howo = d.ho * d.wo;
    let mut out = Tensor::zeros(&[d.n, d.cout, d.ho, d.wo]);
    if is_pointwise(&d, geom) {
        for i in 0..d.n {
            let dst = &mut out.data_mut()[i * d.cout * howo..(i + 1) * d.cout * howo];
            matmul_into(d.cout, k, howo, w.data(), false, x.item(i), false, T::zero(), dst);
        }
    } else {
        let chunk = chunk_items(&d);
        let mut col = vec![T::zero(); k * chunk * howo];
        let mut tmp = vec![T::zero(); d.cout * chunk * howo];
        let mut start = 0;
        while start < d.n {
            let items = chunk.min(d.n - start);
            let l = items * howo;
            im2col(x, &d, geom, start, items, &mut col[..k * l]);
            matmul_into(d.cout, k, l, w.data(), false, &col[..k * l], false, T::zero(), &mut tmp[..d.cout * l]);
            for it in 0..items {
                for co in 0..d.cout {
                    let src = &tmp[co * l + it * howo..co * l + (it + 1) * howo];
                    let off = ((start + it) * d.cout + co) * howo;
                    out.data_mut()[off..off + howo].copy_from_slice(src);
                }
            }
            start += items;
        }
    }
    if let Some(b) = b {
        for (p, plane) in out.data_mut().chunks_mut(howo).enumerate() {
            let bv = b.data()[p % d.cout];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

fn conv_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    geom: ConvGeom,
    want_x: bool,
    want_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    if !want_x && !want_w {
        return (None, None);
    }
    let d = conv_dims(x, w, geom);
    let k = d.cin * d.kh * d.kw;
    let howo = d.ho * d.wo;
    let mut dx = want_x.then(|| Tensor::zeros(x.shape()));
    let mut dw = want_w.then(|| Tensor::zeros(w.shape()));
    if is_pointwise(&d, geom) {
        for i in 0..d.n {
            let gi = g.item(i);
            if let Some(dw) = dw.as_mut() {
                matmul_into(d.cout, howo, k, gi, false, x.item(i), true, T::one(), dw.data_mut());
            }
            if let Some(dx) = dx.as_mut() {
                let dst = &mut dx.data_mut()[i * k * howo..(i + 1) * k * howo];
                matmul_into(k, d.cout, howo, w.data(), true, gi, false, T::zero(), dst);
            }
        }
        return (dx, dw);
    }
    let chunk = chunk_items(&d);
    let mut col = vec![T::zero(); k * chunk * howo];
    let mut gmat = vec![T::zero(); d.cout * chunk * howo];
    let mut start = 0;
    while start < d.n {
        let items = chunk.min(d.n - start);
        let l = items * howo;
        for it in 0..items {
            for co in 0..d.cout {
                let off = ((start + it) * d.cout + co) * howo;
                gmat[co * l + it * howo..co * l + (it + 1) * howo].copy_from_slice(&g.data()[off..off + howo]);
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(x, &d, geom, start, items, &mut col[..k * l]);
            matmul_into(d.cout, l, k, &gmat[..d.cout * l], false, &col[..k * l], true, T::one(), dw.data_mut());
        }
        if let Some(dx) = dx.as_mut() {
            matmul_into(k, d.cout, l, w.data(), true, &gmat[..d.cout * l], false, T::zero(), &mut col[..k * l]);
            col2im(&col[..k * l], &d, geom, start, items, dx);
        }
        start += items;
    }
    (dx, dw)
}
