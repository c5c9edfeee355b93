//! Thin layer wrappers that own parameter ids.

use crate::error::Result;
use crate::graph::{ConvGeom, Var};
use crate::params::{Init, ParamId, ParamStore, Session};
use crate::tensor::Float;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv2d {
    /// `kernel × kernel` convolution with "same" padding at stride 1.
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
        stride: usize,
        init: Option<Init>,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let w = store.add(
            &format!("{name}.weight"),
            &[cout, cin, kernel, kernel],
            init.unwrap_or(Init::He(fan_in)),
            true,
        );
        let b = Some(store.add(&format!("{name}.bias"), &[cout], Init::Zeros, true));
        let mut geom = ConvGeom::same(kernel, dilation);
        geom.stride = stride;
        Conv2d { w, b, geom }
    }

    pub fn forward<T: Float>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.p(self.w);
        let b = self.b.map(|b| s.p(b));
        s.g.conv2d(x, w, b, self.geom)
    }

    pub fn forward_relu<T: Float>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let y = self.forward(s, x)?;
        Ok(s.g.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        init: Option<Init>,
    ) -> Self {
        let w = store.add(&format!("{name}.weight"), &[cout, cin], init.unwrap_or(Init::He(cin)), true);
        let b = bias.then(|| store.add(&format!("{name}.bias"), &[cout], Init::Zeros, true));
        Linear { w, b }
    }

    pub fn forward<T: Float>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.p(self.w);
        let b = self.b.map(|b| s.p(b));
        s.g.linear(x, w, b)
    }
}

/// 2×2 stride-2 transposed convolution.
#[derive(Clone, Debug)]
pub struct Deconv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Deconv {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize) -> Self {
        Deconv {
            w: store.add(&format!("{name}.weight"), &[cin, cout, 2, 2], Init::He(cin), true),
            b: store.add(&format!("{name}.bias"), &[cout], Init::Zeros, true),
        }
    }

    pub fn forward<T: Float>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.p(self.w);
        let b = s.p(self.b);
        s.g.deconv2x2(x, w, Some(b))
    }
}

/// Group normalisation with a per-channel affine part. The group count is
/// the largest divisor of the channel count not above the requested one.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        let groups = (1..=groups.clamp(1, channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1);
        GroupNorm {
            gamma: store.add(&format!("{name}.gamma"), &[1, channels, 1, 1], Init::Ones, true),
            beta: store.add(&format!("{name}.beta"), &[1, channels, 1, 1], Init::Zeros, true),
            groups,
        }
    }

    pub fn forward<T: Float>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let y = s.g.group_norm(x, self.groups, T::of(GROUP_NORM_EPS))?;
        let (gamma, beta) = (s.p(self.gamma), s.p(self.beta));
        let y = s.g.broadcast_mul(y, gamma)?;
        s.g.broadcast_add(y, beta)
    }
}

/// Convolution, optional group normalisation, then ReLU.
#[derive(Clone, Debug)]
pub struct ConvNormRelu {
    pub conv: Conv2d,
    pub norm: Option<GroupNorm>,
}

impl ConvNormRelu {
    /// `groups == 0` disables normalisation.
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, conv: Conv2d, cout: usize, groups: usize) -> Self {
        let norm = (groups > 0).then(|| GroupNorm::new(store, &format!("{name}.norm"), cout, groups));
        ConvNormRelu { conv, norm }
    }

    /// Pre-activation output.
    pub fn forward_linear<T: Float>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        match &self.norm {
            Some(n) => n.forward(s, y),
            None => Ok(y),
        }
    }

    pub fn forward<T: Float>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let y = self.forward_linear(s, x)?;
        Ok(s.g.relu(y))
    }
}
