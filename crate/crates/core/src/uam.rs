//! United attention: three parallel convolutions followed by complementary
//! channel and spatial gating.
//!
//! For an input `F` the block computes
//!
//! ```text
//! F5 = conv5x5(F)   FD = conv3x3_dil3(F)   F3 = conv3x3(F)
//! φ  = σ(fc2(ReLU(BN(fc1(GAP(F5 + FD))))))
//! FCS = proj_cs(φ·FD + (1-φ)·F5)            FS = proj_s(F3)
//! ψ  = σ(proj_psi(ReLU(FCS + FS)))
//! out = proj_out(ψ·FCS + (1-ψ)·FS)
//! ```
//!
//! `φ` is per channel, `ψ` per pixel and broadcast over channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Conv2d, Linear};
use crate::params::{Init, ParamId, ParamStore, Session, StatUpdate};
use crate::tensor::{Float, Tensor};

/// Widths and batch-norm settings of one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UamConfig {
    pub in_channels: usize,
    /// Width of the three parallel convolutions.
    pub mid_channels: usize,
    /// Channel reduction of the first fully connected layer.
    pub reduction: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl UamConfig {
    pub fn new(in_channels: usize) -> Self {
        UamConfig {
            in_channels,
            mid_channels: in_channels,
            reduction: 4,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.mid_channels == 0 || self.reduction == 0 {
            return Err(Error::Config("uam widths must be positive".into()));
        }
        if self.mid_channels / self.reduction == 0 {
            return Err(Error::Config(format!(
                "uam mid_channels {} too small for reduction {}",
                self.mid_channels, self.reduction
            )));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return Err(Error::Config("uam batch-norm settings out of range".into()));
        }
        Ok(())
    }

    pub fn squeeze_channels(&self) -> usize {
        self.mid_channels / self.reduction
    }
}

/// Parameter handles of one block.
#[derive(Clone, Debug)]
pub struct UamParams {
    pub config: UamConfig,
    pub conv5: Conv2d,
    pub conv3d: Conv2d,
    pub conv3: Conv2d,
    pub fc1: Linear,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub bn_mean: ParamId,
    pub bn_var: ParamId,
    pub fc2: Linear,
    pub proj_cs: Conv2d,
    pub proj_s: Conv2d,
    pub proj_psi: Conv2d,
    pub proj_out: Conv2d,
}

/// Graph handles of the gating maps from one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    /// `(N, C_mid, 1, 1)`
    pub phi: Var,
    /// `(N, 1, H, W)`
    pub psi: Var,
}

/// Gating maps as plain values.
#[derive(Clone, Debug)]
pub struct AttentionMaps {
    /// `(N, C_mid)`
    pub phi: Tensor<f64>,
    pub phi_prime: Tensor<f64>,
    /// `(N, H, W)`
    pub psi: Tensor<f64>,
    pub psi_prime: Tensor<f64>,
}

impl UamParams {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, config: UamConfig) -> Result<Self> {
        config.validate()?;
        let (c, m, q) = (config.in_channels, config.mid_channels, config.squeeze_channels());
        let conv = |store: &mut ParamStore<T>, n: &str, cin, cout, k, d| {
            Conv2d::new(store, &format!("{name}.{n}"), cin, cout, k, d, 1, None)
        };
        Ok(UamParams {
            conv5: conv(store, "conv5", c, m, 5, 1),
            conv3d: conv(store, "conv3d", c, m, 3, 3),
            conv3: conv(store, "conv3", c, m, 3, 1),
            fc1: Linear::new(store, &format!("{name}.fc1"), m, q, false, None),
            bn_gamma: store.add(&format!("{name}.bn.gamma"), &[q], Init::Ones, true),
            bn_beta: store.add(&format!("{name}.bn.beta"), &[q], Init::Zeros, true),
            bn_mean: store.add(&format!("{name}.bn.running_mean"), &[q], Init::Zeros, false),
            bn_var: store.add(&format!("{name}.bn.running_var"), &[q], Init::Ones, false),
            fc2: Linear::new(store, &format!("{name}.fc2"), q, m, true, Some(Init::Normal(0.01))),
            proj_cs: conv(store, "proj_cs", m, m, 1, 1),
            proj_s: conv(store, "proj_s", m, m, 1, 1),
            proj_psi: Conv2d::new(store, &format!("{name}.proj_psi"), m, 1, 1, 1, 1, Some(Init::Normal(0.01))),
            proj_out: Conv2d::new(store, &format!("{name}.proj_out"), m, c, 1, 1, 1, Some(Init::He(2 * m))),
            config,
        })
    }

    /// Every parameter id of the block.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for conv in [&self.conv5, &self.conv3d, &self.conv3, &self.proj_cs, &self.proj_s, &self.proj_psi, &self.proj_out] {
            ids.push(conv.w);
            ids.extend(conv.b);
        }
        for fc in [&self.fc1, &self.fc2] {
            ids.push(fc.w);
            ids.extend(fc.b);
        }
        ids.extend([self.bn_gamma, self.bn_beta, self.bn_mean, self.bn_var]);
        ids
    }

    fn batch_norm<T: Float>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let q = self.config.squeeze_channels();
        let n = s.g.shape(x)[0];
        let normed = if s.training && n >= 2 {
            let (y, mean, var) = s.g.batch_norm(x, T::of(self.config.bn_eps))?;
            let unbias = n as f64 / (n - 1) as f64;
            s.stat_updates.push(StatUpdate {
                mean: self.bn_mean,
                var: self.bn_var,
                batch_mean: mean.iter().map(|v| v.to_f64_lossy()).collect(),
                batch_var: var.iter().map(|v| v.to_f64_lossy() * unbias).collect(),
                momentum: self.config.bn_momentum,
            });
            y
        } else {
            let mean = s.store().get(self.bn_mean).data().to_vec();
            let eps = T::of(self.config.bn_eps);
            let inv_std: Vec<T> = s.store().get(self.bn_var).data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            s.g.normalize_channels(x, &mean, &inv_std)?
        };
        let gamma = s.p(self.bn_gamma);
        let gamma = s.g.reshape(gamma, &[1, q])?;
        let beta = s.p(self.bn_beta);
        let beta = s.g.reshape(beta, &[1, q])?;
        let y = s.g.broadcast_mul(normed, gamma)?;
        s.g.broadcast_add(y, beta)
    }

    /// Runs the block on `(N, C_in, H, W)` and returns the output with the
    /// gating maps.
    pub fn forward_with_maps<T: Float>(&self, s: &mut Session<T>, x: Var) -> Result<(Var, AttentionVars)> {
        let shape = s.g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::invalid(format!(
                "uam expects (N, {}, H, W), got {shape:?}",
                self.config.in_channels
            )));
        }
        let (n, m) = (shape[0], self.config.mid_channels);
        let f5 = self.conv5.forward(s, x)?;
        let fd = self.conv3d.forward(s, x)?;
        let f3 = self.conv3.forward(s, x)?;

        let sum = s.g.add(f5, fd)?;
        let pooled = s.g.global_avg_pool(sum)?;
        let squeezed = self.fc1.forward(s, pooled)?;
        let squeezed = self.batch_norm(s, squeezed)?;
        let squeezed = s.g.relu(squeezed);
        let logits = self.fc2.forward(s, squeezed)?;
        let phi = s.g.sigmoid(logits);
        let phi = s.g.reshape(phi, &[n, m, 1, 1])?;
        let phi_prime = s.g.one_minus(phi);
        let fd_cal = s.g.broadcast_mul(fd, phi)?;
        let f5_cal = s.g.broadcast_mul(f5, phi_prime)?;

        let merged = s.g.add(f5_cal, fd_cal)?;
        let f_cs = self.proj_cs.forward(s, merged)?;
        let f_s = self.proj_s.forward(s, f3)?;
        let fused = s.g.add(f_cs, f_s)?;
        let fused = s.g.relu(fused);
        let psi = self.proj_psi.forward(s, fused)?;
        let psi = s.g.sigmoid(psi);
        let psi_prime = s.g.one_minus(psi);
        let cs_cal = s.g.broadcast_mul(f_cs, psi)?;
        let s_cal = s.g.broadcast_mul(f_s, psi_prime)?;
        let out = s.g.add(cs_cal, s_cal)?;
        let out = self.proj_out.forward(s, out)?;
        Ok((out, AttentionVars { phi, psi }))
    }

    pub fn forward<T: Float>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_maps(s, x)?.0)
    }
}

/// Runs the block in inference mode and returns its output.
pub fn uam_forward<T: Float>(store: &ParamStore<T>, params: &UamParams, input: &Tensor<T>) -> Result<Tensor<T>> {
    let mut s = Session::new(store, false);
    let x = s.g.constant(input.clone());
    let y = params.forward(&mut s, x)?;
    Ok(s.g.value(y).clone())
}

/// Runs the block in inference mode and returns `φ`, `ψ` and their complements.
pub fn attention_maps<T: Float>(store: &ParamStore<T>, params: &UamParams, input: &Tensor<T>) -> Result<AttentionMaps> {
    let mut s = Session::new(store, false);
    let x = s.g.constant(input.clone());
    let (_, maps) = params.forward_with_maps(&mut s, x)?;
    let phi_v = s.g.value(maps.phi).cast::<f64>();
    let (n, m) = (phi_v.shape()[0], phi_v.shape()[1]);
    let phi = phi_v.reshaped(&[n, m])?;
    let psi_v = s.g.value(maps.psi).cast::<f64>();
    let (_, _, h, w) = psi_v.dims4();
    let psi = psi_v.reshaped(&[n, h, w])?;
    Ok(AttentionMaps {
        phi_prime: phi.map(|v| 1.0 - v),
        psi_prime: psi.map(|v| 1.0 - v),
        phi,
        psi,
    })
}
