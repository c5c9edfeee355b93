//! Central finite-difference gradient checking.
//!
//! The numerical gradient uses forward evaluations only, so it shares no
//! code with the reverse sweep it is compared against.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::Tensor;

/// Analytic and numeric gradients for one input tensor.
#[derive(Debug, Clone)]
pub struct GradPair {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradPair {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`, or the absolute
    /// difference norm when both gradients vanish.
    pub fn rel_error(&self) -> f64 {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = self
            .analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| a - n)
            .collect();
        let scale = norm(&self.analytic).max(norm(&self.numeric));
        if scale < 1e-12 {
            norm(&diff)
        } else {
            norm(&diff) / scale
        }
    }
}

/// Worst relative error across inputs.
pub fn max_rel_error(pairs: &[GradPair]) -> f64 {
    pairs.iter().map(GradPair::rel_error).fold(0.0, f64::max)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `h`, for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Vec<GradPair>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).expect("forward pass");
        g.value(out).data()[0]
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars).expect("forward pass");
    let grads = g.backward(out).expect("backward pass");

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut pairs = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
        pairs.push(GradPair { analytic, numeric });
    }
    pairs
}

/// Like [`check_gradients`] but perturbs entries of a parameter store and
/// builds the scalar through a [`Session`]. At most `max_per_param`
/// evenly spaced elements of each parameter are probed.
pub fn check_param_gradients<F>(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    h: f64,
    max_per_param: usize,
    f: F,
) -> Result<Vec<GradPair>>
where
    F: Fn(&mut Session<f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut s = Session::new(store, false);
        let out = f(&mut s)?;
        Ok(s.g.value(out).data()[0])
    };
    let grads = {
        let mut s = Session::new(store, false);
        let out = f(&mut s)?;
        s.gradients(out)?
    };
    let mut pairs = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.get(id).numel();
        let probes: Vec<usize> = if n <= max_per_param {
            (0..n).collect()
        } else {
            (0..max_per_param).map(|k| k * n / max_per_param).collect()
        };
        let full = grads[store.ids().position(|x| x == id).expect("id in store")].clone();
        let mut analytic = Vec::with_capacity(probes.len());
        let mut numeric = Vec::with_capacity(probes.len());
        for &j in &probes {
            analytic.push(full.as_ref().map_or(0.0, |g| g.data()[j]));
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
        pairs.push(GradPair { analytic, numeric });
    }
    Ok(pairs)
}
