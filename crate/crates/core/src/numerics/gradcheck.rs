//! Finite-difference verification of reverse-mode gradients.
//!
//! Always runs in double precision; central differences are too noisy in
//! f32 to verify anything at the tolerances used here.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Per-input error summary from a gradient comparison.
#[derive(Clone, Debug)]
pub struct InputReport {
    pub max_rel: f64,
    pub mean_rel: f64,
    pub max_abs: f64,
    /// Coordinates whose analytic gradient was NaN/inf.
    pub nonfinite: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_rel(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel).fold(0.0, f64::max)
    }

    pub fn mean_rel(&self) -> f64 {
        if self.inputs.is_empty() {
            return 0.0;
        }
        self.inputs.iter().map(|r| r.mean_rel).sum::<f64>() / self.inputs.len() as f64
    }

    pub fn nonfinite(&self) -> usize {
        self.inputs.iter().map(|r| r.nonfinite).sum()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.nonfinite() == 0 && self.max_rel() < tol
    }
}

/// Differentiable scalar-valued closure: builds the op under test on the
/// given graph and returns the (scalar) output node.
pub trait ScalarFn: Fn(&Graph<f64>, &[Var]) -> Result<Var> {}
impl<F: Fn(&Graph<f64>, &[Var]) -> Result<Var>> ScalarFn for F {}

fn eval_value(f: &impl ScalarFn, inputs: &[Tensor<f64>]) -> Result<f64> {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&g, &vars)?;
    let v = g.tensor(out);
    if v.numel() != 1 {
        return Err(Error::arg(format!(
            "gradient check requires a scalar output, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Central-difference gradient of `f` w.r.t. every coordinate of every input.
pub fn numeric_gradient(
    f: &impl ScalarFn,
    inputs: &[Tensor<f64>],
    eps: f64,
) -> Result<Vec<Tensor<f64>>> {
    if eps <= 0.0 {
        return Err(Error::arg("eps must be positive".to_string()));
    }
    let mut grads = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let hi = eval_value(f, &work)?;
            work[i].data_mut()[j] = orig - eps;
            let lo = eval_value(f, &work)?;
            work[i].data_mut()[j] = orig;
            grad.data_mut()[j] = (hi - lo) / (2.0 * eps);
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// Reverse-mode gradient of `f` w.r.t. every input.
pub fn analytic_gradient(f: &impl ScalarFn, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&g, &vars)?;
    if g.tensor(out).numel() != 1 {
        return Err(Error::arg("gradient check requires a scalar output".to_string()));
    }
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Relative error between two gradients, coordinate-wise. Coordinates where
/// both magnitudes sit below 1e-12 count as zero error.
pub fn compare_gradients(
    analytic: &[Tensor<f64>],
    numeric: &[Tensor<f64>],
) -> Result<GradCheckReport> {
    if analytic.len() != numeric.len() {
        return Err(Error::arg(format!(
            "gradient lists differ in length: {} vs {}",
            analytic.len(),
            numeric.len()
        )));
    }
    let mut inputs = Vec::with_capacity(analytic.len());
    for (a, n) in analytic.iter().zip(numeric) {
        if a.shape() != n.shape() {
            return Err(Error::shape(format!(
                "gradient shapes differ: {:?} vs {:?}",
                a.shape(),
                n.shape()
            )));
        }
        let mut max_rel = 0.0f64;
        let mut sum_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        let mut nonfinite = 0usize;
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            if !av.is_finite() {
                nonfinite += 1;
                continue;
            }
            let diff = (av - nv).abs();
            let denom = av.abs().max(nv.abs());
            let rel = if denom <= 1e-12 { 0.0 } else { diff / denom };
            max_rel = max_rel.max(rel);
            sum_rel += rel;
            max_abs = max_abs.max(diff);
        }
        inputs.push(InputReport {
            max_rel,
            mean_rel: sum_rel / a.numel() as f64,
            max_abs,
            nonfinite,
        });
    }
    Ok(GradCheckReport { inputs })
}

/// Run the full check: reverse-mode gradients against central differences.
pub fn finite_diff_check(
    f: impl ScalarFn,
    inputs: &[Tensor<f64>],
    eps: f64,
) -> Result<GradCheckReport> {
    let analytic = analytic_gradient(&f, inputs)?;
    let numeric = numeric_gradient(&f, inputs, eps)?;
    compare_gradients(&analytic, &numeric)
}
