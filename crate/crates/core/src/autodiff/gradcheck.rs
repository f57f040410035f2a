//! Central finite-difference gradient checking.
//!
//! The checker only evaluates forward passes when perturbing inputs, so it is
//! an independent oracle for the analytic gradients produced by `backward`.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Lower bound of the relative-error denominator, so entries with a
    /// near-zero gradient are compared absolutely.
    pub floor: f64,
    /// Check at most this many evenly spaced entries per input.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { eps: 1e-6, floor: 1e-3, max_entries: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(inputs: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let v = g.value(loss);
    if !v.is_scalar() {
        return Err(Error::shape("gradcheck", format!("loss must be scalar, got {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Compares `backward` against central differences for every input of `build`.
pub fn check_gradients<F>(inputs: &[Tensor], cfg: GradCheckConfig, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), checked: 0 };
    let mut perturbed = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = cfg.max_entries.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        for idx in (0..n).step_by(stride) {
            let original = input.data()[idx];
            perturbed[which].data_mut()[idx] = original + cfg.eps;
            let plus = evaluate(&perturbed, &build)?;
            perturbed[which].data_mut()[idx] = original - cfg.eps;
            let minus = evaluate(&perturbed, &build)?;
            perturbed[which].data_mut()[idx] = original;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let err = relative_error(analytic[which][idx], numeric, cfg.floor);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (which, idx);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
