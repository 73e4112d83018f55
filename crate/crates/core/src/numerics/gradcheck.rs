//! Central finite-difference gradient checker.

use super::graph::{Graph, Var};
use super::tensor::{Dtype, Tensor};
use crate::error::Result;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Relative tolerance on each gradient entry.
pub const RTOL: f64 = 1e-5;
/// Entries whose absolute error is below this pass regardless of `RTOL`
/// (finite-difference noise floor for O(1) losses at step 1e-6).
pub const ATOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    /// Largest relative error among entries whose absolute error exceeds `ATOL`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compares the analytic gradient of `loss` with respect to every entry of
/// every tensor in `params` against central differences.
///
/// `loss` receives a fresh graph and one trainable leaf per parameter and
/// must return a real scalar.
pub fn check_gradients<F>(params: &[(String, Tensor)], step: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let l = loss(&mut g, &vars)?;
        Ok(g.value(l).real_values()?[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let l = loss(&mut g, &vars)?;
    g.backward(l)?;

    let mut report = GradCheckReport { checked: 0, failures: 0, max_rel_err: 0.0, max_abs_err: 0.0, worst: None };
    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();

    for (pi, (name, tensor)) in params.iter().enumerate() {
        let analytic = g.grad(vars[pi]).cloned().unwrap_or_else(|| Tensor::zeros(tensor.shape(), tensor.dtype()));
        let channels: &[bool] = if tensor.dtype() == Dtype::Complex128 { &[false, true] } else { &[false] };
        for i in 0..tensor.len() {
            for &imag in channels {
                let a = match (analytic.as_real(), analytic.as_complex()) {
                    (Some(r), _) => r[i],
                    (_, Some(z)) if imag => z[i].im,
                    (_, Some(z)) => z[i].re,
                    _ => unreachable!(),
                };
                perturb(&mut values[pi], i, imag, step);
                let up = eval(&values)?;
                perturb(&mut values[pi], i, imag, -2.0 * step);
                let down = eval(&values)?;
                perturb(&mut values[pi], i, imag, step);
                let numeric = (up - down) / (2.0 * step);

                let abs_err = (a - numeric).abs();
                let rel_err = abs_err / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
                report.checked += 1;
                report.max_abs_err = report.max_abs_err.max(abs_err);
                if abs_err > ATOL {
                    if rel_err > report.max_rel_err {
                        report.max_rel_err = rel_err;
                        report.worst = Some(format!("{name}[{i}] analytic={a:.9e} numeric={numeric:.9e}"));
                    }
                    if rel_err > RTOL {
                        report.failures += 1;
                    }
                }
            }
        }
    }
    Ok(report)
}

fn perturb(t: &mut Tensor, i: usize, imag: bool, delta: f64) {
    if let Some(r) = t.as_real_mut() {
        r[i] += delta;
    } else if let Some(z) = t.as_complex_mut() {
        if imag {
            z[i].im += delta;
        } else {
            z[i].re += delta;
        }
    }
}
