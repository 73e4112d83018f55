//! The demo operations as plain Rust, so they run and test natively.

use std::f64::consts::PI;

use ffm::aggregator::{self, alpha_max_for, scan, DecayParams, RecurrentState, ScanOptions, DEFAULT_MAX_LEN};
use ffm::cell::{CellDims, CellParams};
use ffm::error::{FfmError, Result};
use ffm::numerics::Tensor;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// State of a single trace/context pair after a unit impulse at step 0 and
/// zero input afterwards. Returns `steps` real parts followed by `steps`
/// imaginary parts.
pub fn impulse_response(alpha: f64, period: f64, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 || steps > DEFAULT_MAX_LEN {
        return Err(FfmError::Config(format!("steps must be in 1..={DEFAULT_MAX_LEN}, got {steps}")));
    }
    if period <= 0.0 {
        return Err(FfmError::Config(format!("period must be positive, got {period}")));
    }
    let params = DecayParams::new(&[alpha], &[2.0 * PI / period], alpha_max_for(DEFAULT_MAX_LEN))?;
    let mut x = vec![0.0; steps];
    x[0] = 1.0;
    let (states, _) = scan(&params, &Tensor::real(&[steps, 1], x)?, &RecurrentState::zeros(1, 1), &ScanOptions::default())?;
    let z = states.as_complex().expect("complex states");
    Ok(z.iter().map(|v| v.re).chain(z.iter().map(|v| v.im)).collect())
}

/// Durability of every trace followed by the period of every context for a
/// freshly initialized cell. `horizon = Some((lo, hi))` uses the informed
/// schedule over that range for both.
pub fn init_timescales(m: usize, c: usize, t_e: usize, beta: f64, horizon: Option<(f64, f64)>) -> Result<Vec<f64>> {
    let dims = CellDims::new(1, m, c);
    let cell = match horizon {
        None => CellParams::init(dims, t_e, beta, 0)?,
        Some(r) => CellParams::informed_init(dims, r, r, t_e, beta, 0)?,
    };
    let dur = cell.trace_durability(beta)?;
    let per = cell.context_period();
    Ok(dur.iter().step_by(c).chain(&per[..c]).copied().collect())
}

/// Largest per-step gap between the parallel scan and the step-by-step
/// recurrence on a random problem.
pub fn scan_vs_step(m: usize, c: usize, steps: usize, seed: u64) -> Result<Vec<f64>> {
    if steps == 0 || steps > DEFAULT_MAX_LEN {
        return Err(FfmError::Config(format!("steps must be in 1..={DEFAULT_MAX_LEN}, got {steps}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha: Vec<f64> = (0..m).map(|_| rng.gen_range(0.001..0.3)).collect();
    let omega: Vec<f64> = (0..c).map(|_| rng.gen_range(-PI..PI)).collect();
    let params = DecayParams::new(&alpha, &omega, alpha_max_for(DEFAULT_MAX_LEN))?;
    let x: Vec<f64> = (0..steps * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let zero = RecurrentState::zeros(m, c);
    let (states, _) = scan(&params, &Tensor::real(&[steps, m], x.clone())?, &zero, &ScanOptions::default())?;
    let states = states.as_complex().expect("complex states");
    let mut s = zero;
    let mut gaps = Vec::with_capacity(steps);
    for t in 0..steps {
        s = aggregator::step(&params, &x[t * m..(t + 1) * m], &s)?;
        let gap = states[t * m * c..(t + 1) * m * c]
            .iter()
            .zip(s.values())
            .map(|(a, b): (&Complex64, &Complex64)| (a - b).norm())
            .fold(0.0, f64::max);
        gaps.push(gap);
    }
    Ok(gaps)
}
