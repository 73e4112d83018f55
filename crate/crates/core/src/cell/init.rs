use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CellDims, CellParams, GammaProduct, Linear, VariantFlags};
use crate::aggregator::{alpha_max_for, DecayParams};
use crate::error::{FfmError, Result};

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(FfmError::Config(format!("beta must lie in (0, 1), got {beta}")));
    }
    Ok(())
}

/// `(j/n) * end + (1 - j/n) * start` for `j = 1..=n`; a single point lands on
/// `end`.
fn spaced(n: usize, start: f64, end: f64) -> Vec<f64> {
    (1..=n)
        .map(|j| {
            let f = j as f64 / n as f64;
            f * end + (1.0 - f) * start
        })
        .collect()
}

/// Decay rates from `a_fast = alpha_max` down to `a_slow = ln(1/beta)/t_e`.
pub fn alpha_schedule(m: usize, t_e: usize, beta: f64) -> Result<Vec<f64>> {
    check_beta(beta)?;
    if m == 0 {
        return Err(FfmError::Config("trace size must be at least 1".into()));
    }
    if t_e < 2 {
        return Err(FfmError::Config(format!("t_e must be at least 2, got {t_e}")));
    }
    let a_slow = (1.0 / beta).ln() / t_e as f64;
    let a_fast = alpha_max_for(t_e);
    if a_slow >= a_fast {
        return Err(FfmError::Config(format!(
            "slow decay {a_slow} is not below the clamp {a_fast}; raise t_e or beta"
        )));
    }
    Ok(spaced(m, a_fast, a_slow))
}

/// Frequencies `2 pi / p_j` with periods `p_j = j/c + (1 - j/c) t_e`. A single
/// context uses the longest period `t_e`.
pub fn omega_schedule(c: usize, t_e: usize) -> Result<Vec<f64>> {
    if c == 0 {
        return Err(FfmError::Config("context size must be at least 1".into()));
    }
    if t_e < 2 {
        return Err(FfmError::Config(format!("t_e must be at least 2, got {t_e}")));
    }
    if c == 1 {
        return Ok(vec![2.0 * PI / t_e as f64]);
    }
    Ok(spaced(c, t_e as f64, 1.0).into_iter().map(|p| 2.0 * PI / p).collect())
}

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(FfmError::Config(format!("{name} range must satisfy 0 < lo <= hi, got ({lo}, {hi})")));
    }
    Ok(())
}

/// Decay rates whose durabilities `ln(1/beta)/alpha` span `[lo, hi]`. The
/// short end is clamped to `alpha_max`.
pub fn informed_alpha_schedule(m: usize, range: (f64, f64), beta: f64, alpha_max: f64) -> Result<Vec<f64>> {
    check_beta(beta)?;
    check_range("t_alpha", range)?;
    if m == 0 {
        return Err(FfmError::Config("trace size must be at least 1".into()));
    }
    let k = (1.0 / beta).ln();
    let a_slow = k / range.1;
    let a_fast = (k / range.0).min(alpha_max);
    if a_slow >= alpha_max {
        return Err(FfmError::Config(format!(
            "durability {} needs decay {a_slow}, above the clamp {alpha_max}",
            range.1
        )));
    }
    Ok(spaced(m, a_fast, a_slow))
}

/// Frequencies whose periods span `[lo, hi]`, shortest last. A single context
/// takes `hi`.
pub fn informed_omega_schedule(c: usize, range: (f64, f64)) -> Result<Vec<f64>> {
    check_range("t_omega", range)?;
    if c == 0 {
        return Err(FfmError::Config("context size must be at least 1".into()));
    }
    if c == 1 {
        return Ok(vec![2.0 * PI / range.1]);
    }
    Ok(spaced(c, range.1, range.0).into_iter().map(|p| 2.0 * PI / p).collect())
}

impl CellParams {
    /// Default initialization: scheduled decay and context, uniform
    /// fan-in-scaled linear maps.
    pub fn init(dims: CellDims, t_e: usize, beta: f64, seed: u64) -> Result<Self> {
        let alpha = alpha_schedule(dims.m, t_e, beta)?;
        let omega = omega_schedule(dims.c, t_e)?;
        Self::assemble(dims, t_e, beta, alpha, omega, seed)
    }

    /// Initialization with durabilities in `t_alpha` and periods in `t_omega`.
    pub fn informed_init(
        dims: CellDims,
        t_alpha: (f64, f64),
        t_omega: (f64, f64),
        t_e: usize,
        beta: f64,
        seed: u64,
    ) -> Result<Self> {
        if t_e < 2 {
            return Err(FfmError::Config(format!("t_e must be at least 2, got {t_e}")));
        }
        let alpha = informed_alpha_schedule(dims.m, t_alpha, beta, alpha_max_for(t_e))?;
        let omega = informed_omega_schedule(dims.c, t_omega)?;
        Self::assemble(dims, t_e, beta, alpha, omega, seed)
    }

    fn assemble(dims: CellDims, t_e: usize, beta: f64, alpha: Vec<f64>, omega: Vec<f64>, seed: u64) -> Result<Self> {
        let CellDims { d, m, c } = dims;
        if d == 0 {
            return Err(FfmError::Config("input size must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l1 = Linear::uniform(d, m, &mut rng);
        let l2 = Linear::uniform(d, m, &mut rng);
        let l3 = Linear::uniform(2 * m * c, d, &mut rng);
        let l4 = Linear::uniform(d, d, &mut rng);
        let l5 = Linear::uniform(d, d, &mut rng);
        let decay = DecayParams::new(&alpha, &omega, alpha_max_for(t_e))?;
        Ok(CellParams {
            dims,
            l1,
            l2,
            l3,
            l4,
            l5,
            decay,
            variant: VariantFlags::default(),
            max_len: t_e,
            beta,
        })
    }

    /// Switches the ablation variant. Hadamard expands the shared frequency
    /// vector into one row per trace and needs `m == c`.
    pub fn with_variant(mut self, variant: VariantFlags) -> Result<Self> {
        let CellDims { m, c, .. } = self.dims;
        match variant.gamma_product {
            GammaProduct::Hadamard if m != c => {
                return Err(FfmError::Config(format!("Hadamard product needs m == c, got m = {m}, c = {c}")));
            }
            GammaProduct::Hadamard if !self.decay.is_per_entry() => {
                let alpha = self.decay.alpha_raw.real_values()?.to_vec();
                self.decay = DecayParams::per_entry(&alpha, &self.decay.omega_matrix(), c, self.decay.alpha_max)?;
            }
            GammaProduct::Outer if self.decay.is_per_entry() => {
                return Err(FfmError::Config("cannot return to the outer product from per-entry frequencies".into()));
            }
            _ => {}
        }
        self.variant = variant;
        Ok(self)
    }
}
