use std::f64::consts::PI;

use super::{CellParams, ParamMode};
use crate::error::{FfmError, Result};

impl CellParams {
    /// Steps until a trace decays to `beta` of its size, `ln(1/beta)/alpha_j`,
    /// as an `m x c` row-major matrix. Zero decay gives `+inf`.
    pub fn trace_durability(&self, beta: f64) -> Result<Vec<f64>> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(FfmError::Config(format!("beta must lie in (0, 1), got {beta}")));
        }
        let (m, c) = (self.dims.m, self.dims.c);
        let alpha = match self.variant.decay {
            ParamMode::Off => vec![0.0; m],
            _ => self.decay.alpha(),
        };
        let k = (1.0 / beta).ln();
        Ok((0..m * c)
            .map(|i| {
                let a = alpha[i / c];
                if a == 0.0 {
                    f64::INFINITY
                } else {
                    k / a
                }
            })
            .collect())
    }

    /// Context periods `2 pi / |omega|` as an `m x c` row-major matrix. Zero
    /// frequency gives `+inf`.
    pub fn context_period(&self) -> Vec<f64> {
        let off = self.variant.context == ParamMode::Off;
        self.decay
            .omega_matrix()
            .into_iter()
            .map(|w| if off || w == 0.0 { f64::INFINITY } else { 2.0 * PI / w.abs() })
            .collect()
    }
}
