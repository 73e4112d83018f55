use serde::{Deserialize, Serialize};

use crate::error::{FfmError, Result};

/// How a decay or context parameter participates in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamMode {
    #[default]
    Learned,
    /// Kept at its initial value; no gradient update.
    Fixed,
    /// Forced to zero.
    Off,
}

/// How decay and context combine into `gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaProduct {
    /// `alpha 1^T + 1 omega^T`: every trace sees every frequency.
    #[default]
    Outer,
    /// One frequency per state entry; needs `m == c`.
    Hadamard,
}

/// Ablation switches. The default is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantFlags {
    pub input_gate: bool,
    pub output_gate: bool,
    pub context: ParamMode,
    pub decay: ParamMode,
    pub gamma_product: GammaProduct,
}

impl Default for VariantFlags {
    fn default() -> Self {
        VariantFlags {
            input_gate: true,
            output_gate: true,
            context: ParamMode::Learned,
            decay: ParamMode::Learned,
            gamma_product: GammaProduct::Outer,
        }
    }
}

/// Short names accepted by [`VariantFlags::named`].
pub const VARIANT_NAMES: [&str; 8] = ["FFM", "NI", "NO", "NC", "FC", "ND", "FD", "HP"];

impl VariantFlags {
    /// `FFM` (full), `NI` (no input gate), `NO` (no output gate), `NC`/`FC`
    /// (context off/fixed), `ND`/`FD` (decay off/fixed), `HP` (Hadamard).
    pub fn named(name: &str) -> Result<Self> {
        let mut v = VariantFlags::default();
        match name.to_ascii_uppercase().as_str() {
            "FFM" => {}
            "NI" => v.input_gate = false,
            "NO" => v.output_gate = false,
            "NC" => v.context = ParamMode::Off,
            "FC" => v.context = ParamMode::Fixed,
            "ND" => v.decay = ParamMode::Off,
            "FD" => v.decay = ParamMode::Fixed,
            "HP" => v.gamma_product = GammaProduct::Hadamard,
            other => {
                return Err(FfmError::Config(format!(
                    "unknown variant {other:?}; expected one of {VARIANT_NAMES:?}"
                )))
            }
        }
        Ok(v)
    }

    /// Inverse of [`VariantFlags::named`], or `None` for combinations
    /// without a short name.
    pub fn short_name(&self) -> Option<&'static str> {
        VARIANT_NAMES.iter().copied().find(|n| VariantFlags::named(n).ok().as_ref() == Some(self))
    }
}
