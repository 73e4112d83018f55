//! JSON checkpoints. Arrays are stored as base64 of their little-endian
//! `f64` bytes, so a save/load round trip is bit-exact.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::cell::{CellDims, VariantFlags};
use crate::error::{FfmError, Result};
use crate::model::{Body, Model, ModelSpec};
use crate::numerics::Tensor;

pub const FORMAT: &str = "ffm-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

/// Memory-cell settings, present for FFM checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellRecord {
    pub dims: CellDims,
    pub variant: VariantFlags,
    pub t_e: usize,
    pub beta: f64,
    pub alpha_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model_kind: String,
    pub model: ModelSpec,
    pub vocab: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell: Option<CellRecord>,
    pub arrays: Vec<ArrayRecord>,
}

pub fn encode_f64(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f64(text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD.decode(text).map_err(|e| FfmError::Checkpoint(format!("bad base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(FfmError::Checkpoint(format!("array byte length {} is not a multiple of 8", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Result<Self> {
        let arrays = model
            .parameters()
            .into_iter()
            .map(|p| {
                Ok(ArrayRecord {
                    name: p.name.to_string(),
                    shape: p.tensor.shape().to_vec(),
                    data: encode_f64(p.tensor.real_values()?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cell = model.cell().map(|c| CellRecord {
            dims: c.dims,
            variant: c.variant,
            t_e: c.max_len,
            beta: c.beta,
            alpha_max: c.decay.alpha_max,
        });
        Ok(Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            model_kind: model.spec.kind().into(),
            model: model.spec.clone(),
            vocab: model.vocab,
            cell,
            arrays,
        })
    }

    /// Rebuilds the model and overwrites every parameter from the stored
    /// arrays. Names and shapes must match exactly.
    pub fn to_model(&self) -> Result<Model> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(FfmError::Checkpoint(format!(
                "unsupported checkpoint {} v{} (expected {FORMAT} v{VERSION})",
                self.format, self.version
            )));
        }
        if self.model_kind != self.model.kind() {
            return Err(FfmError::Checkpoint(format!(
                "model_kind {} does not match model spec {}",
                self.model_kind,
                self.model.kind()
            )));
        }
        let mut model = Model::build(&self.model, self.vocab, 0)?;
        if let Body::Ffm(cell) = &mut model.body {
            let rec = self
                .cell
                .as_ref()
                .ok_or_else(|| FfmError::Checkpoint("FFM checkpoint without cell settings".into()))?;
            if rec.dims != cell.dims || rec.t_e != cell.max_len {
                return Err(FfmError::Checkpoint("cell settings disagree with the model spec".into()));
            }
            if rec.alpha_max.to_bits() != cell.decay.alpha_max.to_bits() {
                return Err(FfmError::Checkpoint(format!(
                    "alpha_max {} does not match {} derived from t_e",
                    rec.alpha_max, cell.decay.alpha_max
                )));
            }
            if rec.variant.gamma_product != cell.variant.gamma_product {
                return Err(FfmError::Checkpoint("gamma product disagrees with the model spec".into()));
            }
            cell.variant = rec.variant;
            cell.beta = rec.beta;
        }
        let names: Vec<&str> = model.parameters().iter().map(|p| p.name).collect();
        if names.len() != self.arrays.len() {
            return Err(FfmError::Checkpoint(format!(
                "expected {} arrays, found {}",
                names.len(),
                self.arrays.len()
            )));
        }
        let names: Vec<String> = names.into_iter().map(String::from).collect();
        for ((slot, name), rec) in model.parameters_mut().into_iter().zip(&names).zip(&self.arrays) {
            if rec.name != *name {
                return Err(FfmError::Checkpoint(format!("expected array {name}, found {}", rec.name)));
            }
            if rec.shape != slot.shape() {
                return Err(FfmError::Checkpoint(format!(
                    "array {name} has shape {:?}, expected {:?}",
                    rec.shape,
                    slot.shape()
                )));
            }
            *slot = Tensor::real(&rec.shape, decode_f64(&rec.data)?)
                .map_err(|e| FfmError::Checkpoint(format!("array {name}: {e}")))?;
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| FfmError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| FfmError::Checkpoint(e.to_string()))
    }
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let text = Checkpoint::from_model(model)?.to_json()?;
    std::fs::write(path, text).map_err(|e| FfmError::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path).map_err(|e| FfmError::io(path, e))?;
    Checkpoint::from_json(&text)?.to_model()
}
