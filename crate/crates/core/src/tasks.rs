//! Synthetic partially observable sequence tasks with exact solutions.
//!
//! Each timestep shows one random symbol. Scored positions ask for a symbol
//! seen earlier, so a model without memory can only guess.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FfmError, Result};
use crate::numerics::Tensor;

/// Task selection as it appears in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    /// Output the symbol shown `k` steps ago.
    RepeatPrevious { length: usize, k: usize, vocab: usize },
    /// Output the first symbol at the last step.
    CopyFirst { length: usize, vocab: usize },
}

impl TaskSpec {
    pub fn vocab(&self) -> usize {
        match *self {
            TaskSpec::RepeatPrevious { vocab, .. } | TaskSpec::CopyFirst { vocab, .. } => vocab,
        }
    }

    pub fn length(&self) -> usize {
        match *self {
            TaskSpec::RepeatPrevious { length, .. } | TaskSpec::CopyFirst { length, .. } => length,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TaskSpec::RepeatPrevious { length, k, vocab } => check_repeat(length, k, vocab),
            TaskSpec::CopyFirst { length, vocab } => check_copy(length, vocab),
        }
    }

    pub fn generate(&self, batch: usize, seed: u64) -> Result<TaskBatch> {
        match *self {
            TaskSpec::RepeatPrevious { length, k, vocab } => gen_repeat_previous(batch, length, k, vocab, seed),
            TaskSpec::CopyFirst { length, vocab } => gen_copy_first(batch, length, vocab, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub task: String,
    pub k: usize,
    pub vocab: usize,
}

/// `B` sequences of length `T`. Per-position arrays are batch-major
/// (`index = b * T + t`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskBatch {
    pub batch: usize,
    pub length: usize,
    pub symbols: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    pub meta: TaskMeta,
}

fn check_repeat(length: usize, k: usize, vocab: usize) -> Result<()> {
    if vocab < 2 {
        return Err(FfmError::Config(format!("vocab must be at least 2, got {vocab}")));
    }
    if k >= length {
        return Err(FfmError::Config(format!("repeat_previous needs k < T, got k = {k}, T = {length}")));
    }
    Ok(())
}

fn check_copy(length: usize, vocab: usize) -> Result<()> {
    if vocab < 2 {
        return Err(FfmError::Config(format!("vocab must be at least 2, got {vocab}")));
    }
    if length < 2 {
        return Err(FfmError::Config(format!("copy_first needs T >= 2, got {length}")));
    }
    Ok(())
}

fn symbols(batch: usize, length: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch * length).map(|_| rng.gen_range(0..vocab)).collect()
}

/// Target at `t` is the symbol at `t - k`; positions `t < k` are unscored.
pub fn gen_repeat_previous(batch: usize, length: usize, k: usize, vocab: usize, seed: u64) -> Result<TaskBatch> {
    check_repeat(length, k, vocab)?;
    repeat_previous_from_symbols(batch, length, k, vocab, symbols(batch, length, vocab, seed))
}

/// [`gen_repeat_previous`] over caller-supplied batch-major symbols.
pub fn repeat_previous_from_symbols(
    batch: usize,
    length: usize,
    k: usize,
    vocab: usize,
    symbols: Vec<usize>,
) -> Result<TaskBatch> {
    check_repeat(length, k, vocab)?;
    check_symbols(&symbols, batch * length, vocab)?;
    let mut targets = vec![0; batch * length];
    let mut mask = vec![false; batch * length];
    for b in 0..batch {
        for t in k..length {
            targets[b * length + t] = symbols[b * length + t - k];
            mask[b * length + t] = true;
        }
    }
    let meta = TaskMeta { task: "repeat_previous".into(), k, vocab };
    Ok(TaskBatch { batch, length, symbols, targets, mask, meta })
}

/// Only the last step is scored, with the first symbol as target.
pub fn gen_copy_first(batch: usize, length: usize, vocab: usize, seed: u64) -> Result<TaskBatch> {
    check_copy(length, vocab)?;
    copy_first_from_symbols(batch, length, vocab, symbols(batch, length, vocab, seed))
}

/// [`gen_copy_first`] over caller-supplied batch-major symbols.
pub fn copy_first_from_symbols(batch: usize, length: usize, vocab: usize, symbols: Vec<usize>) -> Result<TaskBatch> {
    check_copy(length, vocab)?;
    check_symbols(&symbols, batch * length, vocab)?;
    let mut targets = vec![0; batch * length];
    let mut mask = vec![false; batch * length];
    for b in 0..batch {
        targets[b * length + length - 1] = symbols[b * length];
        mask[b * length + length - 1] = true;
    }
    let meta = TaskMeta { task: "copy_first".into(), k: length - 1, vocab };
    Ok(TaskBatch { batch, length, symbols, targets, mask, meta })
}

fn check_symbols(symbols: &[usize], len: usize, vocab: usize) -> Result<()> {
    if symbols.len() != len {
        return Err(FfmError::Dimension(format!("expected {len} symbols, got {}", symbols.len())));
    }
    if let Some(s) = symbols.iter().find(|&&s| s >= vocab) {
        return Err(FfmError::Config(format!("symbol {s} outside vocabulary of {vocab}")));
    }
    Ok(())
}

impl TaskBatch {
    pub fn vocab(&self) -> usize {
        self.meta.vocab
    }

    /// One-hot observations `(B, T, width)`, zero-padded past the vocabulary.
    pub fn observations(&self, width: usize) -> Result<Tensor> {
        self.check_width(width)?;
        let mut data = vec![0.0; self.batch * self.length * width];
        for (i, &s) in self.symbols.iter().enumerate() {
            data[i * width + s] = 1.0;
        }
        Tensor::real(&[self.batch, self.length, width], data)
    }

    /// One-hot observations laid out `(T, B, width)` for the models.
    pub fn observations_time_major(&self, width: usize) -> Result<Tensor> {
        self.check_width(width)?;
        let (b, t_len) = (self.batch, self.length);
        let mut data = vec![0.0; b * t_len * width];
        for bi in 0..b {
            for t in 0..t_len {
                data[(t * b + bi) * width + self.symbols[bi * t_len + t]] = 1.0;
            }
        }
        Tensor::real(&[t_len, b, width], data)
    }

    /// Targets and mask in `(T, B)` order, matching time-major model output.
    pub fn time_major_labels(&self) -> (Vec<usize>, Vec<bool>) {
        let (b, t_len) = (self.batch, self.length);
        let idx = |r: usize| (r % b) * t_len + r / b;
        let targets = (0..b * t_len).map(|r| self.targets[idx(r)]).collect();
        let mask = (0..b * t_len).map(|r| self.mask[idx(r)]).collect();
        (targets, mask)
    }

    pub fn scored(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| FfmError::Config(format!("cannot serialize batch: {e}")))
    }

    fn check_width(&self, width: usize) -> Result<()> {
        if width < self.vocab() {
            return Err(FfmError::Config(format!(
                "observation width {width} is smaller than the vocabulary {}",
                self.vocab()
            )));
        }
        Ok(())
    }
}
