//! FFM memory models.
//!
//! A sequence memory whose recurrent state is a decayed, phase-rotated sum of
//! gated inputs. The same state can be produced one step at a time (constant
//! cost per step) or for a whole sequence at once with a prefix sum.
//!
//! Crate layout:
//! - [`numerics`]: tensors, the gradient tape, the blocked prefix sum
//! - [`aggregator`]: the decay operator and the recurrent/parallel state update
//! - [`cell`]: the full memory cell, its ablation variants, initialization,
//!   interpretability
//! - [`baselines`]: GRU and MLP reference models
//! - [`model`]: memory model plus readout head, as trained and checkpointed
//! - [`checkpoint`]: bit-exact JSON checkpoints
//! - [`tasks`]: synthetic partially observable sequence tasks
//! - [`trainer`]: supervised training and evaluation
//! - [`bench`]: timing/memory harness and the self-test
//! - [`cli`]: the `ffm` command-line driver

pub mod aggregator;
pub mod baselines;
pub mod bench;
pub mod cell;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod model;
pub mod numerics;
pub mod tasks;
pub mod trainer;

pub use error::{FfmError, Result};
