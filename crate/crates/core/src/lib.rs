//! Distillation-aware channel pruning for alpha-matting networks.
//!
//! The toolkit trains a teacher on synthetic composites, sparsifies a student
//! of the same architecture under a distillation loss, cuts channels with small
//! batch-norm scaling factors (separate encoder and decoder thresholds), and
//! retrains the slim student from scratch with the same distillation signal.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod netgraph;
pub mod nn;
pub mod pipeline;
pub mod pruner;

pub use error::{Error, Result};
