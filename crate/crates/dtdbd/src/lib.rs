//! Dual-teacher de-biasing distillation (DTDBD) for multi-domain
//! classification, at desk scale and in pure Rust.
//!
//! Classifiers trained across several domains tend to absorb per-domain
//! label priors: they look at *where* a sample comes from instead of *what
//! it says*, and their false-positive / false-negative rates drift apart
//! between domains. This crate trains a student against two frozen
//! teachers, one optimized to be domain-blind and one optimized for raw
//! accuracy, and balances their influence epoch by epoch from validation
//! feedback.
//!
//! The pieces:
//!
//! - [`diffcore`]: a small f64 reverse-mode autodiff tape (dense tensors,
//!   the dozen ops the models below need, finite-difference checking).
//! - [`models`]: conv and MLP encoders with linear label / domain heads,
//!   deterministic initialization, JSON checkpoints.
//! - [`losses`]: cross-entropy, an entropy reward for domain confusion,
//!   pairwise-distance distillation (ADD), logit distillation (DKD), and
//!   the weighted overall objective.
//! - [`schedule`]: the momentum update that re-balances the two
//!   distillation weights from validation F1 / bias deltas.
//! - [`metrics`]: per-domain error-rate parity (FPED / FNED), macro F1,
//!   report rendering.
//! - [`data`]: a synthetic multi-domain corpus with a plantable domain
//!   shortcut, JSONL persistence, stratified splits, seeded batching.
//! - [`training`]: optimizers, the teacher and student training loops,
//!   evaluation.
//! - [`experiment`] / [`report`] / [`cli`]: the end-to-end harness behind
//!   the `dtdbd` binary.
//!
//! Every run is deterministic for a fixed seed: same data, same batches,
//! same floats, byte-identical output files.
//!
//! The `examples/` directory is the guided tour; each file runs in well
//! under a minute:
//!
//! ```text
//! cargo run --example gradient_check            autodiff vs finite differences
//! cargo run --example generate_data             synthetic corpus + bias profile
//! cargo run --example bias_report               FPED / FNED on a toy predictor
//! cargo run --example weight_schedule           the distillation-weight update
//! cargo run --example train_unbiased_teacher    adversarial de-biasing vs plain CE
//! cargo run --example distill_student           the full dual-teacher pipeline
//! ```

pub mod cli;
pub mod data;
pub mod diffcore;
mod error;
pub mod experiment;
mod ioutil;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod report;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};
