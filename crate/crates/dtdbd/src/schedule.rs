//! Momentum-based dynamic adjustment (DAA) of the two teacher weights.
//!
//! After each epoch the student records its validation macro-F1 and Total
//! bias. Once two epochs of history exist, the weight on the unbiased
//! teacher's ADD loss follows a momentum recursion driven by the change
//! in those two metrics, and the clean teacher's DKD weight mirrors it so
//! the pair always sums to one.

use crate::losses::LossWeights;
use crate::{Error, Result};

/// Fixed hyperparameters of the DAA recursion.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DaaConfig {
    /// Starting weight on the ADD term. Both teachers start equal.
    pub initial_omega_add: f64,
    /// Constant weight on the supervised cross-entropy term.
    pub omega_s: f64,
    /// Momentum coefficient m in [0, 1).
    pub momentum: f64,
    /// Lower clamp for omega_add; keeps the unbiased teacher active.
    pub omega_min: f64,
    /// Upper clamp for omega_add; keeps the clean teacher active.
    pub omega_max: f64,
    /// Reverses the sign of the metric-delta response. As written, a
    /// worsening bias lowers omega_add; flipping makes it raise it.
    pub sign_flip: bool,
    /// When set to the domain count, the bias delta is divided by
    /// 2 * num_domains to put it on a scale comparable to the F1 delta.
    pub normalize_bias: Option<usize>,
}

impl Default for DaaConfig {
    fn default() -> Self {
        Self {
            initial_omega_add: 0.5,
            omega_s: 1.0,
            momentum: 0.9,
            omega_min: 0.05,
            omega_max: 0.95,
            sign_flip: false,
            normalize_bias: None,
        }
    }
}

impl DaaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::Contract(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.omega_min >= 0.0
            && self.omega_min <= self.omega_max
            && self.omega_max <= 1.0)
        {
            return Err(Error::Contract(format!(
                "weight band [{}, {}] must satisfy 0 <= min <= max <= 1",
                self.omega_min, self.omega_max
            )));
        }
        if !(self.initial_omega_add >= self.omega_min
            && self.initial_omega_add <= self.omega_max)
        {
            return Err(Error::Contract(format!(
                "initial omega_add {} outside the clamp band [{}, {}]",
                self.initial_omega_add, self.omega_min, self.omega_max
            )));
        }
        if !(self.omega_s >= 0.0 && self.omega_s.is_finite()) {
            return Err(Error::Contract(format!(
                "omega_s must be finite and >= 0, got {}",
                self.omega_s
            )));
        }
        if self.normalize_bias == Some(0) {
            return Err(Error::Contract(
                "bias normalization needs a nonzero domain count".into(),
            ));
        }
        Ok(())
    }
}

/// One epoch's validation measurements, in recording order.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochMetrics {
    pub val_f1: f64,
    pub val_total: f64,
}

/// Mutable teacher-weight state carried across a student training run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DistillState {
    pub config: DaaConfig,
    pub omega_add: f64,
    pub omega_dkd: f64,
    pub history: Vec<EpochMetrics>,
}

impl DistillState {
    pub fn new(config: DaaConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            omega_add: config.initial_omega_add,
            omega_dkd: 1.0 - config.initial_omega_add,
            history: Vec::new(),
            config,
        })
    }

    /// The current (omega_add, omega_dkd, omega_s) triple.
    pub fn weights(&self) -> LossWeights {
        LossWeights::new(self.omega_add, self.omega_dkd, self.config.omega_s)
    }

    pub fn record(&mut self, val_f1: f64, val_total: f64) {
        self.history.push(EpochMetrics { val_f1, val_total });
    }

    /// Applies one weight update if at least two epochs are on record;
    /// returns whether anything changed. Callers keep the initial weights
    /// through the first two epochs.
    pub fn step(&mut self) -> bool {
        match compute_deltas(&self.history) {
            None => false,
            Some((delta_f1, delta_bias)) => {
                *self = update_distill_weights(self, delta_f1, delta_bias);
                true
            }
        }
    }
}

/// Metric movement between the last two recorded epochs, or `None` while
/// fewer than two epochs exist (the not-ready signal).
pub fn compute_deltas(history: &[EpochMetrics]) -> Option<(f64, f64)> {
    if history.len() < 2 {
        return None;
    }
    let prev = history[history.len() - 2];
    let last = history[history.len() - 1];
    Some((last.val_f1 - prev.val_f1, last.val_total - prev.val_total))
}

/// One step of the momentum recursion:
/// omega_add <- clamp(m * omega_add - (1 - m) * s * (delta_bias - delta_f1)),
/// with s = -1 under `sign_flip`, then omega_dkd = 1 - omega_add.
pub fn update_distill_weights(
    state: &DistillState,
    delta_f1: f64,
    delta_bias: f64,
) -> DistillState {
    let cfg = &state.config;
    let s = if cfg.sign_flip { -1.0 } else { 1.0 };
    let bias = match cfg.normalize_bias {
        Some(k) => delta_bias / (2.0 * k as f64),
        None => delta_bias,
    };
    let raw = cfg.momentum * state.omega_add - (1.0 - cfg.momentum) * s * (bias - delta_f1);
    let omega_add = raw.clamp(cfg.omega_min, cfg.omega_max);
    DistillState {
        config: state.config,
        omega_add,
        omega_dkd: 1.0 - omega_add,
        history: state.history.clone(),
    }
}
