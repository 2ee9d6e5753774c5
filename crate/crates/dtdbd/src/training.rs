//! Training loops: the adversarial (unbiased) teacher, the clean teacher,
//! the distilled student, and the plain supervised baseline they are all
//! measured against. Plus the two optimizers and frozen-model evaluation.
//!
//! Every loop is deterministic for a fixed config: initialization, batch
//! order, arithmetic and model selection depend only on the inputs. The
//! student loop skips zero-weight loss terms entirely, so a run with
//! weights (0, 0, 1) builds exactly the same graph as the supervised
//! baseline and reproduces it bit for bit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::diffcore::{Tape, Tensor};
use crate::losses::{
    add_loss, cross_entropy, dat_ie_loss, dkd_loss, overall_loss, pairwise_sq_distances,
    pairwise_sq_distances_data, DistillConfig, LossWeights,
};
use crate::metrics::{bias_report, MetricsReport};
use crate::models::{
    bind, bind_domain_head_const, classify, encode_batch, encoder_features_values, init_params,
    label_logits_values, predict, with_domain_embedding, EncoderConfig, Head, ModelParams,
};
use crate::schedule::{DaaConfig, DistillState};
use crate::{Error, Result};

/// Which objective a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Plain cross-entropy, no teachers.
    CeBaseline,
    /// Domain-adversarial teacher without the entropy term.
    Dat,
    /// Domain-adversarial teacher with the information-entropy term.
    DatIe,
    /// Student distilled from the clean teacher only (logits).
    DndOnly,
    /// Student distilled from the unbiased teacher only (distances).
    AddOnly,
    /// Both teachers with the dynamic weight schedule.
    Dtdbd,
    /// Both teachers at fixed initial weights.
    DtdbdNoDaa,
}

impl TrainMode {
    fn is_adversarial(self) -> bool {
        matches!(self, TrainMode::Dat | TrainMode::DatIe)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Hyperparameters shared by every training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    /// `None` picks the default for the mode: 1e-3 for adversarial
    /// teachers, 1e-4 everywhere else. Zero is allowed and makes the run
    /// a no-op on the parameters, which is occasionally useful in tests.
    pub learning_rate: Option<f64>,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after this many epochs without improvement on the selection
    /// metric; 0 disables early stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::CeBaseline,
            epochs: 10,
            learning_rate: None,
            optimizer: OptimizerKind::Adam,
            batch_size: 64,
            seed: 0,
            patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if let Some(lr) = self.learning_rate {
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::Config(format!(
                    "learning_rate must be finite and nonnegative, got {lr}"
                )));
            }
        }
        Ok(())
    }

    /// The learning rate actually used: an explicit value wins, otherwise
    /// the per-mode default.
    pub fn effective_learning_rate(&self) -> f64 {
        match self.learning_rate {
            Some(lr) => lr,
            None if self.mode.is_adversarial() => 1e-3,
            None => 1e-4,
        }
    }
}

/// Per-parameter first/second moment estimates for adam.
#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
    step: u64,
}

/// Optimizer state. SGD is stateless; adam tracks bias-corrected moments
/// per parameter, created lazily the first time a gradient arrives.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    lr: f64,
    moments: BTreeMap<String, Moments>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, moments: BTreeMap::new() }
    }

    /// Applies one update. Parameters without a gradient are untouched;
    /// a non-finite gradient aborts and names the offending parameter.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (name, grad) in grads {
            if grad.data().iter().any(|g| !g.is_finite()) {
                return Err(Error::NanGradient { param: name.clone() });
            }
            let tensor = params.tensors.get_mut(name).ok_or_else(|| {
                Error::Contract(format!("gradient for unknown parameter `{name}`"))
            })?;
            if tensor.shape() != grad.shape() {
                return Err(Error::Contract(format!(
                    "gradient shape {:?} does not match parameter `{name}` shape {:?}",
                    grad.shape(),
                    tensor.shape()
                )));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    let theta = tensor.data_mut();
                    for (t, g) in theta.iter_mut().zip(grad.data()) {
                        *t -= self.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let entry = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                        m: Tensor::zeros(grad.shape().to_vec()),
                        v: Tensor::zeros(grad.shape().to_vec()),
                        step: 0,
                    });
                    entry.step += 1;
                    let t = entry.step as i32;
                    let bc1 = 1.0 - ADAM_BETA1.powi(t);
                    let bc2 = 1.0 - ADAM_BETA2.powi(t);
                    let theta = tensor.data_mut();
                    let m = entry.m.data_mut();
                    let v = entry.v.data_mut();
                    for i in 0..theta.len() {
                        let g = grad.data()[i];
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        theta[i] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// One epoch of a training run: the weights in effect, the mean training
/// losses, and the validation metrics that drove selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub omega_add: f64,
    pub omega_dkd: f64,
    pub omega_s: f64,
    pub loss_total: f64,
    pub loss_ce: Option<f64>,
    pub loss_add: Option<f64>,
    pub loss_dkd: Option<f64>,
    pub loss_domain_ce: Option<f64>,
    pub loss_entropy: Option<f64>,
    pub val_f1: f64,
    pub val_fned: f64,
    pub val_fped: f64,
    pub val_total: f64,
}

/// A finished run: the best-epoch parameters, which epoch that was, the
/// full per-epoch trace, and whether patience cut the run short.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub best_epoch: usize,
    pub rows: Vec<EpochRow>,
    pub stopped_early: bool,
}

/// Model-selection rule, per objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Selection {
    /// Highest validation F1 (performance-only runs).
    BestF1,
    /// Lowest validation Total (the unbiased teacher).
    BestTotal,
    /// Lowest Total, ties broken by higher F1 (distilled students).
    BestTotalThenF1,
}

impl Selection {
    fn for_mode(mode: TrainMode) -> Self {
        match mode {
            TrainMode::CeBaseline | TrainMode::DndOnly => Selection::BestF1,
            TrainMode::Dat | TrainMode::DatIe => Selection::BestTotal,
            TrainMode::AddOnly | TrainMode::Dtdbd | TrainMode::DtdbdNoDaa => {
                Selection::BestTotalThenF1
            }
        }
    }

    /// Whether `candidate` strictly improves on `best`. Ties keep the
    /// earlier epoch, so reruns pick the same checkpoint.
    fn improves(self, candidate: (f64, f64), best: (f64, f64)) -> bool {
        let (cand_f1, cand_total) = candidate;
        let (best_f1, best_total) = best;
        match self {
            Selection::BestF1 => cand_f1 > best_f1,
            Selection::BestTotal => cand_total < best_total,
            Selection::BestTotalThenF1 => {
                cand_total < best_total || (cand_total == best_total && cand_f1 > best_f1)
            }
        }
    }
}

/// Tracks the best epoch seen so far and the patience countdown.
struct SelectionState {
    rule: Selection,
    patience: usize,
    best: Option<(f64, f64)>,
    best_epoch: usize,
    best_params: Option<ModelParams>,
    since_best: usize,
}

impl SelectionState {
    fn new(rule: Selection, patience: usize) -> Self {
        Self { rule, patience, best: None, best_epoch: 0, best_params: None, since_best: 0 }
    }

    /// Records an epoch; returns true when patience says stop.
    fn observe(&mut self, epoch: usize, f1: f64, total: f64, params: &ModelParams) -> bool {
        let improved = match self.best {
            None => true,
            Some(best) => self.rule.improves((f1, total), best),
        };
        if improved {
            self.best = Some((f1, total));
            self.best_epoch = epoch;
            self.best_params = Some(params.clone());
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.patience > 0 && self.since_best >= self.patience
    }

    fn finish(self) -> (ModelParams, usize) {
        let params = self.best_params.expect("at least one epoch observed");
        (params, self.best_epoch)
    }
}

/// Runs a frozen model over a dataset and reports F1 and the per-domain
/// error-rate parity metrics. Pure: same inputs, same report.
pub fn evaluate(params: &ModelParams, data: &Dataset) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let mut preds = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        preds.extend(predict(params, data, chunk)?);
    }
    bias_report(&data.labels(), &preds, &data.domains(), data.num_domains)
}

fn check_not_empty(train: &Dataset, val: &Dataset) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input("training and validation sets must be non-empty".into()));
    }
    Ok(())
}

/// Mean of the per-batch values accumulated for one loss component.
fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn guard_finite(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Contract(format!(
            "training diverged: non-finite loss {loss} at epoch {epoch}, step {step}"
        )));
    }
    Ok(())
}

/// Plain supervised training: cross-entropy only, best-validation-F1
/// checkpoint. This is both the student baseline and, pointed at a
/// domain-aware encoder config, the clean-teacher trainer.
pub fn train_supervised(
    train: &Dataset,
    val: &Dataset,
    encoder: &EncoderConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.mode != TrainMode::CeBaseline {
        return Err(Error::Config(format!(
            "train_supervised runs mode ce_baseline, got {:?}",
            config.mode
        )));
    }
    check_not_empty(train, val)?;
    let mut params = init_params(encoder, train.num_domains, config.seed)?;
    let mut opt = OptimizerState::new(config.optimizer, config.effective_learning_rate());
    let mut sel = SelectionState::new(Selection::for_mode(config.mode), config.patience);
    let mut rows = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..config.epochs {
        let mut ce_values = Vec::new();
        let schedule = batches(train.len(), config.batch_size, config.seed, epoch as u64)?;
        for (step, batch) in schedule.iter().enumerate() {
            let labels: Vec<usize> =
                batch.iter().map(|&i| train.samples[i].label as usize).collect();
            let mut tape = Tape::new();
            let b = bind(&mut tape, &params, true);
            let enc = encode_batch(&mut tape, &b, encoder, train, batch)?;
            let input = if encoder.domain_embed_dim > 0 {
                let domains: Vec<usize> =
                    batch.iter().map(|&i| train.samples[i].domain).collect();
                with_domain_embedding(&mut tape, &b, encoder, &enc, &domains)?
            } else {
                enc.matrix
            };
            let logits = classify(&mut tape, &b, Head::Label, input)?;
            let ce = cross_entropy(&mut tape, logits, &labels)?;
            let total = overall_loss(&mut tape, None, None, Some(ce), LossWeights::supervised_only())?;
            let loss_value = tape.value(total).item();
            guard_finite(loss_value, epoch, step)?;
            ce_values.push(loss_value);
            let grads = tape.backward(total)?;
            opt.step(&mut params, &grads)?;
        }
        let report = evaluate(&params, val)?;
        rows.push(EpochRow {
            epoch,
            omega_add: 0.0,
            omega_dkd: 0.0,
            omega_s: 1.0,
            loss_total: mean(&ce_values),
            loss_ce: Some(mean(&ce_values)),
            loss_add: None,
            loss_dkd: None,
            loss_domain_ce: None,
            loss_entropy: None,
            val_f1: report.f1,
            val_fned: report.fned,
            val_fped: report.fped,
            val_total: report.total,
        });
        if sel.observe(epoch, report.f1, report.total, &params) {
            stopped_early = true;
            break;
        }
    }
    let (best_params, best_epoch) = sel.finish();
    Ok(TrainOutcome { params: best_params, best_epoch, rows, stopped_early })
}

/// The clean teacher: supervised training under a (typically larger,
/// domain-aware) encoder config. Selection is best validation F1; the
/// returned parameters are meant to be frozen by the caller.
pub fn train_clean_teacher(
    train: &Dataset,
    val: &Dataset,
    encoder: &EncoderConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_supervised(train, val, encoder, config)
}

/// The unbiased teacher: adversarial domain confusion, with the domain
/// head learning to classify domains while reversed gradients push the
/// encoder the other way, plus (in `dat_ie` mode) an entropy term that
/// rewards uniform domain predictions. Selects the epoch with the lowest
/// validation Total.
pub fn train_unbiased_teacher(
    train: &Dataset,
    val: &Dataset,
    encoder: &EncoderConfig,
    config: &TrainConfig,
    distill: &DistillConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    distill.validate()?;
    if !config.mode.is_adversarial() {
        return Err(Error::Config(format!(
            "train_unbiased_teacher needs mode dat or dat_ie, got {:?}",
            config.mode
        )));
    }
    if train.num_domains < 2 {
        return Err(Error::Config(
            "adversarial training needs at least 2 domains; one domain makes the domain head degenerate"
                .into(),
        ));
    }
    if encoder.domain_embed_dim > 0 {
        return Err(Error::Config(
            "the unbiased teacher must not condition on domain identity; set domain_embed_dim to 0"
                .into(),
        ));
    }
    check_not_empty(train, val)?;
    // In plain dat mode the entropy term is dropped from the objective.
    let effective = if config.mode == TrainMode::Dat {
        DistillConfig { beta: Some(0.0), ..distill.clone() }
    } else {
        distill.clone()
    };
    let mut params = init_params(encoder, train.num_domains, config.seed)?;
    let mut opt = OptimizerState::new(config.optimizer, config.effective_learning_rate());
    let mut sel = SelectionState::new(Selection::for_mode(config.mode), config.patience);
    let mut rows = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..config.epochs {
        let mut totals = Vec::new();
        let mut label_ces = Vec::new();
        let mut domain_ces = Vec::new();
        let mut entropies = Vec::new();
        let schedule = batches(train.len(), config.batch_size, config.seed, epoch as u64)?;
        for (step, batch) in schedule.iter().enumerate() {
            let labels: Vec<usize> =
                batch.iter().map(|&i| train.samples[i].label as usize).collect();
            let domains: Vec<usize> =
                batch.iter().map(|&i| train.samples[i].domain).collect();
            let mut tape = Tape::new();
            let b = bind(&mut tape, &params, true);
            let enc = encode_batch(&mut tape, &b, encoder, train, batch)?;
            let label_logits = classify(&mut tape, &b, Head::Label, enc.matrix)?;
            // Adversarial path: reversed gradients reach the encoder, the
            // domain head itself trains normally.
            let reversed = tape.grad_reverse(enc.matrix, effective.alpha)?;
            let domain_logits_adv = classify(&mut tape, &b, Head::Domain, reversed)?;
            // Entropy path: reads the domain head as a constant so the
            // uniformity pressure lands on the encoder alone.
            let head_const = bind_domain_head_const(&mut tape, &params);
            let domain_logits_ie =
                classify(&mut tape, &head_const, Head::Domain, enc.matrix)?;
            let parts = dat_ie_loss(
                &mut tape,
                label_logits,
                domain_logits_adv,
                domain_logits_ie,
                &labels,
                &domains,
                &effective,
            )?;
            let loss_value = tape.value(parts.total).item();
            guard_finite(loss_value, epoch, step)?;
            totals.push(loss_value);
            label_ces.push(tape.value(parts.label_ce).item());
            domain_ces.push(tape.value(parts.domain_ce).item());
            entropies.push(tape.value(parts.entropy).item());
            let grads = tape.backward(parts.total)?;
            opt.step(&mut params, &grads)?;
        }
        let report = evaluate(&params, val)?;
        rows.push(EpochRow {
            epoch,
            omega_add: 0.0,
            omega_dkd: 0.0,
            omega_s: 1.0,
            loss_total: mean(&totals),
            loss_ce: Some(mean(&label_ces)),
            loss_add: None,
            loss_dkd: None,
            loss_domain_ce: Some(mean(&domain_ces)),
            loss_entropy: Some(mean(&entropies)),
            val_f1: report.f1,
            val_fned: report.fned,
            val_fped: report.fped,
            val_total: report.total,
        });
        if sel.observe(epoch, report.f1, report.total, &params) {
            stopped_early = true;
            break;
        }
    }
    let (best_params, best_epoch) = sel.finish();
    Ok(TrainOutcome { params: best_params, best_epoch, rows, stopped_early })
}

/// Frozen-teacher signals for one dataset: encoder features for the
/// distance matrices and label logits for the logit distillation, both
/// computed once up front. Row gathers per batch are bitwise identical to
/// re-encoding the batch because samples encode independently.
struct TeacherCache {
    features: Option<Tensor>,
    logits: Option<Tensor>,
}

impl TeacherCache {
    fn gather(source: &Tensor, idx: &[usize]) -> Tensor {
        let (_, cols) = source.dims2();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(&source.data()[i * cols..(i + 1) * cols]);
        }
        Tensor::new(vec![idx.len(), cols], data).expect("gather shape")
    }
}

fn precompute_features(params: &ModelParams, data: &Dataset) -> Result<Tensor> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut rows = Vec::with_capacity(data.len());
    let mut cols = 0;
    for chunk in idx.chunks(256) {
        let t = encoder_features_values(params, data, chunk)?;
        cols = t.dims2().1;
        rows.extend_from_slice(t.data());
    }
    Tensor::new(vec![data.len(), cols], rows)
}

fn precompute_logits(params: &ModelParams, data: &Dataset) -> Result<Tensor> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut rows = Vec::with_capacity(data.len() * 2);
    for chunk in idx.chunks(256) {
        let t = label_logits_values(params, data, chunk)?;
        rows.extend_from_slice(t.data());
    }
    Tensor::new(vec![data.len(), 2], rows)
}

fn require_teacher<'a>(
    teacher: Option<&'a ModelParams>,
    which: &str,
    mode: TrainMode,
) -> Result<&'a ModelParams> {
    teacher.ok_or_else(|| {
        Error::Config(format!("mode {mode:?} needs the {which} teacher, but none was given"))
    })
}

/// The distilled student. Depending on mode this is the plain baseline
/// (no teachers), a single-teacher ablation, or the full dual-teacher
/// objective with dynamically re-balanced weights. Returns the best
/// checkpoint and the full weight trajectory in the epoch rows.
#[allow(clippy::too_many_arguments)]
pub fn train_student(
    train: &Dataset,
    val: &Dataset,
    unbiased_teacher: Option<&ModelParams>,
    clean_teacher: Option<&ModelParams>,
    encoder: &EncoderConfig,
    config: &TrainConfig,
    distill: &DistillConfig,
    daa: &DaaConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    distill.validate()?;
    check_not_empty(train, val)?;
    if config.mode.is_adversarial() {
        return Err(Error::Config(format!(
            "mode {:?} belongs to train_unbiased_teacher, not the student loop",
            config.mode
        )));
    }

    // A fixed weight triple, or None for the dynamic schedule.
    let fixed_weights: Option<LossWeights> = match config.mode {
        TrainMode::CeBaseline => Some(LossWeights::supervised_only()),
        TrainMode::AddOnly => Some(LossWeights::new(1.0, 0.0, 1.0)),
        TrainMode::DndOnly => Some(LossWeights::new(0.0, 1.0, 1.0)),
        TrainMode::DtdbdNoDaa => {
            let state = DistillState::new(daa.clone())?;
            Some(state.weights())
        }
        TrainMode::Dtdbd => None,
        TrainMode::Dat | TrainMode::DatIe => unreachable!("rejected above"),
    };
    let mut daa_state = match config.mode {
        TrainMode::Dtdbd => Some(DistillState::new(daa.clone())?),
        _ => None,
    };

    let needs_unbiased = matches!(config.mode, TrainMode::AddOnly | TrainMode::Dtdbd | TrainMode::DtdbdNoDaa);
    let needs_clean = matches!(config.mode, TrainMode::DndOnly | TrainMode::Dtdbd | TrainMode::DtdbdNoDaa);

    let unbiased_cache = if needs_unbiased {
        let teacher = require_teacher(unbiased_teacher, "unbiased", config.mode)?;
        if teacher.encoder != *encoder {
            return Err(Error::Config(
                "the unbiased teacher's encoder config must be identical to the student's".into(),
            ));
        }
        if teacher.num_domains != train.num_domains {
            return Err(Error::Config(format!(
                "unbiased teacher was trained for {} domains, dataset has {}",
                teacher.num_domains, train.num_domains
            )));
        }
        Some(precompute_features(teacher, train)?)
    } else {
        None
    };
    let clean_cache = if needs_clean {
        let teacher = require_teacher(clean_teacher, "clean", config.mode)?;
        if teacher.num_domains != train.num_domains {
            return Err(Error::Config(format!(
                "clean teacher was trained for {} domains, dataset has {}",
                teacher.num_domains, train.num_domains
            )));
        }
        Some(precompute_logits(teacher, train)?)
    } else {
        None
    };
    let cache = TeacherCache { features: unbiased_cache, logits: clean_cache };

    let mut params = init_params(encoder, train.num_domains, config.seed)?;
    let mut opt = OptimizerState::new(config.optimizer, config.effective_learning_rate());
    let mut sel = SelectionState::new(Selection::for_mode(config.mode), config.patience);
    let mut rows = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..config.epochs {
        let weights = match (&fixed_weights, &daa_state) {
            (Some(w), _) => *w,
            (None, Some(state)) => state.weights(),
            (None, None) => unreachable!("one of the two is always set"),
        };
        let mut totals = Vec::new();
        let mut ce_values = Vec::new();
        let mut add_values = Vec::new();
        let mut dkd_values = Vec::new();
        let schedule = batches(train.len(), config.batch_size, config.seed, epoch as u64)?;
        for (step, batch) in schedule.iter().enumerate() {
            let labels: Vec<usize> =
                batch.iter().map(|&i| train.samples[i].label as usize).collect();
            let mut tape = Tape::new();
            let b = bind(&mut tape, &params, true);
            let enc = encode_batch(&mut tape, &b, encoder, train, batch)?;
            let input = if encoder.domain_embed_dim > 0 {
                let domains: Vec<usize> =
                    batch.iter().map(|&i| train.samples[i].domain).collect();
                with_domain_embedding(&mut tape, &b, encoder, &enc, &domains)?
            } else {
                enc.matrix
            };
            let logits = classify(&mut tape, &b, Head::Label, input)?;
            let l_ce = if weights.omega_s != 0.0 {
                Some(cross_entropy(&mut tape, logits, &labels)?)
            } else {
                None
            };
            let l_add = if weights.omega_add != 0.0 {
                let features = cache.features.as_ref().expect("unbiased cache present");
                let m_teacher =
                    pairwise_sq_distances_data(&TeacherCache::gather(features, batch))?;
                let m_student = pairwise_sq_distances(&mut tape, enc.matrix)?;
                Some(add_loss(&mut tape, &m_teacher, m_student, distill)?)
            } else {
                None
            };
            let l_dkd = if weights.omega_dkd != 0.0 {
                let all_logits = cache.logits.as_ref().expect("clean cache present");
                let teacher_logits = TeacherCache::gather(all_logits, batch);
                Some(dkd_loss(&mut tape, &teacher_logits, logits, distill)?)
            } else {
                None
            };
            let total = overall_loss(&mut tape, l_add, l_dkd, l_ce, weights)?;
            let loss_value = tape.value(total).item();
            guard_finite(loss_value, epoch, step)?;
            totals.push(loss_value);
            if let Some(v) = l_ce {
                ce_values.push(tape.value(v).item());
            }
            if let Some(v) = l_add {
                add_values.push(tape.value(v).item());
            }
            if let Some(v) = l_dkd {
                dkd_values.push(tape.value(v).item());
            }
            let grads = tape.backward(total)?;
            opt.step(&mut params, &grads)?;
        }
        let report = evaluate(&params, val)?;
        let maybe_mean = |vals: &Vec<f64>| if vals.is_empty() { None } else { Some(mean(vals)) };
        rows.push(EpochRow {
            epoch,
            omega_add: weights.omega_add,
            omega_dkd: weights.omega_dkd,
            omega_s: weights.omega_s,
            loss_total: mean(&totals),
            loss_ce: maybe_mean(&ce_values),
            loss_add: maybe_mean(&add_values),
            loss_dkd: maybe_mean(&dkd_values),
            loss_domain_ce: None,
            loss_entropy: None,
            val_f1: report.f1,
            val_fned: report.fned,
            val_fped: report.fped,
            val_total: report.total,
        });
        if let Some(state) = daa_state.as_mut() {
            state.record(report.f1, report.total);
            state.step();
        }
        if sel.observe(epoch, report.f1, report.total, &params) {
            stopped_early = true;
            break;
        }
    }
    let (best_params, best_epoch) = sel.finish();
    Ok(TrainOutcome { params: best_params, best_epoch, rows, stopped_early })
}
