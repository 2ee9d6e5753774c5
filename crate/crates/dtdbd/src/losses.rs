//! Training objectives: supervised cross-entropy, the information-entropy
//! regularizer, the DAT-IE composite for the unbiased teacher, pairwise
//! distance structure distillation (ADD), clean-logit distillation (DKD),
//! and the weighted overall loss that combines them.
//!
//! Teacher-side quantities enter every distillation loss as plain tensors,
//! never as tape nodes, so gradients structurally cannot flow into a
//! teacher. Teacher and student sides share the same softmax and distance
//! kernels, which makes the losses exactly zero when both sides coincide.

use crate::diffcore::{
    log_softmax_rows_data, pairwise_sq_dist_data, softmax_rows_data, Tape, Tensor, Var,
};
use crate::{Error, Result};

/// Which operand of the distillation KL divergence acts as the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(teacher || student): the teacher distribution is the target.
    #[default]
    TeacherAsTarget,
    /// KL(student || teacher), preserving the operand order of the ADD
    /// formula as printed. Kept for A/B comparison.
    LiteralPaperOrder,
}

/// Hyperparameters shared by the distillation and teacher losses.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Distillation temperature. Both KL losses soften their inputs by
    /// 1/tau and rescale the divergence by tau^2.
    pub tau: f64,
    /// Weight of the domain-adversarial cross-entropy inside DAT-IE.
    pub alpha: f64,
    /// Weight of the information-entropy term inside DAT-IE. `None`
    /// derives 0.2 * alpha; set explicitly to override.
    pub beta: Option<f64>,
    /// Whether the zero diagonal of a distance matrix participates in its
    /// row softmax. When false the diagonal is masked out of both sides.
    pub include_diagonal: bool,
    pub kl_direction: KlDirection,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self::with_alpha(1.0)
    }
}

impl DistillConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            tau: 4.0,
            alpha,
            beta: None,
            include_diagonal: true,
            kl_direction: KlDirection::default(),
        }
    }

    /// Effective entropy weight: 0.2 * alpha unless overridden.
    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(0.2 * self.alpha)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Contract(format!(
                "distillation temperature must be positive and finite, got {}",
                self.tau
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Contract(format!(
                "adversarial weight alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        let beta = self.beta();
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Contract(format!(
                "entropy weight beta must be finite and >= 0, got {beta}"
            )));
        }
        Ok(())
    }
}

/// The (omega_add, omega_dkd, omega_s) triple of the overall objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub omega_add: f64,
    pub omega_dkd: f64,
    pub omega_s: f64,
}

impl LossWeights {
    pub fn new(omega_add: f64, omega_dkd: f64, omega_s: f64) -> Self {
        Self { omega_add, omega_dkd, omega_s }
    }

    /// Plain supervised training: (0, 0, 1).
    pub fn supervised_only() -> Self {
        Self::new(0.0, 0.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("omega_add", self.omega_add),
            ("omega_dkd", self.omega_dkd),
            ("omega_s", self.omega_s),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Contract(format!(
                    "loss weight {name} must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }
}

fn dims2_checked(tape: &Tape, v: Var, what: &str) -> Result<(usize, usize)> {
    let shape = tape.value(v).shape();
    if shape.len() != 2 {
        return Err(Error::Input(format!("{what} must be rank-2, got shape {shape:?}")));
    }
    Ok((shape[0], shape[1]))
}

/// Mean over the batch of the negative log-likelihood of the true class
/// under row-softmaxed logits. Computed through log-softmax, so extreme
/// logits stay finite.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, c) = dims2_checked(tape, logits, "logits")?;
    if b == 0 {
        return Err(Error::Input("cross-entropy over an empty batch".into()));
    }
    if labels.len() != b {
        return Err(Error::Input(format!(
            "{} labels for a batch of {b} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
    }
    let lsm = tape.log_softmax_rows(logits);
    // CE = sum(lsm .* W) where W holds -1/B at each true-class slot.
    let mut w = Tensor::zeros(vec![b, c]);
    let fill = -1.0 / b as f64;
    for (i, &y) in labels.iter().enumerate() {
        w.data_mut()[i * c + y] = fill;
    }
    let wv = tape.constant(w);
    let prod = tape.mul(lsm, wv);
    Ok(tape.sum(prod))
}

/// Mean over the batch of sum_k p_k log p_k, the negative Shannon entropy
/// of each row's softmax. Ranges over [-log K, 0] and is minimized by
/// uniform rows, so gradient descent on it pushes domain predictions
/// toward maximal confusion.
///
/// The 0 * log 0 limit falls out of the arithmetic: a probability that
/// underflows to zero multiplies a finite log-softmax entry.
pub fn information_entropy_loss(tape: &mut Tape, domain_logits: Var) -> Result<Var> {
    let (b, k) = dims2_checked(tape, domain_logits, "domain logits")?;
    if b == 0 {
        return Err(Error::Input("information entropy over an empty batch".into()));
    }
    if k < 2 {
        return Err(Error::Input(format!(
            "information entropy needs at least 2 domains, got {k}"
        )));
    }
    let p = tape.softmax_rows(domain_logits);
    let lp = tape.log_softmax_rows(domain_logits);
    let prod = tape.mul(p, lp);
    let total = tape.sum(prod);
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// The DAT-IE composite and its pieces, all nodes on the same tape.
#[derive(Debug, Clone, Copy)]
pub struct DatIeParts {
    pub total: Var,
    pub label_ce: Var,
    pub domain_ce: Var,
    pub entropy: Var,
}

/// Unbiased-teacher objective: label cross-entropy plus alpha-weighted
/// domain cross-entropy plus beta-weighted information entropy.
///
/// Gradient routing is the caller's contract: `domain_logits_adv` should
/// be computed through a gradient-reversed encoder path with a trainable
/// domain head, while `domain_logits_ie` should see the same encoder
/// features directly with the domain head held constant. The two paths
/// then push the encoder toward domain confusion from both sides while
/// the domain head itself trains only on its cross-entropy.
pub fn dat_ie_loss(
    tape: &mut Tape,
    label_logits: Var,
    domain_logits_adv: Var,
    domain_logits_ie: Var,
    y: &[usize],
    d: &[usize],
    cfg: &DistillConfig,
) -> Result<DatIeParts> {
    cfg.validate()?;
    let label_ce = cross_entropy(tape, label_logits, y)?;
    let domain_ce = cross_entropy(tape, domain_logits_adv, d)?;
    let entropy = information_entropy_loss(tape, domain_logits_ie)?;
    let beta = cfg.beta();
    let mut total = label_ce;
    if cfg.alpha != 0.0 {
        let term =
            if cfg.alpha == 1.0 { domain_ce } else { tape.scale(domain_ce, cfg.alpha) };
        total = tape.add(total, term);
    }
    if beta != 0.0 {
        let term = if beta == 1.0 { entropy } else { tape.scale(entropy, beta) };
        total = tape.add(total, term);
    }
    Ok(DatIeParts { total, label_ce, domain_ce, entropy })
}

/// All pairwise squared Euclidean distances between feature rows, as a
/// tape node. Exactly symmetric with an exactly zero diagonal.
pub fn pairwise_sq_distances(tape: &mut Tape, features: Var) -> Result<Var> {
    let (b, _) = dims2_checked(tape, features, "features")?;
    if b < 2 {
        return Err(Error::Input(format!(
            "pairwise distances need a batch of at least 2 rows, got {b}"
        )));
    }
    Ok(tape.pairwise_sq_dist(features))
}

/// No-grad twin of [`pairwise_sq_distances`] for teacher features. Both
/// run the same kernel, so identical inputs give bit-identical matrices.
pub fn pairwise_sq_distances_data(features: &Tensor) -> Result<Tensor> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(Error::Input(format!("features must be rank-2, got shape {shape:?}")));
    }
    let (b, f) = features.dims2();
    if b < 2 {
        return Err(Error::Input(format!(
            "pairwise distances need a batch of at least 2 rows, got {b}"
        )));
    }
    let mut out = vec![0.0; b * b];
    pairwise_sq_dist_data(b, f, features.data(), &mut out);
    Ok(Tensor::from_op(vec![b, b], out))
}

/// Additive mask that removes an entry from a row softmax. Large enough
/// that its exponential underflows to exactly zero, small enough to stay
/// finite through every downstream subtraction.
const MASKED: f64 = -1e30;

/// Sum over rows of KL between the row-softmaxed teacher (constant) and
/// student (tape node) matrices, both already divided by the temperature.
fn kl_row_sum(tape: &mut Tape, teacher_scaled: &Tensor, student_scaled: Var, direction: KlDirection) -> Var {
    let (r, c) = teacher_scaled.dims2();
    let mut lp = vec![0.0; r * c];
    log_softmax_rows_data(r, c, teacher_scaled.data(), &mut lp);
    let log_p_t = tape.constant(Tensor::from_op(vec![r, c], lp));
    match direction {
        KlDirection::TeacherAsTarget => {
            let mut p = vec![0.0; r * c];
            softmax_rows_data(r, c, teacher_scaled.data(), &mut p);
            let p_t = tape.constant(Tensor::from_op(vec![r, c], p));
            let log_q_s = tape.log_softmax_rows(student_scaled);
            let diff = tape.sub(log_p_t, log_q_s);
            let prod = tape.mul(p_t, diff);
            tape.sum(prod)
        }
        KlDirection::LiteralPaperOrder => {
            let q_s = tape.softmax_rows(student_scaled);
            let log_q_s = tape.log_softmax_rows(student_scaled);
            let diff = tape.sub(log_q_s, log_p_t);
            let prod = tape.mul(q_s, diff);
            tape.sum(prod)
        }
    }
}

/// Shared body of the two distillation losses: soften both sides by
/// 1/tau, optionally mask the diagonal, and return tau^2 times the mean
/// row KL.
fn distill_kl(
    tape: &mut Tape,
    teacher: &Tensor,
    student: Var,
    cfg: &DistillConfig,
    mask_diagonal: bool,
) -> Var {
    let (r, c) = teacher.dims2();
    let inv = 1.0 / cfg.tau;
    let mut teacher_scaled =
        Tensor::from_op(teacher.shape().to_vec(), teacher.data().iter().map(|v| v * inv).collect());
    let mut student_scaled = tape.scale(student, inv);
    if mask_diagonal {
        let mut mask = Tensor::zeros(vec![r, c]);
        for i in 0..r {
            mask.data_mut()[i * c + i] = MASKED;
        }
        for (t, m) in teacher_scaled.data_mut().iter_mut().zip(mask.data()) {
            *t += *m;
        }
        let mask_var = tape.constant(mask);
        student_scaled = tape.add(student_scaled, mask_var);
    }
    let total = kl_row_sum(tape, &teacher_scaled, student_scaled, cfg.kl_direction);
    tape.scale(total, cfg.tau * cfg.tau / r as f64)
}

/// ADD: structure distillation from the unbiased teacher. tau^2 times the
/// mean over rows of KL between the row-softmaxed, temperature-softened
/// distance matrices. Gradients flow only into `m_student`.
pub fn add_loss(
    tape: &mut Tape,
    m_teacher: &Tensor,
    m_student: Var,
    cfg: &DistillConfig,
) -> Result<Var> {
    cfg.validate()?;
    let shape = m_teacher.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Input(format!(
            "teacher distance matrix must be square, got shape {shape:?}"
        )));
    }
    if tape.value(m_student).shape() != shape {
        return Err(Error::Input(format!(
            "distance matrix shapes differ: teacher {:?} vs student {:?}",
            shape,
            tape.value(m_student).shape()
        )));
    }
    Ok(distill_kl(tape, m_teacher, m_student, cfg, !cfg.include_diagonal))
}

/// DKD: logit distillation from the clean teacher. tau^2 times the mean
/// over the batch of KL between temperature-softened class distributions.
/// Gradients flow only into `student_logits`.
pub fn dkd_loss(
    tape: &mut Tape,
    teacher_logits: &Tensor,
    student_logits: Var,
    cfg: &DistillConfig,
) -> Result<Var> {
    cfg.validate()?;
    let shape = teacher_logits.shape();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::Input(format!(
            "teacher logits must be rank-2 with at least 2 classes, got shape {shape:?}"
        )));
    }
    if tape.value(student_logits).shape() != shape {
        return Err(Error::Input(format!(
            "logit shapes differ: teacher {:?} vs student {:?}",
            shape,
            tape.value(student_logits).shape()
        )));
    }
    Ok(distill_kl(tape, teacher_logits, student_logits, cfg, false))
}

/// Weighted total objective. Zero-weight terms stay out of the graph
/// entirely and unit weights reuse the term's node unchanged, so
/// degenerate weight settings reduce to exactly the smaller objective.
pub fn overall_loss(
    tape: &mut Tape,
    l_add: Option<Var>,
    l_dkd: Option<Var>,
    l_ce: Option<Var>,
    weights: LossWeights,
) -> Result<Var> {
    weights.validate()?;
    let mut acc: Option<Var> = None;
    for (name, w, term) in [
        ("omega_add", weights.omega_add, l_add),
        ("omega_dkd", weights.omega_dkd, l_dkd),
        ("omega_s", weights.omega_s, l_ce),
    ] {
        if w == 0.0 {
            continue;
        }
        let var = term.ok_or_else(|| {
            Error::Contract(format!("{name} is {w} but its loss term is missing"))
        })?;
        let scaled = if w == 1.0 { var } else { tape.scale(var, w) };
        acc = Some(match acc {
            None => scaled,
            Some(a) => tape.add(a, scaled),
        });
    }
    acc.ok_or_else(|| {
        Error::Contract("overall loss has no active terms (all weights are zero)".into())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::check::testing::{assert_grads_match, rand_tensor};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    const LN_2: f64 = std::f64::consts::LN_2;

    fn scalar_of(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item()
    }

    /// Scalar KL oracle over two explicit probability vectors.
    fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
        p.iter()
            .zip(q)
            .map(|(&pi, &qi)| if pi == 0.0 { 0.0 } else { pi * (pi / qi).ln() })
            .sum()
    }

    fn softmax_oracle(x: &[f64]) -> Vec<f64> {
        let m = x.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let e: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    #[test]
    fn ce_of_uniform_two_way_logits_is_ln_2() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let ce = cross_entropy(&mut tape, logits, &[0]).unwrap();
        assert!((scalar_of(&tape, ce) - LN_2).abs() < 1e-12);
    }

    #[test]
    fn ce_is_stable_for_extreme_logits() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
        let ce = cross_entropy(&mut tape, logits, &[0]).unwrap();
        let v = scalar_of(&tape, ce);
        assert!(v.is_finite() && v.abs() < 1e-9, "got {v}");
        let ce_wrong = cross_entropy(&mut tape, logits, &[1]).unwrap();
        let w = scalar_of(&tape, ce_wrong);
        assert!(w.is_finite() && (w - 1000.0).abs() < 1e-9, "got {w}");
    }

    #[test]
    fn ce_two_sample_batch_matches_analytic_mean() {
        let mut tape = Tape::new();
        let logits = tape
            .constant(Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 3.0_f64.ln()]).unwrap());
        let ce = cross_entropy(&mut tape, logits, &[0, 1]).unwrap();
        let expect = 0.5 * (LN_2 + (4.0 / 3.0_f64).ln());
        assert!((scalar_of(&tape, ce) - expect).abs() < 1e-12);
        assert!((scalar_of(&tape, ce) - 0.490415).abs() < 1e-6);
    }

    #[test]
    fn ce_rejects_bad_labels_and_shapes() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap());
        assert!(cross_entropy(&mut tape, logits, &[0, 2]).is_err());
        assert!(cross_entropy(&mut tape, logits, &[0]).is_err());
        let vec_node = tape.constant(Tensor::new(vec![2], vec![0.0; 2]).unwrap());
        assert!(cross_entropy(&mut tape, vec_node, &[0]).is_err());
    }

    #[test]
    fn ce_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..5 {
            let logits = rand_tensor(&mut rng, &[4, 3]);
            assert_grads_match(&[("logits", logits)], |t, v| {
                cross_entropy(t, v["logits"], &[0, 2, 1, 1]).unwrap()
            });
        }
    }

    #[test]
    fn ie_of_uniform_logits_is_minus_ln_k() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::filled(vec![3, 9], 0.7));
        let ie = information_entropy_loss(&mut tape, logits).unwrap();
        assert!((scalar_of(&tape, ie) + 9.0_f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn ie_of_one_hot_probabilities_is_zero() {
        // A hard row underflows the off-class probabilities to exactly
        // zero; the 0 * log 0 convention keeps the loss finite and ~0.
        let mut tape = Tape::new();
        let logits =
            tape.constant(Tensor::new(vec![1, 3], vec![2000.0, 0.0, 0.0]).unwrap());
        let ie = information_entropy_loss(&mut tape, logits).unwrap();
        let v = scalar_of(&tape, ie);
        assert!(v.is_finite() && v.abs() < 1e-9, "got {v}");
    }

    #[test]
    fn ie_of_even_binary_split_is_minus_ln_2() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let ie = information_entropy_loss(&mut tape, logits).unwrap();
        assert!((scalar_of(&tape, ie) + LN_2).abs() < 1e-12);
    }

    #[test]
    fn ie_is_bounded_with_uniform_as_the_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..20 {
            let logits = rand_tensor(&mut rng, &[5, 9]);
            let mut tape = Tape::new();
            let lv = tape.constant(logits);
            let ie = information_entropy_loss(&mut tape, lv).unwrap();
            let v = scalar_of(&tape, ie);
            assert!(v >= -(9.0_f64.ln()) - 1e-12 && v <= 1e-12, "out of range: {v}");
        }
    }

    #[test]
    fn ie_rejects_single_domain() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap());
        assert!(information_entropy_loss(&mut tape, logits).is_err());
    }

    #[test]
    fn ie_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..5 {
            let logits = rand_tensor(&mut rng, &[4, 9]);
            assert_grads_match(&[("logits", logits)], |t, v| {
                information_entropy_loss(t, v["logits"]).unwrap()
            });
        }
    }

    #[test]
    fn dat_ie_composition_matches_analytic_values() {
        // Label logits [0,0] with label 0: CE_y = ln 2. Uniform domain
        // logits over 9: CE_d = ln 9 and IE = -ln 9. With alpha=1 and
        // beta=0.2 the total is ln 2 + 0.8 ln 9 = 2.450927.
        let mut tape = Tape::new();
        let label = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let dom = tape.constant(Tensor::zeros(vec![1, 9]));
        let cfg = DistillConfig::with_alpha(1.0);
        let parts = dat_ie_loss(&mut tape, label, dom, dom, &[0], &[4], &cfg).unwrap();
        let ln9 = 9.0_f64.ln();
        assert!((scalar_of(&tape, parts.label_ce) - LN_2).abs() < 1e-12);
        assert!((scalar_of(&tape, parts.domain_ce) - ln9).abs() < 1e-12);
        assert!((scalar_of(&tape, parts.entropy) + ln9).abs() < 1e-12);
        let total = scalar_of(&tape, parts.total);
        assert!((total - (LN_2 + 0.8 * ln9)).abs() < 1e-12);
        assert!((total - 2.450927).abs() < 1e-6);
    }

    #[test]
    fn dat_ie_with_zero_alpha_is_exactly_the_label_ce() {
        let mut tape = Tape::new();
        let label = tape.constant(Tensor::new(vec![2, 2], vec![0.3, -0.1, 0.9, 0.2]).unwrap());
        let dom = tape.constant(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap());
        let cfg = DistillConfig::with_alpha(0.0);
        let parts = dat_ie_loss(&mut tape, label, dom, dom, &[0, 1], &[1, 2], &cfg).unwrap();
        assert_eq!(parts.total, parts.label_ce);
    }

    #[test]
    fn dat_ie_backward_flips_the_reversed_domain_path() {
        // The adversarial path runs through grad_reverse, so the encoder
        // gradient of the composite must equal the finite-difference
        // gradient of CE_y - lambda*alpha*CE_d + beta*IE, the sign-flipped
        // twin with no reversal node.
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let cfg = DistillConfig::with_alpha(1.0);
        let lambda = cfg.alpha;
        for _ in 0..3 {
            let feats = rand_tensor(&mut rng, &[3, 4]);
            let w_y = rand_tensor(&mut rng, &[4, 2]);
            let w_d = rand_tensor(&mut rng, &[4, 3]);
            let y = [0usize, 1, 0];
            let d = [2usize, 0, 1];

            let mut tape = Tape::new();
            let fv = tape.param("feats", feats.clone());
            let wyv = tape.constant(w_y.clone());
            let wdv = tape.constant(w_d.clone());
            let label_logits = tape.matmul(fv, wyv);
            let rev = tape.grad_reverse(fv, lambda).unwrap();
            let adv_logits = tape.matmul(rev, wdv);
            let ie_logits = tape.matmul(fv, wdv);
            let parts =
                dat_ie_loss(&mut tape, label_logits, adv_logits, ie_logits, &y, &d, &cfg)
                    .unwrap();
            let grads = tape.backward(parts.total).unwrap();

            let flipped = |probe: &Tensor| -> f64 {
                let mut t = Tape::new();
                let fv = t.constant(probe.clone());
                let wyv = t.constant(w_y.clone());
                let wdv = t.constant(w_d.clone());
                let label_logits = t.matmul(fv, wyv);
                let dom_logits = t.matmul(fv, wdv);
                let ce_y = cross_entropy(&mut t, label_logits, &y).unwrap();
                let ce_d = cross_entropy(&mut t, dom_logits, &d).unwrap();
                let ie = information_entropy_loss(&mut t, dom_logits).unwrap();
                t.value(ce_y).item() - lambda * cfg.alpha * t.value(ce_d).item()
                    + cfg.beta() * t.value(ie).item()
            };
            let fd = crate::diffcore::finite_diff_grad(flipped, &feats, 1e-6);
            for (i, (&a, &b)) in grads["feats"].data().iter().zip(fd.data()).enumerate() {
                let tol = 1e-7 + 1e-5 * a.abs().max(b.abs());
                assert!((a - b).abs() <= tol, "feats[{i}]: {a} vs {b}");
            }
        }
    }

    #[test]
    fn pairwise_rejects_tiny_batches() {
        let mut tape = Tape::new();
        let one = tape.constant(Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap());
        assert!(pairwise_sq_distances(&mut tape, one).is_err());
        assert!(pairwise_sq_distances_data(&Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap())
            .is_err());
    }

    #[test]
    fn pairwise_three_four_five() {
        let feats = Tensor::new(vec![2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        let m = pairwise_sq_distances_data(&feats).unwrap();
        assert_eq!(m.data(), &[0.0, 25.0, 25.0, 0.0]);
    }

    #[test]
    fn pairwise_matches_brute_force_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let feats = rand_tensor(&mut rng, &[5, 8]);
        let m = pairwise_sq_distances_data(&feats).unwrap();

        let mut tape = Tape::new();
        let fv = tape.constant(feats.clone());
        let mv = pairwise_sq_distances(&mut tape, fv).unwrap();
        assert_eq!(tape.value(mv).data(), m.data());

        for i in 0..5 {
            for j in 0..5 {
                let mut d = 0.0;
                for k in 0..8 {
                    let diff = feats.data()[i * 8 + k] - feats.data()[j * 8 + k];
                    d += diff * diff;
                }
                assert_eq!(m.data()[i * 5 + j], d, "entry ({i},{j})");
                assert_eq!(m.data()[i * 5 + j], m.data()[j * 5 + i]);
            }
            assert_eq!(m.data()[i * 5 + i], 0.0);
        }
    }

    fn tau_cfg(tau: f64) -> DistillConfig {
        DistillConfig { tau, ..DistillConfig::default() }
    }

    #[test]
    fn add_loss_on_identical_matrices_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let feats = rand_tensor(&mut rng, &[6, 5]);
        let teacher = pairwise_sq_distances_data(&feats).unwrap();
        for direction in [KlDirection::TeacherAsTarget, KlDirection::LiteralPaperOrder] {
            for include_diagonal in [true, false] {
                let cfg = DistillConfig {
                    kl_direction: direction,
                    include_diagonal,
                    ..tau_cfg(4.0)
                };
                let mut tape = Tape::new();
                let fv = tape.constant(feats.clone());
                let student = pairwise_sq_distances(&mut tape, fv).unwrap();
                let loss = add_loss(&mut tape, &teacher, student, &cfg).unwrap();
                assert_eq!(
                    scalar_of(&tape, loss),
                    0.0,
                    "direction {direction:?}, include_diagonal {include_diagonal}"
                );
            }
        }
    }

    #[test]
    fn add_loss_matches_scalar_kl_oracle_on_two_rows() {
        let teacher = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let student = tape.constant(Tensor::zeros(vec![2, 2]));
        let loss = add_loss(&mut tape, &teacher, student, &tau_cfg(1.0)).unwrap();

        let p = softmax_oracle(&[0.0, 1.0]);
        let row_kl = kl_oracle(&p, &[0.5, 0.5]);
        let expect = (row_kl + row_kl) / 2.0;
        assert!((scalar_of(&tape, loss) - expect).abs() < 1e-9);
        assert!((expect - 0.110944).abs() < 1e-6);
    }

    #[test]
    fn add_loss_literal_order_reverses_the_divergence() {
        let teacher = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let cfg = DistillConfig {
            kl_direction: KlDirection::LiteralPaperOrder,
            ..tau_cfg(1.0)
        };
        let mut tape = Tape::new();
        let student = tape.constant(Tensor::zeros(vec![2, 2]));
        let loss = add_loss(&mut tape, &teacher, student, &cfg).unwrap();

        let p = softmax_oracle(&[0.0, 1.0]);
        let expect = kl_oracle(&[0.5, 0.5], &p);
        assert!((scalar_of(&tape, loss) - expect).abs() < 1e-9);
        assert!((expect - 0.120115).abs() < 1e-6);
    }

    #[test]
    fn add_loss_tau_scaling_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let f_t = rand_tensor(&mut rng, &[4, 6]);
        let f_s = rand_tensor(&mut rng, &[4, 6]);
        let m_t = pairwise_sq_distances_data(&f_t).unwrap();
        let m_s = pairwise_sq_distances_data(&f_s).unwrap();
        let tau = 3.0;

        let run = |teacher: &Tensor, student: &Tensor, cfg: &DistillConfig| -> f64 {
            let mut tape = Tape::new();
            let sv = tape.constant(student.clone());
            let loss = add_loss(&mut tape, teacher, sv, cfg).unwrap();
            scalar_of(&tape, loss)
        };
        let scale = |t: &Tensor| {
            Tensor::from_op(t.shape().to_vec(), t.data().iter().map(|v| v * tau).collect())
        };
        let at_tau = run(&scale(&m_t), &scale(&m_s), &tau_cfg(tau));
        let at_one = run(&m_t, &m_s, &tau_cfg(1.0));
        assert!((at_tau - tau * tau * at_one).abs() < 1e-12 * at_tau.abs().max(1.0));
    }

    #[test]
    fn add_loss_masked_diagonal_matches_reduced_row_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let f_t = rand_tensor(&mut rng, &[3, 4]);
        let f_s = rand_tensor(&mut rng, &[3, 4]);
        let m_t = pairwise_sq_distances_data(&f_t).unwrap();
        let m_s = pairwise_sq_distances_data(&f_s).unwrap();
        let cfg = DistillConfig { include_diagonal: false, ..tau_cfg(2.0) };

        let mut tape = Tape::new();
        let sv = tape.constant(m_s.clone());
        let loss = add_loss(&mut tape, &m_t, sv, &cfg).unwrap();

        // Oracle: per row, softmax over the off-diagonal entries only.
        let mut total = 0.0;
        for i in 0..3 {
            let off = |m: &Tensor| -> Vec<f64> {
                (0..3)
                    .filter(|&j| j != i)
                    .map(|j| m.data()[i * 3 + j] / cfg.tau)
                    .collect()
            };
            let p = softmax_oracle(&off(&m_t));
            let q = softmax_oracle(&off(&m_s));
            total += kl_oracle(&p, &q);
        }
        let expect = cfg.tau * cfg.tau * total / 3.0;
        assert!((scalar_of(&tape, loss) - expect).abs() < 1e-9);
    }

    #[test]
    fn add_loss_rejects_bad_shapes_and_temperatures() {
        let teacher = Tensor::zeros(vec![2, 2]);
        let mut tape = Tape::new();
        let s3 = tape.constant(Tensor::zeros(vec![3, 3]));
        assert!(add_loss(&mut tape, &teacher, s3, &tau_cfg(1.0)).is_err());
        let rect = Tensor::zeros(vec![2, 3]);
        let s2 = tape.constant(Tensor::zeros(vec![2, 2]));
        assert!(add_loss(&mut tape, &rect, s2, &tau_cfg(1.0)).is_err());
        assert!(add_loss(&mut tape, &teacher, s2, &tau_cfg(0.0)).is_err());
        assert!(add_loss(&mut tape, &teacher, s2, &tau_cfg(-1.0)).is_err());
    }

    #[test]
    fn add_loss_gradient_flows_only_into_the_student() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let teacher_feats = rand_tensor(&mut rng, &[4, 5]);
        let teacher = pairwise_sq_distances_data(&teacher_feats).unwrap();
        let student_feats = rand_tensor(&mut rng, &[4, 5]);

        let mut tape = Tape::new();
        let fv = tape.param("student_feats", student_feats.clone());
        let m_s = pairwise_sq_distances(&mut tape, fv).unwrap();
        let loss = add_loss(&mut tape, &teacher, m_s, &tau_cfg(4.0)).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.keys().collect::<Vec<_>>(), vec!["student_feats"]);
        assert!(grads["student_feats"].data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn add_loss_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for include_diagonal in [true, false] {
            for direction in [KlDirection::TeacherAsTarget, KlDirection::LiteralPaperOrder] {
                let cfg = DistillConfig {
                    include_diagonal,
                    kl_direction: direction,
                    ..tau_cfg(2.0)
                };
                let teacher_feats = rand_tensor(&mut rng, &[4, 3]);
                let teacher = pairwise_sq_distances_data(&teacher_feats).unwrap();
                let student_feats = rand_tensor(&mut rng, &[4, 3]);
                assert_grads_match(&[("feats", student_feats)], |t, v| {
                    let m_s = pairwise_sq_distances(t, v["feats"]).unwrap();
                    add_loss(t, &teacher, m_s, &cfg).unwrap()
                });
            }
        }
    }

    #[test]
    fn dkd_loss_on_identical_logits_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let logits = rand_tensor(&mut rng, &[5, 2]);
        for direction in [KlDirection::TeacherAsTarget, KlDirection::LiteralPaperOrder] {
            let cfg = DistillConfig { kl_direction: direction, ..tau_cfg(4.0) };
            let mut tape = Tape::new();
            let sv = tape.constant(logits.clone());
            let loss = dkd_loss(&mut tape, &logits, sv, &cfg).unwrap();
            assert_eq!(scalar_of(&tape, loss), 0.0, "direction {direction:?}");
        }
    }

    #[test]
    fn dkd_loss_matches_scalar_kl_oracle() {
        let teacher = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let student = tape.constant(Tensor::zeros(vec![1, 2]));

        let loss1 = dkd_loss(&mut tape, &teacher, student, &tau_cfg(1.0)).unwrap();
        let p1 = softmax_oracle(&[1.0, 0.0]);
        let expect1 = kl_oracle(&p1, &[0.5, 0.5]);
        assert!((scalar_of(&tape, loss1) - expect1).abs() < 1e-9);
        assert!((expect1 - 0.110944).abs() < 1e-6);

        let loss2 = dkd_loss(&mut tape, &teacher, student, &tau_cfg(2.0)).unwrap();
        let p2 = softmax_oracle(&[0.5, 0.0]);
        let expect2 = 4.0 * kl_oracle(&p2, &[0.5, 0.5]);
        assert!((scalar_of(&tape, loss2) - expect2).abs() < 1e-9);
        assert!((expect2 - 0.121199).abs() < 1e-6);
    }

    #[test]
    fn dkd_loss_rejects_shape_mismatches() {
        let teacher = Tensor::zeros(vec![2, 2]);
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::zeros(vec![3, 2]));
        assert!(dkd_loss(&mut tape, &teacher, s, &tau_cfg(1.0)).is_err());
        let one_class = Tensor::zeros(vec![2, 1]);
        let s1 = tape.constant(Tensor::zeros(vec![2, 1]));
        assert!(dkd_loss(&mut tape, &one_class, s1, &tau_cfg(1.0)).is_err());
    }

    #[test]
    fn dkd_loss_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..3 {
            let teacher = rand_tensor(&mut rng, &[4, 2]);
            let student = rand_tensor(&mut rng, &[4, 2]);
            assert_grads_match(&[("student", student)], |t, v| {
                dkd_loss(t, &teacher, v["student"], &tau_cfg(4.0)).unwrap()
            });
        }
    }

    #[test]
    fn overall_loss_combines_weighted_terms() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(0.2));
        let d = tape.constant(Tensor::scalar(0.4));
        let c = tape.constant(Tensor::scalar(0.6));
        let total = overall_loss(
            &mut tape,
            Some(a),
            Some(d),
            Some(c),
            LossWeights::new(0.5, 0.5, 1.0),
        )
        .unwrap();
        assert!((scalar_of(&tape, total) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn overall_loss_with_zero_weights_reuses_the_remaining_node() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(0.2));
        let c = tape.constant(Tensor::scalar(0.6));
        let before = tape.len();

        let ce_only =
            overall_loss(&mut tape, Some(a), None, Some(c), LossWeights::supervised_only())
                .unwrap();
        assert_eq!(ce_only, c);
        let add_only =
            overall_loss(&mut tape, Some(a), None, Some(c), LossWeights::new(1.0, 0.0, 0.0))
                .unwrap();
        assert_eq!(add_only, a);
        assert_eq!(tape.len(), before, "degenerate weights must add no nodes");
    }

    #[test]
    fn overall_loss_rejects_bad_weight_settings() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(0.6));
        assert!(overall_loss(&mut tape, None, None, Some(c), LossWeights::new(-0.1, 0.5, 1.0))
            .is_err());
        assert!(overall_loss(&mut tape, None, None, Some(c), LossWeights::new(0.5, 0.5, 1.0))
            .is_err());
        assert!(overall_loss(&mut tape, None, None, Some(c), LossWeights::new(0.0, 0.0, 0.0))
            .is_err());
        assert!(overall_loss(
            &mut tape,
            None,
            None,
            Some(c),
            LossWeights::new(0.0, 0.0, f64::NAN)
        )
        .is_err());
    }

    #[test]
    fn distill_config_derives_beta_from_alpha() {
        let cfg = DistillConfig::default();
        assert_eq!(cfg.tau, 4.0);
        assert_eq!(cfg.alpha, 1.0);
        assert!((cfg.beta() - 0.2).abs() < 1e-15);
        assert!(cfg.include_diagonal);
        let cfg = DistillConfig::with_alpha(2.5);
        assert!((cfg.beta() - 0.5).abs() < 1e-15);
        let overridden = DistillConfig { beta: Some(0.7), ..cfg };
        assert_eq!(overridden.beta(), 0.7);
        assert!(DistillConfig { alpha: -1.0, ..DistillConfig::default() }.validate().is_err());
        assert!(DistillConfig { beta: Some(-0.2), ..DistillConfig::default() }
            .validate()
            .is_err());
    }
}
