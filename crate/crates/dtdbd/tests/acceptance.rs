//! The acceptance gate. Each test checks one promised property end to end
//! and prints a single `criterion N (...): PASS/FAIL` line with the
//! measured numbers (visible with `--nocapture`, and in the panic message
//! when a criterion fails).
//!
//! Criteria 5 and 6 share one expensive run: three seeds of the full
//! pipeline (baseline, three teachers, three students) on the standard
//! nine-domain corpus at n = 9000. It is trained once behind a lock and
//! read by every directional test.

use std::sync::OnceLock;
use std::time::Instant;

use dtdbd::data::{generate, split, SyntheticSpec};
use dtdbd::diffcore::{finite_diff_grad, Tape, Tensor, Var};
use dtdbd::losses::{
    add_loss, cross_entropy, dat_ie_loss, dkd_loss, information_entropy_loss, overall_loss,
    pairwise_sq_distances, pairwise_sq_distances_data, DistillConfig, LossWeights,
};
use dtdbd::metrics::bias_report;
use dtdbd::models::EncoderConfig;
use dtdbd::schedule::{DaaConfig, DistillState};
use dtdbd::training::{
    evaluate, train_student, train_supervised, train_unbiased_teacher, TrainConfig, TrainMode,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Prints the criterion line and enforces it.
fn verdict(criterion: &str, pass: bool, details: &str) {
    let line =
        format!("criterion {criterion}: {} — {details}", if pass { "PASS" } else { "FAIL" });
    println!("{line}");
    assert!(pass, "{line}");
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn linf(t: &Tensor) -> f64 {
    t.data().iter().fold(0.0f64, |a, &v| a.max(v.abs()))
}

/// Largest coordinate gap between the tape gradient and the central
/// difference, relative to the gradient's own scale.
fn rel_err(analytic: &Tensor, fd: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), fd.shape());
    let worst = analytic
        .data()
        .iter()
        .zip(fd.data())
        .fold(0.0f64, |a, (&g, &f)| a.max((g - f).abs()));
    worst / linf(analytic).max(1e-9)
}

/// Checks one loss over `instances` random instances. `mk` draws the
/// parameter tensor plus a closure that rebuilds the loss from scratch on
/// any tape, so the same graph serves the backward pass and every
/// finite-difference probe.
fn check_loss_gradients<F>(
    instances: usize,
    seed: u64,
    mk: impl Fn(&mut ChaCha8Rng, usize) -> (Tensor, F),
) -> f64
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let (x0, build) = mk(&mut rng, i);
        let mut tape = Tape::new();
        let p = tape.param("p", x0.clone());
        let loss = build(&mut tape, p);
        let grads = tape.backward(loss).unwrap();
        let fd = finite_diff_grad(
            |probe| {
                let mut t = Tape::new();
                let v = t.param("p", probe.clone());
                let l = build(&mut t, v);
                t.value(l).item()
            },
            &x0,
            1e-5,
        );
        worst = worst.max(rel_err(&grads["p"], &fd));
    }
    worst
}

#[test]
fn criterion_1_gradient_suite() {
    let started = Instant::now();
    let tol = 1e-5;
    let n = 24;
    let mut worst_by_loss: Vec<(&str, f64)> = Vec::new();

    // Cross-entropy on a logits parameter.
    let w = check_loss_gradients(n, 101, |rng, _| {
        let b = rng.random_range(2..=6);
        let x0 = rand_tensor(rng, &[b, 2]);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..2)).collect();
        (x0, move |tape: &mut Tape, p: Var| cross_entropy(tape, p, &labels).unwrap())
    });
    worst_by_loss.push(("ce", w));

    // Information entropy on domain logits.
    let w = check_loss_gradients(n, 102, |rng, _| {
        let b = rng.random_range(2..=6);
        let d = rng.random_range(3..=9);
        let x0 = rand_tensor(rng, &[b, d]);
        (x0, move |tape: &mut Tape, p: Var| information_entropy_loss(tape, p).unwrap())
    });
    worst_by_loss.push(("ie", w));

    // DAT-IE, rotating which of its three logit inputs is the checked
    // parameter while the other two stay constant.
    let w = check_loss_gradients(n, 103, |rng, i| {
        let b = rng.random_range(2..=5);
        let d = rng.random_range(3..=6);
        let role = i % 3;
        let label_fixed = rand_tensor(rng, &[b, 2]);
        let adv_fixed = rand_tensor(rng, &[b, d]);
        let ie_fixed = rand_tensor(rng, &[b, d]);
        let x0 = match role {
            0 => label_fixed.clone(),
            1 => adv_fixed.clone(),
            _ => ie_fixed.clone(),
        };
        let y: Vec<usize> = (0..b).map(|_| rng.random_range(0..2)).collect();
        let dom: Vec<usize> = (0..b).map(|_| rng.random_range(0..d)).collect();
        let cfg = DistillConfig::with_alpha([0.5, 1.0, 2.0][i % 3]);
        let build = move |tape: &mut Tape, p: Var| {
            let label = if role == 0 { p } else { tape.constant(label_fixed.clone()) };
            let adv = if role == 1 { p } else { tape.constant(adv_fixed.clone()) };
            let ie = if role == 2 { p } else { tape.constant(ie_fixed.clone()) };
            dat_ie_loss(tape, label, adv, ie, &y, &dom, &cfg).unwrap().total
        };
        (x0, build)
    });
    worst_by_loss.push(("dat_ie", w));

    // ADD through the pairwise-distance op, against a fixed teacher matrix.
    let w = check_loss_gradients(n, 104, |rng, i| {
        let b = rng.random_range(2..=6);
        let f = rng.random_range(2..=5);
        let x0 = rand_tensor(rng, &[b, f]);
        let teacher = pairwise_sq_distances_data(&rand_tensor(rng, &[b, f])).unwrap();
        let cfg = DistillConfig {
            tau: [1.0, 2.0, 4.0][i % 3],
            include_diagonal: i % 2 == 0,
            ..DistillConfig::default()
        };
        let build = move |tape: &mut Tape, p: Var| {
            let m = pairwise_sq_distances(tape, p).unwrap();
            add_loss(tape, &teacher, m, &cfg).unwrap()
        };
        (x0, build)
    });
    worst_by_loss.push(("add", w));

    // DKD on student logits against fixed teacher logits.
    let w = check_loss_gradients(n, 105, |rng, i| {
        let b = rng.random_range(2..=6);
        let x0 = rand_tensor(rng, &[b, 2]);
        let teacher = rand_tensor(rng, &[b, 2]);
        let cfg = DistillConfig { tau: [1.0, 2.0, 4.0][i % 3], ..DistillConfig::default() };
        let build = move |tape: &mut Tape, p: Var| dkd_loss(tape, &teacher, p, &cfg).unwrap();
        (x0, build)
    });
    worst_by_loss.push(("dkd", w));

    // The weighted overall objective with all three terms active, driven
    // from one feature parameter through a fixed linear head.
    let w = check_loss_gradients(n, 106, |rng, _| {
        let b = rng.random_range(2..=5);
        let f = rng.random_range(2..=4);
        let x0 = rand_tensor(rng, &[b, f]);
        let head = rand_tensor(rng, &[f, 2]);
        let teacher_m = pairwise_sq_distances_data(&rand_tensor(rng, &[b, f])).unwrap();
        let teacher_logits = rand_tensor(rng, &[b, 2]);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..2)).collect();
        let weights = LossWeights::new(
            rng.random_range(0.1..1.0),
            rng.random_range(0.1..1.0),
            rng.random_range(0.5..1.5),
        );
        let cfg = DistillConfig::default();
        let build = move |tape: &mut Tape, p: Var| {
            let hw = tape.constant(head.clone());
            let logits = tape.matmul(p, hw);
            let ce = cross_entropy(tape, logits, &labels).unwrap();
            let m = pairwise_sq_distances(tape, p).unwrap();
            let l_add = add_loss(tape, &teacher_m, m, &cfg).unwrap();
            let l_dkd = dkd_loss(tape, &teacher_logits, logits, &cfg).unwrap();
            overall_loss(tape, Some(l_add), Some(l_dkd), Some(ce), weights).unwrap()
        };
        (x0, build)
    });
    worst_by_loss.push(("overall", w));

    let elapsed = started.elapsed().as_secs_f64();
    let worst = worst_by_loss.iter().fold(0.0f64, |a, &(_, w)| a.max(w));
    let detail = worst_by_loss
        .iter()
        .map(|(name, w)| format!("{name} {w:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        "1 (gradient suite)",
        worst < tol && elapsed < 120.0,
        &format!("{n} instances per loss, worst rel err: {detail}; {elapsed:.1}s"),
    );
}

/// The same double loop `pairwise_sq_dist_data` promises to match,
/// written independently: ascending-coordinate accumulation per pair.
fn pairwise_oracle(features: &Tensor) -> Vec<f64> {
    let (b, f) = features.dims2();
    let x = features.data();
    let mut out = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            let mut d = 0.0;
            for k in 0..f {
                let diff = x[i * f + k] - x[j * f + k];
                d += diff * diff;
            }
            out[i * b + j] = d;
        }
    }
    out
}

/// Direct-counting oracle for the bias report: per-domain and overall
/// error rates, absolute deviations summed over populated domains, and
/// macro F1 from the overall confusion counts.
fn bias_oracle(
    y_true: &[u8],
    y_pred: &[u8],
    domains: &[usize],
    num_domains: usize,
) -> (f64, f64, f64) {
    let mut counts = vec![[0usize; 4]; num_domains + 1];
    for ((&t, &p), &d) in y_true.iter().zip(y_pred).zip(domains) {
        for slot in [d, num_domains] {
            match (t, p) {
                (1, 0) => counts[slot][0] += 1,
                (1, 1) => counts[slot][1] += 1,
                (0, 1) => counts[slot][2] += 1,
                (0, 0) => counts[slot][3] += 1,
                _ => unreachable!(),
            }
        }
    }
    let rate = |a: usize, b: usize| -> Option<f64> {
        (a + b > 0).then(|| a as f64 / (a + b) as f64)
    };
    let [on, op, ofp, otn] = counts[num_domains];
    let overall_fnr = rate(on, op).unwrap_or(0.0);
    let overall_fpr = rate(ofp, otn).unwrap_or(0.0);
    let mut fned = 0.0;
    let mut fped = 0.0;
    for c in &counts[..num_domains] {
        let [fnc, tp, fp, tn] = *c;
        if fnc + tp + fp + tn == 0 {
            continue;
        }
        fned += (overall_fnr - rate(fnc, tp).unwrap_or(overall_fnr)).abs();
        fped += (overall_fpr - rate(fp, tn).unwrap_or(overall_fpr)).abs();
    }
    let f1_of = |tp: usize, fp: usize, fnc: usize| -> f64 {
        let denom = 2 * tp + fp + fnc;
        if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 }
    };
    let f1 = (f1_of(op, ofp, on) + f1_of(otn, on, ofp)) / 2.0;
    (f1, fned, fped)
}

#[test]
fn criterion_2_oracle_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(201);

    // Pairwise distances: bit-exact match with the double loop up to B=32.
    let mut pairwise_checked = 0;
    for &b in &[2usize, 3, 5, 8, 13, 21, 32] {
        let f = rng.random_range(1..=6);
        let features = rand_tensor(&mut rng, &[b, f]);
        let got = pairwise_sq_distances_data(&features).unwrap();
        let want = pairwise_oracle(&features);
        assert_eq!(got.data().len(), want.len());
        for (g, w) in got.data().iter().zip(&want) {
            assert_eq!(g.to_bits(), w.to_bits(), "pairwise mismatch at B={b}");
        }
        // The tape op shares the kernel; spot-check it agrees too.
        let mut tape = Tape::new();
        let v = tape.param("f", features.clone());
        let m = pairwise_sq_distances(&mut tape, v).unwrap();
        for (g, w) in tape.value(m).data().iter().zip(&want) {
            assert_eq!(g.to_bits(), w.to_bits());
        }
        pairwise_checked += 1;
    }

    // Bias report vs the counting oracle on 100 random prediction sets.
    let mut report_checked = 0;
    let mut worst_gap = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(20..=240);
        let k = rng.random_range(2..=9);
        let y_true: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
        let y_pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
        let domains: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let report = bias_report(&y_true, &y_pred, &domains, k).unwrap();
        let (f1, fned, fped) = bias_oracle(&y_true, &y_pred, &domains, k);
        for (got, want) in [
            (report.f1, f1),
            (report.fned, fned),
            (report.fped, fped),
            (report.total, fned + fped),
        ] {
            worst_gap = worst_gap.max((got - want).abs());
        }
        report_checked += 1;
    }

    // Softmax rows sum to one.
    let mut worst_sum_gap = 0.0f64;
    for _ in 0..40 {
        let b = rng.random_range(1..=8);
        let c = rng.random_range(2..=10);
        let mut tape = Tape::new();
        let v = tape.constant(rand_tensor(&mut rng, &[b, c]));
        let sm = tape.softmax_rows(v);
        for row in tape.value(sm).data().chunks(c) {
            worst_sum_gap = worst_sum_gap.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }

    verdict(
        "2 (oracle suite)",
        worst_gap < 1e-12 && worst_sum_gap < 1e-12,
        &format!(
            "pairwise bit-exact at {pairwise_checked} sizes up to B=32; bias report within \
             {worst_gap:.1e} of the counting oracle on {report_checked} sets; softmax row sums \
             within {worst_sum_gap:.1e} of 1"
        ),
    );
}

#[test]
fn criterion_3_analytic_values() {
    let mut failures = Vec::new();

    // Uniform domain predictions over 9 classes score -ln 9.
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::zeros(vec![4, 9]));
    let ie = information_entropy_loss(&mut tape, v).unwrap();
    let got = tape.value(ie).item();
    if (got + 9.0f64.ln()).abs() >= 1e-9 {
        failures.push(format!("IE(uniform over 9) = {got}, want {}", -(9.0f64.ln())));
    }

    // Indifferent logits on a two-class problem cost ln 2.
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::zeros(vec![1, 2]));
    let ce = cross_entropy(&mut tape, v, &[0]).unwrap();
    let got = tape.value(ce).item();
    if (got - 2.0f64.ln()).abs() >= 1e-12 {
        failures.push(format!("CE([0,0], 0) = {got}, want ln 2"));
    }

    // Distilling a distance matrix onto itself costs exactly zero.
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    for include_diagonal in [true, false] {
        let features = rand_tensor(&mut rng, &[5, 3]);
        let teacher = pairwise_sq_distances_data(&features).unwrap();
        let mut tape = Tape::new();
        let v = tape.param("f", features);
        let m = pairwise_sq_distances(&mut tape, v).unwrap();
        let cfg = DistillConfig { include_diagonal, ..DistillConfig::default() };
        let loss = add_loss(&mut tape, &teacher, m, &cfg).unwrap();
        let got = tape.value(loss).item();
        if got != 0.0 {
            failures.push(format!("add_loss(M, M) = {got:e}, want exactly 0"));
        }
    }

    // The textbook weight updates: 0.9*0.5 - 0.1*0.08 = 0.442 when both
    // metrics worsen by (0.1, -0.02), and 0.462 when the bias improves.
    let mut state = DistillState::new(DaaConfig::default()).unwrap();
    state.record(0.80, 1.00);
    state.record(0.82, 1.10);
    assert!(state.step());
    if (state.omega_add - 0.442).abs() >= 1e-12 {
        failures.push(format!("DAA update = {}, want 0.442", state.omega_add));
    }
    let mut state = DistillState::new(DaaConfig::default()).unwrap();
    state.record(0.80, 1.00);
    state.record(0.82, 0.90);
    assert!(state.step());
    if (state.omega_add - 0.462).abs() >= 1e-12 {
        failures.push(format!("DAA update (bias down) = {}, want 0.462", state.omega_add));
    }

    // The two-row distance example at tau = 1: softmax([0,1]) against
    // [0.5, 0.5] gives KL = 0.110944..., confirmed by the scalar oracle
    // in the losses module's tests before being frozen here.
    const KL_B2: f64 = 0.110_944_071_671_727_35;
    let teacher = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::zeros(vec![2, 2]));
    let m = pairwise_sq_distances(&mut tape, v).unwrap();
    let cfg = DistillConfig { tau: 1.0, ..DistillConfig::default() };
    let loss = add_loss(&mut tape, &teacher, m, &cfg).unwrap();
    let got = tape.value(loss).item();
    if (got - KL_B2).abs() >= 1e-5 {
        failures.push(format!("B=2 distance KL = {got}, want {KL_B2} within 1e-5"));
    }

    // The same number through the logit path: teacher [1,0] vs student
    // [0,0] is the mirror-image pair of distributions.
    let teacher = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::zeros(vec![1, 2]));
    let loss = dkd_loss(&mut tape, &teacher, v, &cfg).unwrap();
    let got = tape.value(loss).item();
    if (got - KL_B2).abs() >= 1e-5 {
        failures.push(format!("B=1 logit KL = {got}, want {KL_B2} within 1e-5"));
    }

    verdict(
        "3 (analytic values)",
        failures.is_empty(),
        &if failures.is_empty() {
            "-ln 9, ln 2, exact zero self-distillation, 0.442/0.462, and the 0.110944 KL pair \
             all hit"
                .to_string()
        } else {
            failures.join("; ")
        },
    );
}

#[test]
fn criterion_4_reduction_to_baseline() {
    let spec = SyntheticSpec::nine_domains(600, 4);
    let data = generate(&spec).unwrap();
    let parts = split(&data, [0.8, 0.1, 0.1], 4).unwrap();
    let encoder = EncoderConfig { mlp_hidden: vec![64], ..EncoderConfig::mlp(32) };
    let cfg = TrainConfig {
        mode: TrainMode::CeBaseline,
        epochs: 4,
        learning_rate: Some(0.01),
        batch_size: 32,
        seed: 77,
        patience: 0,
        ..TrainConfig::default()
    };

    let baseline = train_supervised(&parts.train, &parts.val, &encoder, &cfg).unwrap();
    // The student loop with the weight triple (0, 0, 1): no teachers, no
    // distillation terms in the graph, cross-entropy at weight one.
    let student = train_student(
        &parts.train,
        &parts.val,
        None,
        None,
        &encoder,
        &cfg,
        &DistillConfig::default(),
        &DaaConfig::default(),
    )
    .unwrap();

    let mut identical = baseline.best_epoch == student.best_epoch
        && baseline.rows.len() == student.rows.len();
    for (a, b) in baseline.rows.iter().zip(&student.rows) {
        identical &= a.loss_total.to_bits() == b.loss_total.to_bits()
            && a.val_f1.to_bits() == b.val_f1.to_bits()
            && a.val_total.to_bits() == b.val_total.to_bits();
    }
    let mut params_checked = 0;
    for (name, t) in &baseline.params.tensors {
        match student.params.tensors.get(name) {
            None => identical = false,
            Some(s) => {
                identical &= t.shape() == s.shape()
                    && t.data().iter().zip(s.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                params_checked += 1;
            }
        }
    }
    identical &= baseline.params.tensors.len() == student.params.tensors.len();

    verdict(
        "4 (reduction test)",
        identical,
        &format!(
            "student loop at weights (0,0,1) vs plain CE baseline: {} epochs and {} parameter \
             tensors bit-identical, shared seed {}",
            baseline.rows.len(),
            params_checked,
            cfg.seed
        ),
    );
}

// ---------------------------------------------------------------------
// The shared end-to-end run behind criteria 5 and 6.

#[derive(Clone, Copy)]
struct Scored {
    f1: f64,
    total: f64,
}

struct SeedRun {
    baseline: Scored,
    teacher_dat: Scored,
    teacher_datie: Scored,
    student_dtdbd: Scored,
    student_add_only: Scored,
    student_dnd_only: Scored,
    train_seconds: f64,
}

/// One fixed hyperparameter set for every end-to-end criterion. Chosen
/// once from validation behavior: a small MLP trained well past its
/// validation peak with patience disabled, a strong adversary (alpha 2)
/// for the unbiased teacher, distillation at tau 4, the ADD term opening
/// at 0.8 so the fairness pressure is present from the first epoch, and
/// bias deltas normalized by the domain count so the two halves of the
/// weight update move on comparable scales.
fn suite_encoder() -> EncoderConfig {
    EncoderConfig { mlp_hidden: vec![64], ..EncoderConfig::mlp(32) }
}

fn suite_train(mode: TrainMode, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        epochs: 40,
        learning_rate: Some(0.01),
        batch_size: 32,
        seed,
        patience: 0,
        ..TrainConfig::default()
    }
}

fn suite_distill() -> DistillConfig {
    DistillConfig::with_alpha(2.0)
}

fn suite_daa() -> DaaConfig {
    DaaConfig { initial_omega_add: 0.8, normalize_bias: Some(9), ..DaaConfig::default() }
}

fn run_one_seed(seed: u64) -> Result<SeedRun, String> {
    let err = |stage: &'static str| move |e: dtdbd::Error| format!("seed {seed}, {stage}: {e}");
    let data = generate(&SyntheticSpec::nine_domains(9000, seed)).map_err(err("generate"))?;
    let parts = split(&data, [0.8, 0.1, 0.1], seed).map_err(err("split"))?;
    let encoder = suite_encoder();
    let clean_encoder = EncoderConfig { domain_embed_dim: 16, ..encoder.clone() };
    let distill = suite_distill();
    let phase_seed = seed * 100;

    let started = Instant::now();
    let baseline = train_supervised(
        &parts.train,
        &parts.val,
        &encoder,
        &suite_train(TrainMode::CeBaseline, phase_seed),
    )
    .map_err(err("baseline"))?;
    let datie = train_unbiased_teacher(
        &parts.train,
        &parts.val,
        &encoder,
        &suite_train(TrainMode::DatIe, phase_seed),
        &distill,
    )
    .map_err(err("dat_ie teacher"))?;
    let dat = train_unbiased_teacher(
        &parts.train,
        &parts.val,
        &encoder,
        &suite_train(TrainMode::Dat, phase_seed),
        &distill,
    )
    .map_err(err("dat teacher"))?;
    let clean = train_supervised(
        &parts.train,
        &parts.val,
        &clean_encoder,
        &suite_train(TrainMode::CeBaseline, phase_seed),
    )
    .map_err(err("clean teacher"))?;
    let student = train_student(
        &parts.train,
        &parts.val,
        Some(&datie.params),
        Some(&clean.params),
        &encoder,
        &suite_train(TrainMode::Dtdbd, phase_seed),
        &distill,
        &suite_daa(),
    )
    .map_err(err("dtdbd student"))?;
    let add_only = train_student(
        &parts.train,
        &parts.val,
        Some(&datie.params),
        None,
        &encoder,
        &suite_train(TrainMode::AddOnly, phase_seed),
        &distill,
        &suite_daa(),
    )
    .map_err(err("add_only student"))?;
    let dnd_only = train_student(
        &parts.train,
        &parts.val,
        None,
        Some(&clean.params),
        &encoder,
        &suite_train(TrainMode::DndOnly, phase_seed),
        &distill,
        &suite_daa(),
    )
    .map_err(err("dnd_only student"))?;
    let train_seconds = started.elapsed().as_secs_f64();

    let score = |outcome: &dtdbd::training::TrainOutcome, stage: &str| -> Result<Scored, String> {
        let report = evaluate(&outcome.params, &parts.test)
            .map_err(|e| format!("seed {seed}, eval {stage}: {e}"))?;
        Ok(Scored { f1: report.f1, total: report.total })
    };

    Ok(SeedRun {
        baseline: score(&baseline, "baseline")?,
        teacher_dat: score(&dat, "dat")?,
        teacher_datie: score(&datie, "dat_ie")?,
        student_dtdbd: score(&student, "dtdbd")?,
        student_add_only: score(&add_only, "add_only")?,
        student_dnd_only: score(&dnd_only, "dnd_only")?,
        train_seconds,
    })
}

fn suite() -> &'static Result<Vec<SeedRun>, String> {
    static SUITE: OnceLock<Result<Vec<SeedRun>, String>> = OnceLock::new();
    SUITE.get_or_init(|| (1..=3).map(run_one_seed).collect())
}

fn mean_of(runs: &[SeedRun], f: impl Fn(&SeedRun) -> f64) -> f64 {
    runs.iter().map(f).sum::<f64>() / runs.len() as f64
}

#[test]
fn criterion_5_end_to_end_debiasing() {
    let runs = suite().as_ref().expect("pipeline runs");
    let base_total = mean_of(runs, |r| r.baseline.total);
    let student_total = mean_of(runs, |r| r.student_dtdbd.total);
    let base_f1 = mean_of(runs, |r| r.baseline.f1);
    let student_f1 = mean_of(runs, |r| r.student_dtdbd.f1);
    let reduction = 1.0 - student_total / base_total;
    let f1_drop = base_f1 - student_f1;
    let slowest = runs.iter().map(|r| r.train_seconds).fold(0.0f64, f64::max);
    verdict(
        "5 (end-to-end de-biasing)",
        reduction >= 0.20 && f1_drop <= 0.02 && slowest < 600.0,
        &format!(
            "3-seed mean test Total {base_total:.4} (baseline) vs {student_total:.4} (DTDBD): \
             reduction {:.1}% (need >= 20%), macro-F1 {base_f1:.4} vs {student_f1:.4} (drop \
             {f1_drop:+.4}, cap 0.02); slowest seed trained in {slowest:.0}s",
            100.0 * reduction
        ),
    );
}

/// Counts the seeds on which `pred` holds and formats the per-seed pairs.
fn seedwise(
    runs: &[SeedRun],
    a: impl Fn(&SeedRun) -> f64,
    b: impl Fn(&SeedRun) -> f64,
    pred: impl Fn(f64, f64) -> bool,
) -> (usize, String) {
    let hits = runs.iter().filter(|r| pred(a(r), b(r))).count();
    let detail = runs
        .iter()
        .enumerate()
        .map(|(i, r)| format!("seed {}: {:.4} vs {:.4}", i + 1, a(r), b(r)))
        .collect::<Vec<_>>()
        .join("; ");
    (hits, detail)
}

#[test]
fn criterion_6a_unbiased_teacher_tradeoff() {
    let runs = suite().as_ref().expect("pipeline runs");
    let both = |r: &SeedRun| {
        r.teacher_datie.total < r.baseline.total && r.teacher_datie.f1 < r.baseline.f1
    };
    let hits = runs.iter().filter(|r| both(r)).count();
    let detail = runs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            format!(
                "seed {}: Total {:.4}/{:.4}, F1 {:.4}/{:.4}",
                i + 1,
                r.teacher_datie.total,
                r.baseline.total,
                r.teacher_datie.f1,
                r.baseline.f1
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    verdict(
        "6a (DAT-IE teacher below baseline on Total and F1)",
        hits >= 2,
        &format!("{hits}/3 seeds (teacher/baseline): {detail}"),
    );
}

#[test]
fn criterion_6b_add_only_lowers_total() {
    let runs = suite().as_ref().expect("pipeline runs");
    let (hits, detail) = seedwise(
        runs,
        |r| r.student_add_only.total,
        |r| r.baseline.total,
        |add, base| add < base,
    );
    verdict(
        "6b (ADD-only student lowers Total)",
        hits >= 2,
        &format!("{hits}/3 seeds (add_only vs baseline): {detail}"),
    );
}

#[test]
fn criterion_6c_dnd_only_keeps_f1() {
    let runs = suite().as_ref().expect("pipeline runs");
    let (hits, detail) = seedwise(
        runs,
        |r| r.student_dnd_only.f1,
        |r| r.baseline.f1,
        |dnd, base| dnd >= base - 0.005,
    );
    verdict(
        "6c (DKD-only student keeps F1 within 0.005)",
        hits >= 2,
        &format!("{hits}/3 seeds (dnd_only vs baseline): {detail}"),
    );
}

#[test]
fn criterion_6d_entropy_term_helps() {
    let runs = suite().as_ref().expect("pipeline runs");
    let (hits, detail) = seedwise(
        runs,
        |r| r.teacher_datie.total,
        |r| r.teacher_dat.total,
        |ie, dat| ie <= dat,
    );
    verdict(
        "6d (DAT-IE Total at or below plain DAT)",
        hits >= 2,
        &format!("{hits}/3 seeds (dat_ie vs dat): {detail}"),
    );
}

#[test]
fn criterion_7_experiment_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let config_path = tmp.path().join("exp.toml");
    let toml_text = r#"
seed = 5
output_dir = "unused"
split = [0.8, 0.1, 0.1]

[dataset]
kind = "synthetic"

[dataset.spec]
total_n = 600
embed_dim = 32
signal_dims = 8
domain_dims = 8
signal_separation = 1.0
noise_sigma = 1.0
seed = 0
layout = "Vector"

[[dataset.spec.domains]]
share = 0.3
fake_rate = 0.3

[[dataset.spec.domains]]
share = 0.3
fake_rate = 0.65

[[dataset.spec.domains]]
share = 0.4
fake_rate = 0.5

[encoder]
kind = "mlp"
embed_dim = 32
kernel_widths = []
channels_per_kernel = 0
conv_seq_len = 0
mlp_hidden = [32]
domain_embed_dim = 0

[baseline]
mode = "ce_baseline"
epochs = 3
batch_size = 32
patience = 0

[unbiased]
mode = "dat_ie"
epochs = 3
batch_size = 32
patience = 0

[clean]
mode = "ce_baseline"
epochs = 3
batch_size = 32
patience = 0

[student]
mode = "dtdbd"
epochs = 3
batch_size = 32
patience = 0
"#;
    std::fs::write(&config_path, toml_text).unwrap();

    let mut csv_snapshots: Vec<std::collections::BTreeMap<String, Vec<u8>>> = Vec::new();
    for run in 0..2 {
        let out_dir = tmp.path().join(format!("run{run}"));
        let code = dtdbd::cli::run([
            "dtdbd",
            "experiment",
            "--config",
            config_path.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--seed",
            "5",
            "--force",
        ]);
        assert_eq!(code, 0, "experiment run {run} failed");
        let mut files = std::collections::BTreeMap::new();
        for entry in std::fs::read_dir(&out_dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().and_then(|e| e.to_str()) == Some("csv") {
                files.insert(
                    path.file_name().unwrap().to_string_lossy().into_owned(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
        assert!(!files.is_empty(), "experiment produced no CSV files");
        csv_snapshots.push(files);
    }

    let [first, second] = &csv_snapshots[..] else { unreachable!() };
    let same_names = first.keys().eq(second.keys());
    let byte_equal =
        same_names && first.iter().all(|(name, bytes)| second.get(name) == Some(bytes));
    verdict(
        "7 (experiment determinism)",
        byte_equal,
        &format!(
            "two runs with the same config and seed: {} CSV files byte-identical",
            first.len()
        ),
    );
}

/// The corpus construction promise: a plain CE model trained where the
/// domain pattern is planted carries measurably more error-rate disparity
/// than the same model trained on the shortcut-free variant. Measured on
/// large fresh draws (n = 30000) from each model's own distribution so
/// the systematic gap stands clear of small-sample noise.
#[test]
fn data_shortcut_invariant() {
    let encoder = suite_encoder();
    let mut with_totals = Vec::new();
    let mut without_totals = Vec::new();
    for seed in 1..=3u64 {
        let cfg = suite_train(TrainMode::CeBaseline, seed * 100);

        let spec = SyntheticSpec::nine_domains(9000, seed);
        let data = generate(&spec).unwrap();
        let parts = split(&data, [0.8, 0.1, 0.1], seed).unwrap();
        let model = train_supervised(&parts.train, &parts.val, &encoder, &cfg).unwrap();
        let probe = generate(&SyntheticSpec::nine_domains(30000, seed + 500)).unwrap();
        with_totals.push(evaluate(&model.params, &probe).unwrap().total);

        let spec_free = SyntheticSpec::nine_domains(9000, seed).without_domain_signal();
        let data = generate(&spec_free).unwrap();
        let parts = split(&data, [0.8, 0.1, 0.1], seed).unwrap();
        let model = train_supervised(&parts.train, &parts.val, &encoder, &cfg).unwrap();
        let probe =
            generate(&SyntheticSpec::nine_domains(30000, seed + 500).without_domain_signal())
                .unwrap();
        without_totals.push(evaluate(&model.params, &probe).unwrap().total);
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let with_avg = avg(&with_totals);
    let without_avg = avg(&without_totals);
    let detail = (0..3)
        .map(|i| format!("seed {}: {:.4} vs {:.4}", i + 1, with_totals[i], without_totals[i]))
        .collect::<Vec<_>>()
        .join("; ");
    verdict(
        "data (shortcut raises Total)",
        with_avg > without_avg,
        &format!(
            "population Total with shortcut {with_avg:.4} vs without {without_avg:.4} \
             (3-seed means; {detail})"
        ),
    );
}
