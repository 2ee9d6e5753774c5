//! Autodiff vs finite differences on a composite objective.
//!
//! Part one builds cross-entropy, the adversarial domain term, the entropy
//! regularizer, and both distillation losses on one tape, backpropagates,
//! and re-evaluates the graph under central finite differences for several
//! parameters. Every relative error should sit comfortably below 1e-5.
//!
//! Part two covers the one op finite differences cannot check: the
//! gradient reversal layer, whose backward pass is intentionally not the
//! derivative of its forward pass. Its effect is verified against two
//! plain backward passes instead.

use std::collections::BTreeMap;

use dtdbd::data::{generate, SyntheticSpec};
use dtdbd::diffcore::{finite_diff_grad, Tape, Tensor, Var};
use dtdbd::losses::{
    add_loss, cross_entropy, dat_ie_loss, dkd_loss, overall_loss, pairwise_sq_distances,
    pairwise_sq_distances_data, DistillConfig, LossWeights,
};
use dtdbd::models::{
    bind, bind_domain_head_const, classify, encode_batch, encoder_features_values, init_params,
    label_logits_values, Binding, EncoderConfig, Head, ModelParams,
};

fn main() {
    let mut spec = SyntheticSpec::nine_domains(120, 42);
    spec.embed_dim = 16;
    let data = generate(&spec).expect("generate corpus");
    let batch: Vec<usize> = (0..6).collect();

    let encoder = EncoderConfig {
        embed_dim: 16,
        kernel_widths: vec![1, 2],
        channels_per_kernel: 4,
        conv_seq_len: 4,
        ..EncoderConfig::student_conv()
    };
    let params = init_params(&encoder, data.num_domains, 3).expect("init params");

    // Frozen teacher signals, fixed for the whole check.
    let teacher_distances = {
        let t = init_params(&encoder, data.num_domains, 4).expect("teacher params");
        let feats = encoder_features_values(&t, &data, &batch).unwrap();
        pairwise_sq_distances_data(&feats).unwrap()
    };
    let teacher_logits = {
        let t = init_params(&encoder, data.num_domains, 5).expect("teacher params");
        label_logits_values(&t, &data, &batch).unwrap()
    };

    let distill = DistillConfig::default();
    let labels: Vec<usize> = batch.iter().map(|&i| data.samples[i].label as usize).collect();
    let domains: Vec<usize> = batch.iter().map(|&i| data.samples[i].domain).collect();
    let params_snapshot = params.clone();

    // Every loss family on one tape. Two deliberate stop-gradients need
    // care: the adversarial domain term reads unreversed features here
    // (the reversal layer gets its own check below, because under it the
    // tape gradient is not the derivative finite differences measure),
    // and the entropy term reads the domain head from a frozen snapshot,
    // matching training where that path trains only the encoder.
    let build = |p: &ModelParams, tape: &mut Tape| {
        let b = bind(tape, p, true);
        let enc = encode_batch(tape, &b, &encoder, &data, &batch).unwrap();
        let label_logits = classify(tape, &b, Head::Label, enc.matrix).unwrap();
        let domain_logits = classify(tape, &b, Head::Domain, enc.matrix).unwrap();
        let head_const = bind_domain_head_const(tape, &params_snapshot);
        let domain_ie = classify(tape, &head_const, Head::Domain, enc.matrix).unwrap();
        let parts = dat_ie_loss(
            tape, label_logits, domain_logits, domain_ie, &labels, &domains, &distill,
        )
        .unwrap();
        let m_student = pairwise_sq_distances(tape, enc.matrix).unwrap();
        let l_add = add_loss(tape, &teacher_distances, m_student, &distill).unwrap();
        let l_dkd = dkd_loss(tape, &teacher_logits, label_logits, &distill).unwrap();
        overall_loss(
            tape,
            Some(l_add),
            Some(l_dkd),
            Some(parts.total),
            LossWeights::new(0.5, 0.5, 1.0),
        )
        .unwrap()
    };

    let mut tape = Tape::new();
    let loss = build(&params, &mut tape);
    println!("composite loss on 6 samples: {:.6}", tape.value(loss).item());
    println!("tape length: {} nodes", tape.len());
    let grads: BTreeMap<String, Tensor> = tape.backward(loss).expect("backward");

    let checked = [
        "encoder.conv_w2.weight",
        "encoder.conv_w1.bias",
        "label_head.weight",
        "domain_head.weight",
    ];
    println!("\n{:<24} {:>12} {:>12}", "parameter", "|grad| max", "rel err max");
    for name in checked {
        let analytic = &grads[name];
        let numeric = finite_diff_grad(
            |probe| {
                let mut perturbed = params.clone();
                perturbed.tensors.insert(name.to_string(), probe.clone());
                let mut t = Tape::new();
                let l = build(&perturbed, &mut t);
                t.value(l).item()
            },
            &params.tensors[name],
            1e-5,
        );
        let mut max_abs = 0.0f64;
        let mut max_rel = 0.0f64;
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            max_abs = max_abs.max(a.abs());
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
        println!("{name:<24} {max_abs:>12.6} {max_rel:>12.2e}");
        assert!(max_rel < 1e-5, "{name}: relative error {max_rel} is too large");
    }
    println!("\nall gradients agree with finite differences");

    // The reversal layer. Three graphs over the same forward pass:
    //   A: label cross-entropy alone
    //   B: domain cross-entropy on unreversed features alone
    //   C: label CE plus alpha * domain CE routed through the reversal
    // For every encoder parameter C's gradient must equal A - alpha * B
    // (the encoder is pushed to hurt the domain head), while the domain
    // head itself still learns: its C gradient is +alpha * B.
    let alpha = 0.7;
    let graph_a = |tape: &mut Tape, b: &Binding, m: Var| -> Var {
        let logits = classify(tape, b, Head::Label, m).unwrap();
        cross_entropy(tape, logits, &labels).unwrap()
    };
    let graph_b = |tape: &mut Tape, b: &Binding, m: Var| -> Var {
        let logits = classify(tape, b, Head::Domain, m).unwrap();
        cross_entropy(tape, logits, &domains).unwrap()
    };
    let run = |build_loss: &dyn Fn(&mut Tape, &Binding, Var) -> Var| {
        let mut tape = Tape::new();
        let b = bind(&mut tape, &params, true);
        let enc = encode_batch(&mut tape, &b, &encoder, &data, &batch).unwrap();
        let loss = build_loss(&mut tape, &b, enc.matrix);
        tape.backward(loss).expect("backward")
    };
    let ga = run(&graph_a);
    let gb = run(&graph_b);
    let gc = run(&|tape, b, m| {
        let ce = graph_a(tape, b, m);
        let reversed = tape.grad_reverse(m, alpha).unwrap();
        let dom_logits = classify(tape, b, Head::Domain, reversed).unwrap();
        let dom = cross_entropy(tape, dom_logits, &domains).unwrap();
        let scaled = tape.scale(dom, alpha);
        tape.add(ce, scaled)
    });

    let close = |x: &Tensor, y: Vec<f64>| {
        x.data().iter().zip(&y).all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0))
    };
    let combine = |a: &Tensor, b: &Tensor, sign: f64| -> Vec<f64> {
        a.data().iter().zip(b.data()).map(|(x, y)| x + sign * alpha * alpha * y).collect()
    };
    for name in ["encoder.conv_w1.weight", "encoder.conv_w2.weight", "encoder.conv_w1.bias"] {
        assert!(
            close(&gc[name], combine(&ga[name], &gb[name], -1.0)),
            "{name}: reversal identity failed"
        );
    }
    let head_expect: Vec<f64> =
        gb["domain_head.weight"].data().iter().map(|g| alpha * g).collect();
    assert!(close(&gc["domain_head.weight"], head_expect), "domain head identity failed");
    println!(
        "gradient reversal verified: encoder sees CE - {:.2} * domain gradient, \
         domain head trains normally",
        alpha * alpha
    );
}
