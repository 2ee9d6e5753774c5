//! FPED/FNED bias metrics on two hand-built predictors.
//!
//! Domain 0 is mostly fake news, domain 1 mostly real. A predictor that
//! just reads the domain id gets a decent overall error rate while being
//! maximally unfair; a predictor whose error rates match across domains
//! scores exactly zero on both equality deviations.

use dtdbd::metrics::{bias_report, disparate_mistreatment_check};
use dtdbd::report::{render_markdown, NamedReport};

fn main() {
    // 40 samples per domain. Domain 0: 30 fake, 10 real. Domain 1 mirrors it.
    let mut y_true = Vec::new();
    let mut domains = Vec::new();
    for d in 0..2usize {
        let fakes = if d == 0 { 30 } else { 10 };
        for i in 0..40 {
            y_true.push(u8::from(i < fakes));
            domains.push(d);
        }
    }

    // "Domain reader": call everything in domain 0 fake, domain 1 real.
    let by_domain: Vec<u8> = domains.iter().map(|&d| u8::from(d == 0)).collect();
    // "Even errors": miss exactly 10% of the fakes and 10% of the reals
    // in each domain, so both error rates match across domains.
    let even: Vec<u8> = y_true
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let fakes = if i < 40 { 30 } else { 10 };
            let within = i % 40;
            let run_pos = if within < fakes { within } else { within - fakes };
            let run_len = if within < fakes { fakes } else { 40 - fakes };
            if run_pos < run_len / 10 {
                1 - t
            } else {
                t
            }
        })
        .collect();

    let reader = bias_report(&y_true, &by_domain, &domains, 2).expect("report");
    let fair = bias_report(&y_true, &even, &domains, 2).expect("report");

    for (name, r) in [("domain reader", &reader), ("even errors", &fair)] {
        println!("{name}:");
        println!("  macro F1 {:.4}", r.f1);
        for d in &r.domains {
            println!("  domain {}: FNR {:.3}  FPR {:.3}", d.domain, d.fnr, d.fpr);
        }
        println!("  FNED {:.4} + FPED {:.4} = Total {:.4}", r.fned, r.fped, r.total);
        println!();
    }

    let table = render_markdown(&[
        NamedReport::new("domain-reader", reader.clone()),
        NamedReport::new("even-errors", fair.clone()),
    ])
    .expect("render table");
    println!("{table}");

    // Pairwise disparate-mistreatment gate at a 10% gap tolerance.
    for (name, r) in [("domain reader", &reader), ("even errors", &fair)] {
        let checks = disparate_mistreatment_check(r, 0.10).expect("pair check");
        for c in &checks {
            println!(
                "{name}: domains {} vs {}: FNR gap {:.3}, FPR gap {:.3} -> {}",
                c.domain_a,
                c.domain_b,
                c.fnr_gap,
                c.fpr_gap,
                if c.pass { "pass" } else { "fail" }
            );
        }
    }
}
