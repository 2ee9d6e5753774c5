//! Walking the dynamic teacher-weight schedule by hand.
//!
//! Feeds a scripted validation history into the momentum recursion and
//! prints how omega_add and omega_dkd respond: bias getting worse pushes
//! weight toward the unbiased teacher's rival, accuracy gains push it
//! back, and the clamp band keeps both teachers alive no matter what.

use dtdbd::schedule::{compute_deltas, update_distill_weights, DaaConfig, DistillState};

fn main() {
    let mut state = DistillState::new(DaaConfig::default()).expect("valid config");
    println!(
        "start: omega_add {:.3}, omega_dkd {:.3}, omega_s {:.3} (held for the first two epochs)",
        state.omega_add,
        state.omega_dkd,
        state.config.omega_s
    );

    // A plausible student run: accuracy climbs early, bias drops, then a
    // late epoch trades a little F1 away while bias spikes back up.
    let epochs = [
        (0.640, 1.480),
        (0.700, 1.300),
        (0.731, 1.120),
        (0.742, 0.980),
        (0.748, 0.900),
        (0.739, 1.050),
        (0.741, 0.940),
    ];

    println!(
        "\n{:>5} {:>8} {:>8} {:>11} {:>11} {:>10} {:>10}",
        "epoch", "val F1", "Total", "dF1", "dBias", "omega_add", "omega_dkd"
    );
    for (epoch, (f1, total)) in epochs.iter().enumerate() {
        state.record(*f1, *total);
        let deltas = compute_deltas(&state.history);
        state.step();
        match deltas {
            None => println!(
                "{epoch:>5} {f1:>8.3} {total:>8.3} {:>11} {:>11} {:>10.4} {:>10.4}",
                "-", "-", state.omega_add, state.omega_dkd
            ),
            Some((df1, dbias)) => println!(
                "{epoch:>5} {f1:>8.3} {total:>8.3} {df1:>+11.3} {dbias:>+11.3} {:>10.4} {:>10.4}",
                state.omega_add, state.omega_dkd
            ),
        }
        assert!((state.omega_add + state.omega_dkd - 1.0).abs() < 1e-12);
    }

    // The two textbook single-step updates from a fresh 0.5/0.5 state.
    let fresh = DistillState::new(DaaConfig::default()).expect("valid config");
    let worse = update_distill_weights(&fresh, 0.02, 0.1);
    let better = update_distill_weights(&fresh, 0.02, -0.1);
    println!("\none step from 0.5 with dF1 = +0.02:");
    println!("  bias worse by 0.10  -> omega_add {:.3}", worse.omega_add);
    println!("  bias better by 0.10 -> omega_add {:.3}", better.omega_add);

    // Clamping: a huge adverse swing cannot push a teacher out of the mix.
    let slammed = update_distill_weights(&fresh, -5.0, 5.0);
    println!(
        "\nafter an extreme adverse step, omega_add clamps to {:.2} (band [{:.2}, {:.2}])",
        slammed.omega_add,
        fresh.config.omega_min,
        fresh.config.omega_max
    );
}
