//! Cycle multipliers of a learned mode with and without the stabilizing feedback.
//!
//! ```text
//! cargo run --release --example cycle_multipliers -- [checkpoint.json]
//! ```

use std::path::Path;

use modectl::stabilizer::{converged_start, cycle_multipliers, ControllerGains, MultiplierReport, ReferenceMode};
use modectl::trainer::{train, TrainConfig};
use modectl::{PendulumParams, PotentialNet, TaskSpec};

const Q0: [f64; 2] = [0.2353, -0.5312];

fn show(label: &str, report: &MultiplierReport) {
    println!("{label}");
    for m in &report.multipliers {
        match m.ratio {
            Some(r) => println!("  {:>2}: {r:>9.4}", m.component),
            None => println!("  {:>2}: undefined (denominator {:.1e})", m.component, m.denominator),
        }
    }
}

fn main() -> modectl::Result<()> {
    let params = PendulumParams::default();
    let net = match std::env::args().nth(1) {
        Some(path) => PotentialNet::load(Path::new(&path))?,
        None => {
            let task = TaskSpec {
                q0: Q0,
                h_star: [0.1778, -1.7702],
                period: 1.5,
            };
            train(&params, &TrainConfig::new(task), None)?.net
        }
    };
    let mode = ReferenceMode::from_rollout(&params, &net, Q0, 1.5, 1000)?;
    let dt = 1e-3;

    let gains = ControllerGains::default();
    let x0 = converged_start(&params, &net, &mode, &gains, 10, 0, dt)?;
    show(
        "stabilized (alpha_E = 1, alpha_M = 10):",
        &cycle_multipliers(&params, &net, &mode, &gains, &x0, 1e-5, dt)?,
    );

    let free = ControllerGains::zero();
    show(
        "uncontrolled:",
        &cycle_multipliers(&params, &net, &mode, &free, &mode.state(0), 1e-5, dt)?,
    );
    Ok(())
}
