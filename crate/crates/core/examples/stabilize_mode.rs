//! Stabilizes a learned mode from a far-away start, without and with joint damping.
//!
//! Pass a checkpoint from `train_eigenmode`, or let the example train one.
//!
//! ```text
//! cargo run --release --example stabilize_mode -- [checkpoint.json]
//! ```

use std::path::Path;

use modectl::stabilizer::{simulate_closed_loop, ControllerGains, ReferenceMode};
use modectl::trainer::{train, TrainConfig};
use modectl::{PendulumParams, PotentialNet, State, TaskSpec};

const Q0: [f64; 2] = [0.2353, -0.5312];

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
    let start = State::new(vec![0.2, 0.2], vec![5.0, 5.0])?;
    println!("reference energy {:.4} J", mode.e_bar());

    for b in [0.0, 0.1, 1.0] {
        let gains = ControllerGains {
            b,
            ..ControllerGains::default()
        };
        let run = simulate_closed_loop(&params, &net, &mode, &start, &gains, 3, 1e-3)?;
        println!("\nb = {b}");
        println!(
            "{:>6} {:>10} {:>10} {:>10} {:>10}",
            "t", "|E-Ebar|", "q dist", "p dist", "E"
        );
        for i in (0..run.errors.len()).step_by(500) {
            let e = run.errors[i];
            println!(
                "{:>6.2} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
                run.trajectory.grid.time(i),
                e.e_err,
                e.q_dist,
                e.p_dist,
                run.trajectory.energies[i]
            );
        }
        run.write_csv(Path::new(&format!("stabilize_b{b}.csv")))?;
    }
    Ok(())
}
