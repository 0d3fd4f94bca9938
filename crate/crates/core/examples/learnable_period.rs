//! Learns the potential and the period together, starting from a 1.5 s guess.
//!
//! ```text
//! cargo run --release --example learnable_period
//! ```

use modectl::trainer::{train, TrainConfig};
use modectl::{PendulumParams, TaskSpec};

fn main() -> modectl::Result<()> {
    let params = PendulumParams::default();
    let mut config = TrainConfig::new(TaskSpec {
        q0: [0.121, -0.2537],
        h_star: [0.1427, -1.883],
        period: 1.5,
    });
    config.learnable_period = true;

    let outcome = train(&params, &config, None)?;
    for r in outcome.records.iter().step_by(50) {
        println!("epoch {:4}  loss {:.5}  T {:.4} s", r.epoch, r.loss, r.period);
    }
    println!(
        "\nlearned period {:.4} s, eigenmode {}, |p(T/2)| {:.2e}",
        outcome.period, outcome.certification.is_eigenmode, outcome.certification.midpoint_momentum
    );
    Ok(())
}
