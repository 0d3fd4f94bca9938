//! Trains a control potential so that the closed loop oscillates between the
//! rest pose `q0` and a tip target at half period, then certifies the result.
//!
//! ```text
//! cargo run --release --example train_eigenmode -- [out_dir] [epochs]
//! ```

use std::path::PathBuf;

use modectl::trainer::{train, TrainConfig};
use modectl::{PendulumParams, TaskSpec};

fn main() -> modectl::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/example_train".into()));
    let epochs = args.next().map(|e| e.parse().expect("epochs")).unwrap_or(500);

    let params = PendulumParams::default();
    let mut config = TrainConfig::new(TaskSpec {
        q0: [0.2353, -0.5312],
        h_star: [0.1778, -1.7702],
        period: 1.5,
    });
    config.epochs = epochs;

    let outcome = train(&params, &config, Some(&out))?;
    for r in outcome.records.iter().step_by(50.max(epochs / 10).max(1)) {
        println!(
            "epoch {:4}  loss {:.5}  task err {:.4}  effort {:.3}",
            r.epoch, r.loss, r.task_err, r.effort
        );
    }
    let c = outcome.certification;
    println!("\neigenmode: {}", c.is_eigenmode);
    println!("  |p(T/2)|        {:.2e}", c.midpoint_momentum);
    println!("  closure         {:.2e}", c.closure_error);
    println!("  symmetry (q, p) {:.2e}, {:.2e}", c.q_symmetry, c.p_symmetry);
    println!("  retrace         {:.2e}", c.retrace_error);
    let path = out.join("checkpoint.json");
    outcome.net.save(&path)?;
    outcome.trajectory.write_csv(&out.join("trajectory.csv"))?;
    println!("saved {}", path.display());
    Ok(())
}
