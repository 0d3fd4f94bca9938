//! Sweeps the control-effort weight and reports the effort of each learned mode.
//!
//! ```text
//! cargo run --release --example effort_sweep -- [jobs]
//! ```

use modectl::trainer::{sweep, SweepValue, TrainConfig};
use modectl::{PendulumParams, TaskSpec};

fn main() -> modectl::Result<()> {
    let jobs = std::env::args().nth(1).map(|j| j.parse().expect("jobs")).unwrap_or(1);
    let params = PendulumParams::default();
    let base = TrainConfig::new(TaskSpec {
        q0: [0.2353, -0.5312],
        h_star: [0.1778, -1.7702],
        period: 1.5,
    });
    let values: Vec<SweepValue> = [0.0, 1e-5, 1e-4, 1e-3, 1e-2]
        .into_iter()
        .map(SweepValue::AlphaEff)
        .collect();
    let (_, entries) = sweep(&params, &base, &values, None, jobs)?;
    println!(
        "{:>10} {:>10} {:>10} {:>10}",
        "alpha_eff", "effort", "task err", "eigenmode"
    );
    for e in entries {
        let certified = e.certification.map(|c| c.is_eigenmode).unwrap_or(false);
        println!(
            "{:>10} {:>10.4} {:>10.4} {:>10}",
            e.value.label(),
            e.final_effort.unwrap_or(f64::NAN),
            e.task_error.unwrap_or(f64::NAN),
            certified
        );
    }
    Ok(())
}
