//! Backpropagation through the RK4 rollout against central differences, for
//! network weights and for the period.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use modectl::trainer::{evaluate, TrainConfig};
use modectl::{PendulumParams, PotentialNet, TaskSpec};

fn main() -> modectl::Result<()> {
    let params = PendulumParams::default();
    let mut config = TrainConfig::new(TaskSpec {
        q0: [0.2353, -0.5312],
        h_star: [0.1778, -1.7702],
        period: 1.5,
    });
    config.learnable_period = true;
    let net = PotentialNet::init(config.hidden, 0)?;
    let period = config.task.period;
    let eval = evaluate(&params, &net, &config, period, 0)?;
    let loss = |net: &PotentialNet, period: f64| evaluate(&params, net, &config, period, 0).map(|e| e.record.loss);
    println!("loss = {:.6}", eval.record.loss);

    let h = 1e-5;
    println!(
        "{:>6} {:>14} {:>14} {:>10}",
        "coord", "backprop", "central diff", "rel err"
    );
    for k in (0..net.param_count()).step_by(97) {
        let mut plus = net.clone();
        plus.params_mut()[k] += h;
        let mut minus = net.clone();
        minus.params_mut()[k] -= h;
        let fd = (loss(&plus, period)? - loss(&minus, period)?) / (2.0 * h);
        let g = eval.d_theta[k];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-12);
        println!("{k:>6} {g:>14.6e} {fd:>14.6e} {rel:>10.1e}");
    }
    let fd = (loss(&net, period + 1e-6)? - loss(&net, period - 1e-6)?) / 2e-6;
    println!("{:>6} {:>14.6e} {fd:>14.6e}", "T", eval.d_period);
    Ok(())
}
