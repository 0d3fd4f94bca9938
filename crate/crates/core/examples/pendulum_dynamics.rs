//! Mass matrix, energy and integration accuracy of the double pendulum.
//!
//! ```text
//! cargo run --release --example pendulum_dynamics
//! ```

use modectl::dynamics::{
    hamiltonian, mass_matrix, mass_matrix_inverse, open_loop_potential_gradient, open_loop_potential_hessian,
    vector_field,
};
use modectl::integrator::rollout;
use modectl::{PendulumParams, PotentialNet, State, TimeGrid};
use nalgebra::Vector2;

fn main() -> modectl::Result<()> {
    let params = PendulumParams::default();
    let q = Vector2::new(0.3, 0.7);
    let m = mass_matrix(&params, &q);
    let inv = mass_matrix_inverse(&params, &q);
    println!(
        "M(q)    = [[{:.4}, {:.4}], [{:.4}, {:.4}]]",
        m[(0, 0)],
        m[(0, 1)],
        m[(1, 0)],
        m[(1, 1)]
    );
    println!(
        "M^-1(q) = [[{:.4}, {:.4}], [{:.4}, {:.4}]]",
        inv[(0, 0)],
        inv[(0, 1)],
        inv[(1, 0)],
        inv[(1, 1)]
    );

    // the spring and gravity balance at the open-loop equilibrium
    let mut eq = Vector2::new(0.0, 0.2);
    for _ in 0..20 {
        let g = open_loop_potential_gradient(&params, &eq);
        let h = open_loop_potential_hessian(&params, &eq);
        eq -= h.lu().solve(&g).expect("regular hessian");
    }
    println!("equilibrium q = ({:.4}, {:.4})", eq[0], eq[1]);

    let x = State::new(vec![0.4, -0.2], vec![1.0, -0.5])?;
    let f = vector_field(&params, &x, &Vector2::zeros());
    println!(
        "H = {:.6}, qdot = ({:.4}, {:.4}), pdot = ({:.4}, {:.4})",
        hamiltonian(&params, &x, 0.0),
        f.dq[0],
        f.dq[1],
        f.dp[0],
        f.dp[1]
    );

    println!("\nenergy drift over one 1.5 s period from rest at (0.2353, -0.5312):");
    let net = PotentialNet::init(256, 0)?;
    for steps in [150, 300, 600] {
        let traj = rollout(&params, &net, [0.2353, -0.5312], TimeGrid::new(1.5, steps)?)?;
        let e0 = traj.energies[0];
        let drift = traj.energies.iter().map(|e| (e - e0).abs()).fold(0.0, f64::max);
        println!("  N = {steps:4}: max |E - E0| = {drift:.3e}");
    }
    Ok(())
}
