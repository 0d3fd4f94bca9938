//! Fixed-step RK4 propagation of the closed-loop dynamics and the exact reverse-mode
//! derivative of the discrete rollout (backpropagation through time).
//!
//! The closed loop under training has Hamiltonian `H + V_θ`, i.e. the learned force
//! `-∇_q V_θ` is folded into `ṗ`. Gradients are taken of the discrete RK4 map,
//! so they agree with finite differences of the rollout up to FD truncation only.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::dynamics::{field_at, field_jacobian, hamiltonian, PendulumParams, Phase, State};
use crate::error::{Error, Result};
use crate::potential::PotentialNet;

/// Uniform grid `t_i = i·T/N`, `i = 0..=N`. `N` is even so `T/2` is node `N/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    period: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(period: f64, steps: usize) -> Result<Self> {
        if !(period > 0.0) || !period.is_finite() {
            return Err(Error::NonPositivePeriod(period));
        }
        if steps < 2 || !steps.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "grid step count must be even and at least 2, got {steps}"
            )));
        }
        Ok(TimeGrid { period, steps })
    }

    /// Grid covering `duration` with a step as close to `dt` as an even count allows.
    pub fn covering(duration: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        let raw = (duration / dt).round().max(2.0) as usize;
        Self::new(duration, raw + raw % 2)
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.period / self.steps as f64
    }

    pub fn mid_index(&self) -> usize {
        self.steps / 2
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt()
    }
}

/// Sampled closed-loop trajectory. `controls[i] = ∇_q V_θ(q_i)` and
/// `energies[i] = H + V_θ` at node `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub states: Vec<State>,
    pub controls: Vec<Vector2<f64>>,
    pub energies: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn q(&self, i: usize) -> Vector2<f64> {
        self.states[i].q2()
    }

    pub fn p(&self, i: usize) -> Vector2<f64> {
        self.states[i].p2()
    }

    /// Writes `t,q1,q2,p1,p2,u1,u2,E`, one row per grid node.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "t,q1,q2,p1,p2,u1,u2,E").map_err(io)?;
        for i in 0..self.len() {
            let s = &self.states[i];
            let u = &self.controls[i];
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                self.grid.time(i),
                s.q[0],
                s.q[1],
                s.p[0],
                s.p[1],
                u[0],
                u[1],
                self.energies[i]
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Loss cotangents on every stored sample, plus the partial derivative of the
/// loss with respect to the grid step `dt` (used by learnable-period training).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryCotangent {
    pub states: Vec<Vector4<f64>>,
    pub controls: Vec<Vector2<f64>>,
    pub dt: f64,
}

impl TrajectoryCotangent {
    pub fn zeros(samples: usize) -> Self {
        TrajectoryCotangent {
            states: vec![Vector4::zeros(); samples],
            controls: vec![Vector2::zeros(); samples],
            dt: 0.0,
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.states.iter_mut().for_each(|v| *v *= factor);
        self.controls.iter_mut().for_each(|v| *v *= factor);
        self.dt *= factor;
    }

    pub fn add_assign(&mut self, other: &TrajectoryCotangent) {
        assert_eq!(self.states.len(), other.states.len());
        for (a, b) in self.states.iter_mut().zip(&other.states) {
            *a += b;
        }
        for (a, b) in self.controls.iter_mut().zip(&other.controls) {
            *a += b;
        }
        self.dt += other.dt;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityResult {
    pub d_theta: Vec<f64>,
    /// `dL/dT`; only populated by [`backprop_scaled`].
    pub d_period: Option<f64>,
}

/// Anything that evaluates a phase-space vector field.
pub trait PhaseField {
    fn eval(&self, x: &Phase) -> Phase;
}

impl<F: Fn(&Phase) -> Phase> PhaseField for F {
    fn eval(&self, x: &Phase) -> Phase {
        self(x)
    }
}

/// State feedback `u_s(q, p)` added to `ṗ`.
pub trait Feedback {
    fn force(&self, q: &Vector2<f64>, p: &Vector2<f64>) -> Vector2<f64>;
}

impl<F: Fn(&Vector2<f64>, &Vector2<f64>) -> Vector2<f64>> Feedback for F {
    fn force(&self, q: &Vector2<f64>, p: &Vector2<f64>) -> Vector2<f64> {
        self(q, p)
    }
}

/// Zero feedback.
pub struct NoFeedback;

impl Feedback for NoFeedback {
    fn force(&self, _q: &Vector2<f64>, _p: &Vector2<f64>) -> Vector2<f64> {
        Vector2::zeros()
    }
}

pub fn rk4_step(field: &impl PhaseField, x: &Phase, h: f64) -> Phase {
    let k1 = field.eval(x);
    let k2 = field.eval(&(x + k1 * (0.5 * h)));
    let k3 = field.eval(&(x + k2 * (0.5 * h)));
    let k4 = field.eval(&(x + k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

fn split(x: &Phase) -> (Vector2<f64>, Vector2<f64>) {
    (Vector2::new(x[0], x[1]), Vector2::new(x[2], x[3]))
}

/// Autonomous closed-loop field of `H + V_θ`, optionally with external feedback.
pub struct ClosedLoop<'a, F: Feedback = NoFeedback> {
    pub params: &'a PendulumParams,
    pub net: &'a PotentialNet,
    pub feedback: F,
}

impl<'a> ClosedLoop<'a, NoFeedback> {
    pub fn autonomous(params: &'a PendulumParams, net: &'a PotentialNet) -> Self {
        ClosedLoop {
            params,
            net,
            feedback: NoFeedback,
        }
    }
}

impl<F: Feedback> PhaseField for ClosedLoop<'_, F> {
    fn eval(&self, x: &Phase) -> Phase {
        let (q, p) = split(x);
        let u = self.feedback.force(&q, &p) - self.net.input_gradient(&q);
        field_at(self.params, &q, &p, &u).phase()
    }
}

/// Jacobian of the autonomous closed-loop field with respect to the state.
fn closed_loop_jacobian(params: &PendulumParams, net: &PotentialNet, x: &Phase) -> Matrix4<f64> {
    let (q, p) = split(x);
    let mut jac = field_jacobian(params, &q, &p);
    let hess = net.input_hessian(&q);
    for r in 0..2 {
        for c in 0..2 {
            jac[(2 + r, c)] -= hess[(r, c)];
        }
    }
    jac
}

pub fn total_energy(params: &PendulumParams, net: &PotentialNet, state: &State) -> f64 {
    hamiltonian(params, state, net.value(&state.q2()))
}

fn integrate(
    params: &PendulumParams,
    net: &PotentialNet,
    field: &impl PhaseField,
    x0: Phase,
    grid: TimeGrid,
) -> Result<Trajectory> {
    let n = grid.steps();
    let h = grid.dt();
    let mut states = Vec::with_capacity(n + 1);
    let mut x = x0;
    states.push(State::from_phase(&x));
    for step in 0..n {
        x = rk4_step(field, &x, h);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: step + 1 });
        }
        states.push(State::from_phase(&x));
    }
    let controls = states.iter().map(|s| net.input_gradient(&s.q2())).collect();
    let energies = states.iter().map(|s| total_energy(params, net, s)).collect();
    Ok(Trajectory {
        grid,
        states,
        controls,
        energies,
    })
}

/// Autonomous rollout from rest at `q0` over one grid period.
pub fn rollout(params: &PendulumParams, net: &PotentialNet, q0: [f64; 2], grid: TimeGrid) -> Result<Trajectory> {
    let field = ClosedLoop::autonomous(params, net);
    integrate(params, net, &field, Vector4::new(q0[0], q0[1], 0.0, 0.0), grid)
}

/// Rollout with the period as a free variable: the time-rescaled system on
/// `s ∈ [0, 1]` with field `T·f`, discretized with `N` steps. The RK4 map is the
/// same as [`rollout`] with `dt = T/N`, so states coincide.
pub fn rollout_scaled(
    params: &PendulumParams,
    net: &PotentialNet,
    q0: [f64; 2],
    period: f64,
    steps: usize,
) -> Result<Trajectory> {
    if !(period > 0.0) {
        return Err(Error::NonPositivePeriod(period));
    }
    rollout(params, net, q0, TimeGrid::new(period, steps)?)
}

/// Rollout from an arbitrary state with external feedback added to `ṗ` at every stage.
pub fn rollout_controlled(
    params: &PendulumParams,
    net: &PotentialNet,
    state0: &State,
    duration: f64,
    dt: f64,
    controller: impl Feedback,
) -> Result<Trajectory> {
    let grid = TimeGrid::covering(duration, dt)?;
    let field = ClosedLoop {
        params,
        net,
        feedback: controller,
    };
    integrate(params, net, &field, state0.phase(), grid)
}

/// Exact reverse-mode derivative of a fixed-period rollout.
pub fn backprop_trajectory(
    params: &PendulumParams,
    net: &PotentialNet,
    trajectory: &Trajectory,
    cotangent: &TrajectoryCotangent,
) -> Result<SensitivityResult> {
    let (d_theta, _) = backprop(params, net, trajectory, cotangent)?;
    Ok(SensitivityResult {
        d_theta,
        d_period: None,
    })
}

/// Like [`backprop_trajectory`], additionally returning `dL/dT` for a rollout
/// produced by [`rollout_scaled`].
pub fn backprop_scaled(
    params: &PendulumParams,
    net: &PotentialNet,
    trajectory: &Trajectory,
    cotangent: &TrajectoryCotangent,
) -> Result<SensitivityResult> {
    let (d_theta, d_dt) = backprop(params, net, trajectory, cotangent)?;
    Ok(SensitivityResult {
        d_theta,
        d_period: Some(d_dt / trajectory.grid.steps() as f64),
    })
}

fn backprop(
    params: &PendulumParams,
    net: &PotentialNet,
    traj: &Trajectory,
    cot: &TrajectoryCotangent,
) -> Result<(Vec<f64>, f64)> {
    let samples = traj.len();
    if cot.states.len() != samples || cot.controls.len() != samples {
        return Err(Error::ShapeMismatch(format!(
            "trajectory has {samples} samples, cotangents have {} states and {} controls",
            cot.states.len(),
            cot.controls.len()
        )));
    }
    if traj.controls.len() != samples || samples != traj.grid.steps() + 1 {
        return Err(Error::ShapeMismatch("trajectory is inconsistent with its grid".into()));
    }

    let h = traj.grid.dt();
    let field = ClosedLoop::autonomous(params, net);
    let mut d_theta = vec![0.0; net.param_count()];
    let mut d_h = cot.dt;

    // Adjoint of the sample at node i, including its own loss cotangent and the
    // dependence of the stored control u_i = ∇V_θ(q_i) on q_i.
    let node_adjoint = |i: usize, incoming: Vector4<f64>, d_theta: &mut [f64]| -> Vector4<f64> {
        let mut a = incoming + cot.states[i];
        let cu = cot.controls[i];
        if cu != Vector2::zeros() {
            let q = traj.q(i);
            let dq = net.input_hessian(&q) * cu;
            a[0] += dq[0];
            a[1] += dq[1];
            net.accumulate_parameter_products(&q, 0.0, &cu, d_theta);
        }
        a
    };

    // Stage evaluation k = f(y): pulls back adjoint `ak` to y and θ.
    let pull = |y: &Phase, ak: &Vector4<f64>, d_theta: &mut [f64]| -> Vector4<f64> {
        let jac = closed_loop_jacobian(params, net, y);
        // ṗ contains -∇V_θ(q)
        let cg = -Vector2::new(ak[2], ak[3]);
        net.accumulate_parameter_products(&Vector2::new(y[0], y[1]), 0.0, &cg, d_theta);
        jac.transpose() * ak
    };

    let mut adj = node_adjoint(samples - 1, Vector4::zeros(), &mut d_theta);
    for i in (0..samples - 1).rev() {
        let x = traj.states[i].phase();
        let k1 = field.eval(&x);
        let x1 = x + k1 * (0.5 * h);
        let k2 = field.eval(&x1);
        let x2 = x + k2 * (0.5 * h);
        let k3 = field.eval(&x2);
        let x3 = x + k3 * h;
        let k4 = field.eval(&x3);

        d_h += adj.dot(&(k1 + k2 * 2.0 + k3 * 2.0 + k4)) / 6.0;
        let mut ax = adj;
        let mut ak1 = adj * (h / 6.0);
        let mut ak2 = adj * (h / 3.0);
        let mut ak3 = adj * (h / 3.0);
        let ak4 = adj * (h / 6.0);

        let ax3 = pull(&x3, &ak4, &mut d_theta);
        ax += ax3;
        ak3 += ax3 * h;
        d_h += ax3.dot(&k3);

        let ax2 = pull(&x2, &ak3, &mut d_theta);
        ax += ax2;
        ak2 += ax2 * (0.5 * h);
        d_h += 0.5 * ax2.dot(&k2);

        let ax1 = pull(&x1, &ak2, &mut d_theta);
        ax += ax1;
        ak1 += ax1 * (0.5 * h);
        d_h += 0.5 * ax1.dot(&k1);

        ax += pull(&x, &ak1, &mut d_theta);

        adj = node_adjoint(i, ax, &mut d_theta);
    }
    Ok((d_theta, d_h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::open_loop_potential_gradient;

    fn quick_net() -> PotentialNet {
        PotentialNet::init(16, 3).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(1.5, 150).is_ok());
        assert!(TimeGrid::new(1.5, 151).is_err());
        assert!(TimeGrid::new(1.5, 0).is_err());
        assert!(matches!(TimeGrid::new(0.0, 10), Err(Error::NonPositivePeriod(_))));
        let g = TimeGrid::new(1.5, 150).unwrap();
        assert_eq!(g.time(g.mid_index()), 0.75);
        assert_eq!(TimeGrid::covering(4.5, 0.01).unwrap().steps(), 450);
        assert_eq!(TimeGrid::covering(0.05, 0.01).unwrap().steps(), 6);
    }

    #[test]
    fn equilibrium_is_fixed() {
        // Without the spring, straight down is the minimum of the open-loop potential.
        let params = PendulumParams {
            k: 0.0,
            ..PendulumParams::default()
        };
        let net = PotentialNet::zeros(4).unwrap();
        assert_eq!(
            open_loop_potential_gradient(&params, &Vector2::zeros()),
            Vector2::zeros()
        );
        let traj = rollout(&params, &net, [0.0, 0.0], TimeGrid::new(1.5, 150).unwrap()).unwrap();
        assert!(traj
            .states
            .iter()
            .all(|s| s.q == vec![0.0, 0.0] && s.p == vec![0.0, 0.0]));
    }

    #[test]
    fn energy_is_conserved() {
        let params = PendulumParams::default();
        let net = quick_net();
        let traj = rollout(&params, &net, [0.8, -0.4], TimeGrid::new(1.5, 150).unwrap()).unwrap();
        let e0 = traj.energies[0];
        let drift = traj.energies.iter().map(|e| (e - e0).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-8 * (1.0 + e0.abs()) * 10.0, "drift {drift}");
        assert_eq!(traj.states[0].p, vec![0.0, 0.0]);
        assert_eq!(traj.len(), 151);
    }

    #[test]
    fn zero_feedback_reproduces_rollout() {
        let params = PendulumParams::default();
        let net = quick_net();
        let grid = TimeGrid::new(1.5, 150).unwrap();
        let a = rollout(&params, &net, [0.5, 0.5], grid).unwrap();
        let b = rollout_controlled(&params, &net, &State::at_rest([0.5, 0.5]), 1.5, 0.01, NoFeedback).unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn scaled_rollout_matches_fixed_grid() {
        let params = PendulumParams::default();
        let net = quick_net();
        let a = rollout(&params, &net, [0.5, 0.5], TimeGrid::new(1.5, 150).unwrap()).unwrap();
        let b = rollout_scaled(&params, &net, [0.5, 0.5], 1.5, 150).unwrap();
        assert_eq!(a.states, b.states);
        assert!(matches!(
            rollout_scaled(&params, &net, [0.5, 0.5], -1.0, 150),
            Err(Error::NonPositivePeriod(_))
        ));
    }

    #[test]
    fn time_rescaling_invariance() {
        let params = PendulumParams::default();
        let net = quick_net();
        let full = ClosedLoop::autonomous(&params, &net);
        let half = |x: &Phase| full.eval(x) * 0.5;
        let mut a = Vector4::new(0.4, 0.2, 0.0, 0.0);
        let mut b = a;
        for _ in 0..100 {
            a = rk4_step(&full, &a, 0.01);
            b = rk4_step(&half, &b, 0.02);
        }
        assert!((a - b).norm() < 1e-13);
    }

    #[test]
    fn nonfinite_state_is_reported() {
        let params = PendulumParams::default();
        let net = quick_net();
        let blowup = |_: &Vector2<f64>, _: &Vector2<f64>| Vector2::new(f64::INFINITY, 0.0);
        let err = rollout_controlled(&params, &net, &State::at_rest([0.1, 0.1]), 0.1, 0.01, blowup).unwrap_err();
        assert!(matches!(err, Error::NonFiniteState { step: 1 }));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let params = PendulumParams::default();
        let net = quick_net();
        let traj = rollout(&params, &net, [0.5, 0.5], TimeGrid::new(0.5, 50).unwrap()).unwrap();
        let s = backprop_scaled(&params, &net, &traj, &TrajectoryCotangent::zeros(51)).unwrap();
        assert!(s.d_theta.iter().all(|&v| v == 0.0));
        assert_eq!(s.d_period, Some(0.0));
    }

    #[test]
    fn cotangent_shape_is_checked() {
        let params = PendulumParams::default();
        let net = quick_net();
        let traj = rollout(&params, &net, [0.5, 0.5], TimeGrid::new(0.5, 50).unwrap()).unwrap();
        let err = backprop_trajectory(&params, &net, &traj, &TrajectoryCotangent::zeros(10));
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn backprop_matches_finite_differences_for_terminal_state() {
        let params = PendulumParams::default();
        let net = quick_net();
        let grid = TimeGrid::new(0.6, 60).unwrap();
        let weights = Vector4::new(0.3, -1.2, 0.7, 0.25);
        let loss = |n: &PotentialNet| {
            let t = rollout(&params, n, [0.7, -0.3], grid).unwrap();
            let last = t.states.last().unwrap().phase();
            weights.dot(&last) + t.controls[20].norm_squared()
        };
        let traj = rollout(&params, &net, [0.7, -0.3], grid).unwrap();
        let mut cot = TrajectoryCotangent::zeros(traj.len());
        cot.states[60] = weights;
        cot.controls[20] = traj.controls[20] * 2.0;
        let grad = backprop_trajectory(&params, &net, &traj, &cot).unwrap().d_theta;
        let h = 1e-6;
        for k in (0..net.param_count()).step_by(5) {
            let mut plus = net.clone();
            let mut minus = net.clone();
            plus.params_mut()[k] += h;
            minus.params_mut()[k] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let err = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-6);
            assert!(err < 1e-5, "param {k}: fd {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let params = PendulumParams::default();
        let net = quick_net();
        let traj = rollout(&params, &net, [0.5, 0.5], TimeGrid::new(0.1, 10).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        traj.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,q1,q2,p1,p2,u1,u2,E"));
        assert_eq!(lines.count(), 11);
    }
}
