//! Task and eigenmode losses on sampled trajectories, with the cotangents that
//! feed [`backprop_trajectory`](crate::integrator::backprop_trajectory), and the
//! eigenmode certificate.
//!
//! The `∞,T` norm `max_{t∈[0,T/2]} ‖y(t)‖₁` is evaluated on grid nodes; the
//! subgradient at a tie goes to the lowest index.

use nalgebra::{Matrix2, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::dynamics::PendulumParams;
use crate::error::{Error, Result};
use crate::integrator::{Trajectory, TrajectoryCotangent};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha_task: f64,
    pub alpha_eff: f64,
    pub lambda1: f64,
    pub alpha1: f64,
    pub lambda2: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_task: 10.0,
            alpha_eff: 1e-4,
            lambda1: 0.05,
            alpha1: 5e-4,
            lambda2: 0.95,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha_task,
            self.alpha_eff,
            self.lambda1,
            self.alpha1,
            self.lambda2,
            self.beta,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidParameter(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Pick-and-place task: start at rest in `q0`, reach `h_star` at `T/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub q0: [f64; 2],
    pub h_star: [f64; 2],
    /// Fixed period, or the initial guess when the period is learned.
    pub period: f64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.q0.iter().chain(&self.h_star).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("q0 and h_star must be finite".into()));
        }
        if !(self.period > 0.0) {
            return Err(Error::NonPositivePeriod(self.period));
        }
        Ok(())
    }
}

/// Tip position of link 2.
pub fn forward_kinematics(params: &PendulumParams, q: &Vector2<f64>) -> Vector2<f64> {
    let d = params.d;
    let q12 = q[0] + q[1];
    Vector2::new(d * (q[0].sin() + q12.sin()), -d * (q[0].cos() + q12.cos()))
}

pub fn kinematics_jacobian(params: &PendulumParams, q: &Vector2<f64>) -> Matrix2<f64> {
    let d = params.d;
    let q12 = q[0] + q[1];
    let (s1, c1) = q[0].sin_cos();
    let (s12, c12) = q12.sin_cos();
    Matrix2::new(d * (c1 + c12), d * c12, d * (s1 + s12), d * s12)
}

/// Scalar loss with its trajectory cotangent.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub value: f64,
    pub cotangent: TrajectoryCotangent,
}

#[derive(Debug, Clone)]
pub struct TaskLoss {
    pub value: f64,
    /// `∫₀ᵀ ‖u‖² dt` by the trapezoid rule, unweighted.
    pub effort: f64,
    /// `‖h(q(T/2)) - h*‖`.
    pub task_error: f64,
    pub cotangent: TrajectoryCotangent,
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub value: f64,
    pub task: f64,
    pub eigen: f64,
    pub effort: f64,
    pub task_error: f64,
    pub cotangent: TrajectoryCotangent,
}

fn check_grid(traj: &Trajectory) -> Result<()> {
    let n = traj.grid.steps();
    if !n.is_multiple_of(2) || traj.len() != n + 1 || traj.controls.len() != n + 1 {
        return Err(Error::ShapeMismatch(
            "trajectory must have N+1 samples with N even".into(),
        ));
    }
    Ok(())
}

/// Trapezoid weights on `0..=n`.
fn trapezoid_weight(i: usize, n: usize) -> f64 {
    if i == 0 || i == n {
        0.5
    } else {
        1.0
    }
}

pub fn loss_task(
    params: &PendulumParams,
    traj: &Trajectory,
    spec: &TaskSpec,
    weights: &LossWeights,
) -> Result<TaskLoss> {
    check_grid(traj)?;
    let n = traj.grid.steps();
    let dt = traj.grid.dt();
    let mid = traj.grid.mid_index();
    let mut cot = TrajectoryCotangent::zeros(n + 1);

    let q_mid = traj.q(mid);
    let miss = forward_kinematics(params, &q_mid) - Vector2::from(spec.h_star);
    let task_term = 0.5 * weights.alpha_task * miss.norm_squared();
    let dq = kinematics_jacobian(params, &q_mid).transpose() * miss * weights.alpha_task;
    cot.states[mid][0] += dq[0];
    cot.states[mid][1] += dq[1];

    let mut weighted = 0.0;
    for (i, u) in traj.controls.iter().enumerate() {
        let w = trapezoid_weight(i, n);
        weighted += w * u.norm_squared();
        cot.controls[i] = u * (2.0 * weights.alpha_eff * w * dt);
    }
    let effort = weighted * dt;
    cot.dt = weights.alpha_eff * weighted;

    Ok(TaskLoss {
        value: task_term + weights.alpha_eff * effort,
        effort,
        task_error: miss.norm(),
        cotangent: cot,
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Symmetry residuals of a trajectory sampled over one period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymmetryResiduals {
    /// `max_i ‖q_i - q_{N-i}‖₁` over `i ∈ [0, N/2]`, and its arg-max.
    pub q_norm: f64,
    pub q_index: usize,
    /// `max_i ‖p_i + p_{N-i}‖₁` over `i ∈ [0, N/2]`, and its arg-max.
    pub p_norm: f64,
    pub p_index: usize,
}

pub fn symmetry_residuals(traj: &Trajectory) -> SymmetryResiduals {
    let n = traj.len() - 1;
    let mut out = SymmetryResiduals {
        q_norm: f64::NEG_INFINITY,
        q_index: 0,
        p_norm: f64::NEG_INFINITY,
        p_index: 0,
    };
    for i in 0..=n / 2 {
        let dq = (traj.q(i) - traj.q(n - i)).lp_norm(1);
        let sp = (traj.p(i) + traj.p(n - i)).lp_norm(1);
        if dq > out.q_norm {
            out.q_norm = dq;
            out.q_index = i;
        }
        if sp > out.p_norm {
            out.p_norm = sp;
            out.p_index = i;
        }
    }
    out
}

pub fn loss_eigen(traj: &Trajectory, weights: &LossWeights) -> Result<LossEval> {
    check_grid(traj)?;
    let n = traj.grid.steps();
    let mid = traj.grid.mid_index();
    let mut cot = TrajectoryCotangent::zeros(n + 1);
    let res = symmetry_residuals(traj);

    let i = res.q_index;
    let dq = traj.q(i) - traj.q(n - i);
    for c in 0..2 {
        let g = weights.lambda1 * sign(dq[c]);
        cot.states[i][c] += g;
        cot.states[n - i][c] -= g;
    }
    let i = res.p_index;
    let sp = traj.p(i) + traj.p(n - i);
    for c in 0..2 {
        let g = weights.lambda1 * weights.alpha1 * sign(sp[c]);
        cot.states[i][2 + c] += g;
        cot.states[n - i][2 + c] += g;
    }
    let p_mid = traj.p(mid);
    cot.states[mid] += Vector4::new(0.0, 0.0, p_mid[0], p_mid[1]) * weights.lambda2;

    let value =
        weights.lambda1 * (res.q_norm + weights.alpha1 * res.p_norm) + 0.5 * weights.lambda2 * p_mid.norm_squared();
    Ok(LossEval { value, cotangent: cot })
}

/// `L_task + β·L_eigen`.
pub fn loss_total(
    params: &PendulumParams,
    traj: &Trajectory,
    spec: &TaskSpec,
    weights: &LossWeights,
) -> Result<TotalLoss> {
    let task = loss_task(params, traj, spec, weights)?;
    let eigen = loss_eigen(traj, weights)?;
    let mut cotangent = eigen.cotangent;
    cotangent.scale(weights.beta);
    cotangent.add_assign(&task.cotangent);
    Ok(TotalLoss {
        value: task.value + weights.beta * eigen.value,
        task: task.value,
        eigen: eigen.value,
        effort: task.effort,
        task_error: task.task_error,
        cotangent,
    })
}

/// Thresholds for [`certify_eigenmode`], in trajectory units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CertifyTolerances {
    /// Bound on `‖p(T/2)‖₂` and on the momentum symmetry norm.
    pub tol_p: f64,
    /// Bound on `‖q(T) - q(0)‖₂` and on the configuration symmetry norm.
    pub tol_q: f64,
    /// Bound on the retrace deviation of the configuration path.
    pub tol_line: f64,
}

impl Default for CertifyTolerances {
    fn default() -> Self {
        CertifyTolerances {
            tol_p: 1e-2,
            tol_q: 1e-2,
            tol_line: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub periodic: bool,
    pub symmetric: bool,
    pub line_shaped: bool,
    pub is_eigenmode: bool,
    pub midpoint_momentum: f64,
    pub closure_error: f64,
    pub q_symmetry: f64,
    pub p_symmetry: f64,
    pub retrace_error: f64,
    pub self_intersections: usize,
}

/// Checks the eigenmode conditions on a trajectory sampled over one period from rest.
///
/// Line-shapedness is tested as: the outbound half `q_0..q_{N/2}` is a simple arc
/// (no proper crossings between non-adjacent segments) and the return half retraces
/// it (`max_i ‖q_i - q_{N-i}‖₂ < tol_line`). Together these make the image of the
/// configuration curve an arc, i.e. homeomorphic to a closed interval.
pub fn certify_eigenmode(traj: &Trajectory, tol: &CertifyTolerances) -> CertificationReport {
    let n = traj.len() - 1;
    let mid = n / 2;
    let midpoint_momentum = traj.p(mid).norm();
    let closure_error = (traj.q(n) - traj.q(0)).norm();
    let periodic = midpoint_momentum < tol.tol_p && closure_error < tol.tol_q;

    let res = symmetry_residuals(traj);
    let symmetric = res.q_norm < tol.tol_q && res.p_norm < tol.tol_p;

    let retrace_error = (0..=mid)
        .map(|i| (traj.q(i) - traj.q(n - i)).norm())
        .fold(0.0, f64::max);
    let outbound: Vec<Vector2<f64>> = (0..=mid).map(|i| traj.q(i)).collect();
    let self_intersections = count_proper_crossings(&outbound);
    let line_shaped = retrace_error < tol.tol_line && self_intersections == 0;

    CertificationReport {
        periodic,
        symmetric,
        line_shaped,
        is_eigenmode: periodic && symmetric && line_shaped,
        midpoint_momentum,
        closure_error,
        q_symmetry: res.q_norm,
        p_symmetry: res.p_norm,
        retrace_error,
        self_intersections,
    }
}

fn cross(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Number of proper crossings between non-adjacent segments of a polyline.
/// Collinear overlaps and touching endpoints are not counted.
fn count_proper_crossings(path: &[Vector2<f64>]) -> usize {
    let segs: Vec<(Vector2<f64>, Vector2<f64>)> = path
        .windows(2)
        .map(|w| (w[0], w[1]))
        .filter(|(a, b)| (b - a).norm() > 1e-14)
        .collect();
    let mut count = 0;
    for i in 0..segs.len() {
        for j in i + 2..segs.len() {
            let (a, b) = segs[i];
            let (c, d) = segs[j];
            let d1 = cross(&(b - a), &(c - a));
            let d2 = cross(&(b - a), &(d - a));
            let d3 = cross(&(d - c), &(a - c));
            let d4 = cross(&(d - c), &(b - c));
            if d1 * d2 < 0.0 && d3 * d4 < 0.0 {
                count += 1;
            }
        }
    }
    count
}
