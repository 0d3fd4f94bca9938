//! Closed-form double-pendulum mechanics in Hamiltonian coordinates.
//!
//! Both links have point mass `m` at the tip and length `d`. Angles are measured
//! from the downward vertical, `q2` is relative to link 1, and the spring at
//! joint 2 rests at `q2 = π/2`. Configuration space is treated as ℝ² (no
//! angle wrapping).
//!
//! The kinetic energy is `K = ½ pᵀ M⁻¹(q) p`, so `q̇ = M⁻¹(q) p`.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Phase-space point packed as `(q1, q2, p1, p2)`.
pub type Phase = Vector4<f64>;

/// Phase-space point `(q, p)` of an n-DoF system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl State {
    pub fn new(q: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        if q.is_empty() || q.len() != p.len() {
            return Err(Error::ShapeMismatch(format!(
                "q has length {}, p has length {}",
                q.len(),
                p.len()
            )));
        }
        if q.iter().chain(p.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("state entries must be finite".into()));
        }
        Ok(State { q, p })
    }

    /// Rest state `(q, 0)`.
    pub fn at_rest(q: [f64; 2]) -> Self {
        State {
            q: q.to_vec(),
            p: vec![0.0; 2],
        }
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    pub fn from_phase(x: &Phase) -> Self {
        State {
            q: vec![x[0], x[1]],
            p: vec![x[2], x[3]],
        }
    }

    /// Packs a two-DoF state. Panics if the state is not two-dimensional.
    pub fn phase(&self) -> Phase {
        assert_eq!(self.dof(), 2, "double-pendulum state must have n = 2");
        Vector4::new(self.q[0], self.q[1], self.p[0], self.p[1])
    }

    pub fn q2(&self) -> Vector2<f64> {
        Vector2::new(self.q[0], self.q[1])
    }

    pub fn p2(&self) -> Vector2<f64> {
        Vector2::new(self.p[0], self.p[1])
    }
}

/// Physical constants of the double pendulum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PendulumParams {
    /// Link point mass, kg.
    pub m: f64,
    /// Link length, m.
    pub d: f64,
    /// Gravity, m/s².
    pub g: f64,
    /// Joint-2 spring stiffness, N·m/rad.
    pub k: f64,
    /// Viscous joint damping, N·m·s/rad. Enters as `-b M⁻¹(q) p`.
    pub b: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            m: 1.0,
            d: 1.0,
            g: 9.81,
            k: 0.5,
            b: 0.0,
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.m, self.d, self.g, self.k, self.b];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("pendulum constants must be finite".into()));
        }
        if self.m <= 0.0 || self.d <= 0.0 {
            return Err(Error::InvalidParameter("m and d must be positive".into()));
        }
        if self.g < 0.0 || self.k < 0.0 || self.b < 0.0 {
            return Err(Error::InvalidParameter("g, k and b must be non-negative".into()));
        }
        Ok(())
    }

    fn inertia_scale(&self) -> f64 {
        self.m * self.d * self.d
    }

    fn gravity_scale(&self) -> f64 {
        self.m * self.d * self.g
    }
}

/// Time derivative of a state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VectorField {
    pub dq: Vector2<f64>,
    pub dp: Vector2<f64>,
}

impl VectorField {
    pub fn phase(&self) -> Phase {
        Vector4::new(self.dq[0], self.dq[1], self.dp[0], self.dp[1])
    }
}

pub fn mass_matrix(params: &PendulumParams, q: &Vector2<f64>) -> Matrix2<f64> {
    let c = q[1].cos();
    params.inertia_scale() * Matrix2::new(3.0 + 2.0 * c, 1.0 + c, 1.0 + c, 1.0)
}

pub fn mass_matrix_inverse(params: &PendulumParams, q: &Vector2<f64>) -> Matrix2<f64> {
    inverse_mass_derivatives(params, q[1]).value
}

/// `M⁻¹` and its first two derivatives with respect to `q2` (the only angle it depends on).
#[derive(Debug, Clone, Copy)]
pub(crate) struct InverseMass {
    pub value: Matrix2<f64>,
    pub d1: Matrix2<f64>,
    pub d2: Matrix2<f64>,
}

pub(crate) fn inverse_mass_derivatives(params: &PendulumParams, q2: f64) -> InverseMass {
    // M⁻¹ = A(c) / (m d² s(c)), with c = cos q2 and s = 2 - c² = 1 + sin² q2.
    let (sn, c) = q2.sin_cos();
    let scale = 1.0 / params.inertia_scale();
    let s = 2.0 - c * c;
    let ds = -2.0 * c;
    let dds = -2.0;
    let a = Matrix2::new(1.0, -(1.0 + c), -(1.0 + c), 3.0 + 2.0 * c);
    let da = Matrix2::new(0.0, -1.0, -1.0, 2.0);

    let f = a / s;
    let f_c = da / s - a * (ds / (s * s));
    let f_cc = -da * (2.0 * ds / (s * s)) - a * (dds / (s * s)) + a * (2.0 * ds * ds / (s * s * s));

    // dc/dq2 = -sin q2, d²c/dq2² = -cos q2
    InverseMass {
        value: f * scale,
        d1: f_c * (-sn * scale),
        d2: (f_cc * (sn * sn) - f_c * c) * scale,
    }
}

pub fn gravity_potential(params: &PendulumParams, q: &Vector2<f64>) -> f64 {
    -params.gravity_scale() * (2.0 * q[0].cos() + (q[0] + q[1]).cos())
}

pub fn spring_potential(params: &PendulumParams, q: &Vector2<f64>) -> f64 {
    let dq = q[1] - FRAC_PI_2;
    params.k * dq * dq
}

/// Gravity plus joint-2 spring potential.
pub fn open_loop_potential(params: &PendulumParams, q: &Vector2<f64>) -> f64 {
    gravity_potential(params, q) + spring_potential(params, q)
}

pub fn open_loop_potential_gradient(params: &PendulumParams, q: &Vector2<f64>) -> Vector2<f64> {
    let mdg = params.gravity_scale();
    let s12 = (q[0] + q[1]).sin();
    Vector2::new(
        mdg * (2.0 * q[0].sin() + s12),
        mdg * s12 + 2.0 * params.k * (q[1] - FRAC_PI_2),
    )
}

pub fn open_loop_potential_hessian(params: &PendulumParams, q: &Vector2<f64>) -> Matrix2<f64> {
    let mdg = params.gravity_scale();
    let c12 = (q[0] + q[1]).cos();
    Matrix2::new(
        mdg * (2.0 * q[0].cos() + c12),
        mdg * c12,
        mdg * c12,
        mdg * c12 + 2.0 * params.k,
    )
}

pub fn kinetic_energy(params: &PendulumParams, q: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    0.5 * p.dot(&(mass_matrix_inverse(params, q) * p))
}

/// `∂K/∂q`; only the `q2` component is non-zero.
pub fn kinetic_gradient(params: &PendulumParams, q: &Vector2<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let inv = inverse_mass_derivatives(params, q[1]);
    Vector2::new(0.0, 0.5 * p.dot(&(inv.d1 * p)))
}

/// `H = K + V_gravity + V_spring + v_theta`, where `v_theta` is the learned
/// potential evaluated at the same configuration.
pub fn hamiltonian(params: &PendulumParams, state: &State, v_theta: f64) -> f64 {
    let q = state.q2();
    let p = state.p2();
    kinetic_energy(params, &q, &p) + open_loop_potential(params, &q) + v_theta
}

/// Hamiltonian vector field with an additive generalized force `u` on `ṗ`.
///
/// The learned potential is not part of this field; callers fold `-∇V_θ` into `u`.
pub fn vector_field(params: &PendulumParams, state: &State, u: &Vector2<f64>) -> VectorField {
    field_at(params, &state.q2(), &state.p2(), u)
}

pub(crate) fn field_at(params: &PendulumParams, q: &Vector2<f64>, p: &Vector2<f64>, u: &Vector2<f64>) -> VectorField {
    let inv = inverse_mass_derivatives(params, q[1]);
    let qdot = inv.value * p;
    let dk = Vector2::new(0.0, 0.5 * p.dot(&(inv.d1 * p)));
    let dp = -dk - open_loop_potential_gradient(params, q) - qdot * params.b + u;
    VectorField { dq: qdot, dp }
}

/// Jacobian of the unforced field with respect to `(q, p)`.
pub(crate) fn field_jacobian(params: &PendulumParams, q: &Vector2<f64>, p: &Vector2<f64>) -> Matrix4<f64> {
    let inv = inverse_mass_derivatives(params, q[1]);
    let d1p = inv.d1 * p;
    let hv = open_loop_potential_hessian(params, q);
    let mut jac = Matrix4::zeros();

    // q̇ = M⁻¹ p
    jac[(0, 1)] = d1p[0];
    jac[(1, 1)] = d1p[1];
    jac.fixed_view_mut::<2, 2>(0, 2).copy_from(&inv.value);

    // ṗ = -∂K/∂q - ∇V - b M⁻¹ p
    let mut dpq = -hv;
    dpq[(1, 1)] -= 0.5 * p.dot(&(inv.d2 * p));
    dpq[(0, 1)] -= params.b * d1p[0];
    dpq[(1, 1)] -= params.b * d1p[1];
    jac.fixed_view_mut::<2, 2>(2, 0).copy_from(&dpq);

    let mut dpp = -inv.value * params.b;
    dpp[(1, 0)] -= d1p[0];
    dpp[(1, 1)] -= d1p[1];
    jac.fixed_view_mut::<2, 2>(2, 2).copy_from(&dpp);
    jac
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn unit() -> PendulumParams {
        PendulumParams {
            m: 1.0,
            d: 1.0,
            g: 1.0,
            k: 0.5,
            b: 0.0,
        }
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn mass_matrix_known_values() {
        let p = unit();
        let m0 = mass_matrix(&p, &Vector2::new(0.0, 0.0));
        assert_eq!(m0, Matrix2::new(5.0, 2.0, 2.0, 1.0));
        let mpi = mass_matrix(&p, &Vector2::new(0.0, PI));
        assert!((mpi - Matrix2::identity()).norm() < 1e-15);
    }

    #[test]
    fn mass_matrix_determinant() {
        let p = unit();
        let q = Vector2::new(0.3, 0.7);
        let det = mass_matrix(&p, &q).determinant();
        assert!(close(det, 1.0 + 0.7f64.sin().powi(2), 1e-14));
    }

    #[test]
    fn inverse_known_values() {
        let p = unit();
        let inv0 = mass_matrix_inverse(&p, &Vector2::new(0.0, 0.0));
        assert!((inv0 - Matrix2::new(1.0, -2.0, -2.0, 5.0)).norm() < 1e-14);
        let invpi = mass_matrix_inverse(&p, &Vector2::new(0.0, PI));
        assert!((invpi - Matrix2::identity()).norm() < 1e-14);
    }

    #[test]
    fn inverse_mass_derivatives_match_finite_differences() {
        let p = PendulumParams {
            m: 1.7,
            d: 0.8,
            ..unit()
        };
        for &q2 in &[-2.9, -1.0, 0.0, 0.4, 1.3, 2.5] {
            let h = 1e-5;
            let a = inverse_mass_derivatives(&p, q2);
            let plus = inverse_mass_derivatives(&p, q2 + h);
            let minus = inverse_mass_derivatives(&p, q2 - h);
            let fd1 = (plus.value - minus.value) / (2.0 * h);
            let fd2 = (plus.d1 - minus.d1) / (2.0 * h);
            assert!((fd1 - a.d1).norm() < 1e-8, "q2={q2}");
            assert!((fd2 - a.d2).norm() < 1e-7, "q2={q2}");
        }
    }

    #[test]
    fn potential_known_values() {
        let p = unit();
        let v = open_loop_potential(&p, &Vector2::new(0.0, 0.0));
        assert!(close(v, -3.0 + 0.5 * FRAC_PI_2 * FRAC_PI_2, 1e-15));
        let q = Vector2::new(0.4, FRAC_PI_2);
        assert_eq!(spring_potential(&PendulumParams { k: 123.0, ..p }, &q), 0.0);
    }

    #[test]
    fn hamiltonian_at_rest_is_potential() {
        let p = PendulumParams::default();
        let s = State::at_rest([0.3, -0.2]);
        let h = hamiltonian(&p, &s, 0.25);
        assert!(close(h, open_loop_potential(&p, &s.q2()) + 0.25, 1e-15));
    }

    #[test]
    fn kinetic_energy_is_quadratic_in_momentum() {
        let p = PendulumParams::default();
        let q = Vector2::new(0.1, 1.2);
        let mom = Vector2::new(0.7, -1.1);
        let k1 = kinetic_energy(&p, &q, &mom);
        let k2 = kinetic_energy(&p, &q, &(mom * 2.0));
        assert!(close(k2, 4.0 * k1, 1e-14));
    }

    #[test]
    fn external_force_is_additive() {
        let p = PendulumParams::default();
        let s = State::new(vec![0.2, 0.9], vec![0.4, -0.3]).unwrap();
        let f0 = vector_field(&p, &s, &Vector2::zeros());
        let f1 = vector_field(&p, &s, &Vector2::new(1.0, 0.0));
        assert_eq!(f1.dq, f0.dq);
        assert!((f1.dp - f0.dp - Vector2::new(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn equilibrium_has_zero_field() {
        // With no spring, hanging straight down is a critical point.
        let p = PendulumParams {
            k: 0.0,
            ..PendulumParams::default()
        };
        let s = State::at_rest([0.0, 0.0]);
        let f = vector_field(&p, &s, &Vector2::zeros());
        assert!(f.dq.norm() == 0.0 && f.dp.norm() < 1e-15);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let p = PendulumParams {
            b: 0.3,
            ..PendulumParams::default()
        };
        let x = Vector4::new(0.3, -1.1, 0.8, -0.4);
        let jac = field_jacobian(&p, &x.fixed_rows::<2>(0).into(), &x.fixed_rows::<2>(2).into());
        let h = 1e-6;
        for j in 0..4 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let fp = field_at(
                &p,
                &xp.fixed_rows::<2>(0).into(),
                &xp.fixed_rows::<2>(2).into(),
                &Vector2::zeros(),
            );
            let fm = field_at(
                &p,
                &xm.fixed_rows::<2>(0).into(),
                &xm.fixed_rows::<2>(2).into(),
                &Vector2::zeros(),
            );
            let col = (fp.phase() - fm.phase()) / (2.0 * h);
            assert!((col - jac.column(j)).norm() < 1e-7, "column {j}");
        }
    }

    #[test]
    fn state_shape_is_checked() {
        assert!(State::new(vec![0.0, 1.0], vec![0.0]).is_err());
        assert!(State::new(vec![], vec![]).is_err());
        assert!(State::new(vec![f64::NAN], vec![0.0]).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(PendulumParams::default().validate().is_ok());
        assert!(PendulumParams {
            m: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(PendulumParams {
            b: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
