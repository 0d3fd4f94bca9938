//! Mode-stabilizing feedback `u_s = u_E + u_M - b·M⁻¹p` around a learned eigenmode,
//! closed-loop simulation, and cycle multipliers.
//!
//! The reference lookup first finds the nearest stored sample, then refines the
//! reference time on a cubic Hermite interpolant of the two adjacent segments, so
//! the feedback vanishes on the mode up to interpolation error rather than up to
//! the sample spacing.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::dynamics::{mass_matrix_inverse, PendulumParams, Phase, State};
use crate::error::{Error, Result};
use crate::integrator::{
    rk4_step, rollout, rollout_controlled, total_energy, ClosedLoop, Feedback, PhaseField, TimeGrid, Trajectory,
};
use crate::potential::PotentialNet;

/// Below this value of `pᵀM⁻¹p` the normalized momentum is taken as zero.
pub const MOMENTUM_THRESHOLD: f64 = 1e-10;

/// Multiplier components whose denominator falls below this are undefined.
pub const DEGENERATE_THRESHOLD: f64 = 1e-3;

pub const METRICS_HEADER: &str = "t,E_err,q_dist,p_dist,q1,q2,p1,p2,u1,u2";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceSample {
    pub t: f64,
    pub q: Vector2<f64>,
    pub p: Vector2<f64>,
    pub qdot: Vector2<f64>,
    pub pdot: Vector2<f64>,
}

/// One period of a learned mode, sampled uniformly at `t_j = j·T/M`, `j < M`.
#[derive(Debug, Clone)]
pub struct ReferenceMode {
    samples: Vec<ReferenceSample>,
    e_bar: f64,
    period: f64,
    spacing: f64,
    /// Whether the last sample connects back to the first.
    closed: bool,
}

impl ReferenceMode {
    /// Samples the autonomous closed loop from rest at `q0` with `samples` RK4 steps per period.
    pub fn from_rollout(
        params: &PendulumParams,
        net: &PotentialNet,
        q0: [f64; 2],
        period: f64,
        samples: usize,
    ) -> Result<Self> {
        let traj = rollout(params, net, q0, TimeGrid::new(period, samples)?)?;
        Self::from_trajectory(params, net, &traj)
    }

    /// Uses every node of a one-period trajectory except the last, which closes the loop.
    pub fn from_trajectory(params: &PendulumParams, net: &PotentialNet, traj: &Trajectory) -> Result<Self> {
        let field = ClosedLoop::autonomous(params, net);
        let grid = traj.grid;
        let samples: Vec<ReferenceSample> = traj.states[..traj.len() - 1]
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let d = field.eval(&s.phase());
                ReferenceSample {
                    t: grid.time(j),
                    q: s.q2(),
                    p: s.p2(),
                    qdot: Vector2::new(d[0], d[1]),
                    pdot: Vector2::new(d[2], d[3]),
                }
            })
            .collect();
        if samples.len() < 2 {
            return Err(Error::InvalidParameter(
                "reference mode needs at least two samples".into(),
            ));
        }
        Ok(ReferenceMode {
            e_bar: traj.energies[0],
            spacing: grid.period() / samples.len() as f64,
            samples,
            period: grid.period(),
            closed: true,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[ReferenceSample] {
        &self.samples
    }

    pub fn e_bar(&self) -> f64 {
        self.e_bar
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn state(&self, index: usize) -> State {
        let s = &self.samples[index];
        State::from_phase(&nalgebra::Vector4::new(s.q[0], s.q[1], s.p[0], s.p[1]))
    }

    /// Hermite interpolant on segment `j → j+1` (wrapping) at `s ∈ [0, 1]`:
    /// returns `(q, p, dq/ds)`.
    fn interpolate(&self, j: usize, s: f64) -> (Vector2<f64>, Vector2<f64>, Vector2<f64>) {
        let a = &self.samples[j];
        let b = &self.samples[(j + 1) % self.samples.len()];
        let h = self.spacing;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let d00 = 6.0 * s2 - 6.0 * s;
        let d10 = 3.0 * s2 - 4.0 * s + 1.0;
        let d01 = -d00;
        let d11 = 3.0 * s2 - 2.0 * s;
        let q = a.q * h00 + a.qdot * (h * h10) + b.q * h01 + b.qdot * (h * h11);
        let p = a.p * h00 + a.pdot * (h * h10) + b.p * h01 + b.pdot * (h * h11);
        let dq = a.q * d00 + a.qdot * (h * d10) + b.q * d01 + b.qdot * (h * d11);
        (q, p, dq)
    }
}

/// Reference time and state matched to a configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferencePoint {
    pub index: usize,
    pub t_bar: f64,
    pub q_bar: Vector2<f64>,
    pub p_bar: Vector2<f64>,
}

/// Stored sample closest to `q` in the Euclidean norm; ties go to the lowest index.
pub fn nearest_reference(mode: &ReferenceMode, q: &Vector2<f64>) -> ReferencePoint {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (j, s) in mode.samples.iter().enumerate() {
        let d = (s.q - q).norm_squared();
        if d < best_dist {
            best = j;
            best_dist = d;
        }
    }
    let s = &mode.samples[best];
    ReferencePoint {
        index: best,
        t_bar: s.t,
        q_bar: s.q,
        p_bar: s.p,
    }
}

/// [`nearest_reference`] refined to the closest point of the interpolated curve on
/// the two segments adjacent to the nearest sample.
pub fn project_reference(mode: &ReferenceMode, q: &Vector2<f64>) -> ReferencePoint {
    let nearest = nearest_reference(mode, q);
    let segments = adjacent_segments(mode, nearest.index);
    let mut best = nearest;
    let mut best_dist = (nearest.q_bar - q).norm_squared();
    for seg in segments {
        // start mid-segment: at a rest sample the endpoint derivative is exactly zero
        let mut s: f64 = 0.5;
        for _ in 0..20 {
            let (qs, _, dq) = mode.interpolate(seg, s);
            let jj = dq.norm_squared();
            if jj < 1e-300 {
                break;
            }
            let next = (s - (qs - q).dot(&dq) / jj).clamp(0.0, 1.0);
            let done = (next - s).abs() < 1e-15;
            s = next;
            if done {
                break;
            }
        }
        let (qs, ps, _) = mode.interpolate(seg, s);
        let dist = (qs - q).norm_squared();
        if dist < best_dist {
            best_dist = dist;
            best = ReferencePoint {
                index: seg,
                t_bar: mode.samples[seg].t + s * mode.spacing,
                q_bar: qs,
                p_bar: ps,
            };
        }
    }
    best
}

/// Segments adjacent to sample `i`.
fn adjacent_segments(mode: &ReferenceMode, i: usize) -> Vec<usize> {
    let m = mode.len();
    let mut segments = Vec::with_capacity(2);
    if i > 0 || mode.closed {
        segments.push((i + m - 1) % m);
    }
    if i + 1 < m || mode.closed {
        segments.push(i);
    }
    segments
}

/// `sign(pᵀM⁻¹(q)p̄)`, with 0 exactly at 0.
pub fn momentum_sign(params: &PendulumParams, q: &Vector2<f64>, p: &Vector2<f64>, p_bar: &Vector2<f64>) -> f64 {
    let s = p.dot(&(mass_matrix_inverse(params, q) * p_bar));
    if s > 0.0 {
        1.0
    } else if s < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `α_E(Ē − E)·p/√(pᵀM⁻¹p)`, zero when `pᵀM⁻¹p` is below [`MOMENTUM_THRESHOLD`].
pub fn energy_feedback(
    params: &PendulumParams,
    net: &PotentialNet,
    state: &State,
    e_bar: f64,
    alpha_e: f64,
) -> Vector2<f64> {
    let q = state.q2();
    let p = state.p2();
    let norm2 = p.dot(&(mass_matrix_inverse(params, &q) * p));
    if norm2 < MOMENTUM_THRESHOLD {
        return Vector2::zeros();
    }
    let e = total_energy(params, net, state);
    p * (alpha_e * (e_bar - e) / norm2.sqrt())
}

/// Projection of `x` onto the `M⁻¹`-orthogonal complement of `p`: `x − (pᵀM⁻¹x / pᵀM⁻¹p)·p`.
pub fn project_momentum(params: &PendulumParams, q: &Vector2<f64>, p: &Vector2<f64>, x: &Vector2<f64>) -> Vector2<f64> {
    let minv = mass_matrix_inverse(params, q);
    let norm2 = p.dot(&(minv * p));
    if norm2 < MOMENTUM_THRESHOLD {
        return Vector2::zeros();
    }
    x - p * (p.dot(&(minv * x)) / norm2)
}

/// `α_M·π_p(σp̄)`; injects no power since `u_Mᵀq̇ = 0`.
pub fn mode_feedback(
    params: &PendulumParams,
    state: &State,
    p_bar: &Vector2<f64>,
    sigma: f64,
    alpha_m: f64,
) -> Vector2<f64> {
    project_momentum(params, &state.q2(), &state.p2(), &(p_bar * sigma)) * alpha_m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerGains {
    pub alpha_e: f64,
    pub alpha_m: f64,
    /// Velocity damping `−b·M⁻¹p` added to the feedback.
    pub b: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        ControllerGains {
            alpha_e: 1.0,
            alpha_m: 10.0,
            b: 0.0,
        }
    }
}

impl ControllerGains {
    pub fn zero() -> Self {
        ControllerGains {
            alpha_e: 0.0,
            alpha_m: 0.0,
            b: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha_e", self.alpha_e), ("alpha_m", self.alpha_m), ("b", self.b)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// `u_s = u_E + u_M − b·M⁻¹p` with `t̄` and `σ` resolved from the state.
pub fn stabilizing_feedback(
    params: &PendulumParams,
    net: &PotentialNet,
    mode: &ReferenceMode,
    state: &State,
    gains: &ControllerGains,
) -> Vector2<f64> {
    let q = state.q2();
    let p = state.p2();
    let reference = project_reference(mode, &q);
    let sigma = momentum_sign(params, &q, &p, &reference.p_bar);
    let u_e = energy_feedback(params, net, state, mode.e_bar, gains.alpha_e);
    let u_m = mode_feedback(params, state, &reference.p_bar, sigma, gains.alpha_m);
    u_e + u_m - mass_matrix_inverse(params, &q) * p * gains.b
}

/// [`stabilizing_feedback`] as a [`Feedback`] for the integrator.
pub struct Stabilizer<'a> {
    pub params: &'a PendulumParams,
    pub net: &'a PotentialNet,
    pub mode: &'a ReferenceMode,
    pub gains: ControllerGains,
}

impl Feedback for Stabilizer<'_> {
    fn force(&self, q: &Vector2<f64>, p: &Vector2<f64>) -> Vector2<f64> {
        let state = State::from_phase(&nalgebra::Vector4::new(q[0], q[1], p[0], p[1]));
        stabilizing_feedback(self.params, self.net, self.mode, &state, &self.gains)
    }
}

/// Tracking errors of one state relative to the mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModeError {
    pub e_err: f64,
    pub q_dist: f64,
    /// `‖p − σp̄(t̄)‖`.
    pub p_dist: f64,
}

impl ModeError {
    /// Phase-space distance `√(q_dist² + p_dist²)`.
    pub fn phase_distance(&self) -> f64 {
        self.q_dist.hypot(self.p_dist)
    }
}

pub fn mode_error(params: &PendulumParams, net: &PotentialNet, mode: &ReferenceMode, state: &State) -> ModeError {
    let q = state.q2();
    let p = state.p2();
    let reference = project_reference(mode, &q);
    let sigma = momentum_sign(params, &q, &p, &reference.p_bar);
    ModeError {
        e_err: (total_energy(params, net, state) - mode.e_bar).abs(),
        q_dist: (q - reference.q_bar).norm(),
        p_dist: (p - reference.p_bar * sigma).norm(),
    }
}

#[derive(Debug, Clone)]
pub struct ClosedLoopRun {
    pub trajectory: Trajectory,
    pub errors: Vec<ModeError>,
    /// Stabilizing feedback at each node.
    pub feedback: Vec<Vector2<f64>>,
}

impl ClosedLoopRun {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.errors.len() * 120);
        out.push_str(METRICS_HEADER);
        out.push('\n');
        for (i, (e, u)) in self.errors.iter().zip(&self.feedback).enumerate() {
            let s = &self.trajectory.states[i];
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                self.trajectory.grid.time(i),
                e.e_err,
                e.q_dist,
                e.p_dist,
                s.q[0],
                s.q[1],
                s.p[0],
                s.p[1],
                u[0],
                u[1]
            ));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Simulates the stabilized closed loop for `periods` reference periods at step `dt`.
pub fn simulate_closed_loop(
    params: &PendulumParams,
    net: &PotentialNet,
    mode: &ReferenceMode,
    state0: &State,
    gains: &ControllerGains,
    periods: usize,
    dt: f64,
) -> Result<ClosedLoopRun> {
    gains.validate()?;
    if periods == 0 {
        return Err(Error::InvalidParameter("need at least one period".into()));
    }
    let controller = Stabilizer {
        params,
        net,
        mode,
        gains: *gains,
    };
    let trajectory = rollout_controlled(params, net, state0, mode.period * periods as f64, dt, controller)?;
    let errors = trajectory
        .states
        .iter()
        .map(|s| mode_error(params, net, mode, s))
        .collect();
    let feedback = trajectory
        .states
        .iter()
        .map(|s| stabilizing_feedback(params, net, mode, s, gains))
        .collect();
    Ok(ClosedLoopRun {
        trajectory,
        errors,
        feedback,
    })
}

/// Integrates the stabilized closed loop for `steps` RK4 steps of size `h`
/// (negative `h` runs backward), returning every node.
fn flow(
    params: &PendulumParams,
    net: &PotentialNet,
    mode: &ReferenceMode,
    gains: &ControllerGains,
    x: &Phase,
    steps: usize,
    h: f64,
) -> Result<Vec<Phase>> {
    let field = stabilized_field(params, net, mode, gains);
    let mut nodes = Vec::with_capacity(steps + 1);
    let mut phase = *x;
    nodes.push(phase);
    for step in 0..steps {
        phase = rk4_step(&field, &phase, h);
        if phase.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: step + 1 });
        }
        nodes.push(phase);
    }
    Ok(nodes)
}

fn stabilized_field<'a>(
    params: &'a PendulumParams,
    net: &'a PotentialNet,
    mode: &'a ReferenceMode,
    gains: &ControllerGains,
) -> ClosedLoop<'a, Stabilizer<'a>> {
    ClosedLoop {
        params,
        net,
        feedback: Stabilizer {
            params,
            net,
            mode,
            gains: *gains,
        },
    }
}

/// Settles onto the stabilized orbit by simulating `periods` periods from the
/// reference start, then returns the last-period state closest in configuration
/// to reference sample `index`.
pub fn converged_start(
    params: &PendulumParams,
    net: &PotentialNet,
    mode: &ReferenceMode,
    gains: &ControllerGains,
    periods: usize,
    index: usize,
    dt: f64,
) -> Result<State> {
    let run = simulate_closed_loop(params, net, mode, &mode.state(0), gains, periods, dt)?;
    let target = mode.samples[index].q;
    let states = &run.trajectory.states;
    let last_period = states.len() - states.len() / periods;
    let best = states[last_period..]
        .iter()
        .min_by(|a, b| {
            let da = (a.q2() - target).norm_squared();
            let db = (b.q2() - target).norm_squared();
            da.total_cmp(&db)
        })
        .cloned()
        .unwrap_or_else(|| mode.state(index));
    Ok(best)
}

const TRACE_PERIODS: usize = 6;

pub const COMPONENT_NAMES: [&str; 4] = ["q1", "q2", "p1", "p2"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleMultiplier {
    pub component: String,
    pub numerator: f64,
    pub denominator: f64,
    pub ratio: Option<f64>,
    pub defined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplierReport {
    pub period: f64,
    pub fd_step: f64,
    pub multipliers: Vec<CycleMultiplier>,
}

impl MultiplierReport {
    /// Largest defined `|ratio|`, if any component is defined.
    pub fn max_abs(&self) -> Option<f64> {
        self.multipliers
            .iter()
            .filter_map(|m| m.ratio)
            .map(f64::abs)
            .reduce(f64::max)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{text}").map_err(|e| Error::io(path, e))
    }
}

/// The stabilized orbit through `x0`, traced from a quarter period before it to
/// a quarter period past `Ψ_T(x0)`. Used as the distance reference for multipliers.
pub fn traced_orbit(
    params: &PendulumParams,
    net: &PotentialNet,
    mode: &ReferenceMode,
    gains: &ControllerGains,
    x0: &State,
    dt: f64,
) -> Result<ReferenceMode> {
    let grid = TimeGrid::covering(mode.period, dt)?;
    let h = grid.dt();
    let lead = grid.steps() / 4;
    let back = flow(params, net, mode, gains, &x0.phase(), lead, -h)?;
    let nodes = flow(
        params,
        net,
        mode,
        gains,
        &back[lead],
        TRACE_PERIODS * grid.steps() + 2 * lead,
        h,
    )?;
    let field = stabilized_field(params, net, mode, gains);
    let samples = nodes
        .iter()
        .enumerate()
        .map(|(j, x)| {
            let d = field.eval(x);
            ReferenceSample {
                t: (j as f64 - lead as f64) * h,
                q: Vector2::new(x[0], x[1]),
                p: Vector2::new(x[2], x[3]),
                qdot: Vector2::new(d[0], d[1]),
                pdot: Vector2::new(d[2], d[3]),
            }
        })
        .collect();
    Ok(ReferenceMode {
        samples,
        e_bar: mode.e_bar,
        period: mode.period,
        spacing: h,
        closed: false,
    })
}

/// Per-component ratio of how the period map changes the phase-space distance to
/// the stabilized orbit through `x0`.
///
/// The distance is zero on the orbit and grows like `|δ|` away from it, so a plain
/// central difference is `0/0`. Both numerator and denominator use the symmetric
/// slope `(d(x+h) + d(x−h) − 2d(x)) / 2h` instead, which is the directional slope of
/// the distance cone at `x0`. Distances are taken to the orbit actually traced by
/// the controlled system, so a learned mode that closes only approximately does not
/// put a floor under them.
pub fn cycle_multipliers(
    params: &PendulumParams,
    net: &PotentialNet,
    mode: &ReferenceMode,
    gains: &ControllerGains,
    x0: &State,
    fd_step: f64,
    dt: f64,
) -> Result<MultiplierReport> {
    multipliers_over(params, net, mode, gains, x0, fd_step, dt, 1)
}

#[allow(clippy::too_many_arguments)]
pub fn multipliers_over(
    params: &PendulumParams,
    net: &PotentialNet,
    mode: &ReferenceMode,
    gains: &ControllerGains,
    x0: &State,
    fd_step: f64,
    dt: f64,
    periods: usize,
) -> Result<MultiplierReport> {
    gains.validate()?;
    if !(fd_step > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "fd_step must be positive, got {fd_step}"
        )));
    }
    let orbit = traced_orbit(params, net, mode, gains, x0, dt)?;
    let grid = TimeGrid::covering(mode.period, dt)?;
    let distance = |x: &Phase| mode_error(params, net, &orbit, &State::from_phase(x)).phase_distance();
    let period_map = |x: &Phase| -> Result<Phase> {
        let nodes = flow(params, net, mode, gains, x, periods * grid.steps(), grid.dt())?;
        Ok(nodes[periods * grid.steps()])
    };

    let base = x0.phase();
    let d0 = distance(&base);
    let d0_mapped = distance(&period_map(&base)?);

    let mut multipliers = Vec::with_capacity(4);
    for (i, name) in COMPONENT_NAMES.iter().enumerate() {
        let mut plus = base;
        plus[i] += fd_step;
        let mut minus = base;
        minus[i] -= fd_step;

        let denominator = (distance(&plus) + distance(&minus) - 2.0 * d0) / (2.0 * fd_step);
        let numerator =
            (distance(&period_map(&plus)?) + distance(&period_map(&minus)?) - 2.0 * d0_mapped) / (2.0 * fd_step);
        let defined = denominator.abs() >= DEGENERATE_THRESHOLD;
        multipliers.push(CycleMultiplier {
            component: name.to_string(),
            numerator,
            denominator,
            ratio: defined.then(|| numerator / denominator),
            defined,
        });
    }
    Ok(MultiplierReport {
        period: mode.period,
        fd_step,
        multipliers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Small anti-phase mode of the bare pendulum, found by shooting on
    /// `(q2(0), T/2)` so that `p(T/2) = 0`.
    fn exact_mode() -> (PendulumParams, PotentialNet, [f64; 2], f64) {
        let params = PendulumParams::default();
        let net = PotentialNet::zeros(4).unwrap();
        let q1 = 0.05;
        let residual = |z: [f64; 2]| {
            let traj = rollout(&params, &net, [q1, z[0]], TimeGrid::new(z[1], 400).unwrap()).unwrap();
            traj.p(400)
        };
        let mut z = [-0.49, 0.52];
        for _ in 0..20 {
            let r = residual(z);
            if r.norm() < 1e-13 {
                break;
            }
            let eps = 1e-7;
            let mut jac = nalgebra::Matrix2::zeros();
            for k in 0..2 {
                let mut zp = z;
                zp[k] += eps;
                let mut zm = z;
                zm[k] -= eps;
                jac.set_column(k, &((residual(zp) - residual(zm)) / (2.0 * eps)));
            }
            let step = jac.lu().solve(&r).unwrap();
            z[0] -= step[0];
            z[1] -= step[1];
        }
        assert!(residual(z).norm() < 1e-10, "shooting failed");
        (params, net, [q1, z[0]], 2.0 * z[1])
    }

    fn setup() -> (PendulumParams, PotentialNet, ReferenceMode) {
        let (params, net, q0, period) = exact_mode();
        let mode = ReferenceMode::from_rollout(&params, &net, q0, period, 400).unwrap();
        (params, net, mode)
    }

    fn random_state(rng: &mut ChaCha8Rng) -> State {
        State::new(
            vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)],
            vec![rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)],
        )
        .unwrap()
    }

    #[test]
    fn nearest_matches_brute_force() {
        let (_, _, mode) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let q = Vector2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let got = nearest_reference(&mode, &q);
            let dists: Vec<f64> = mode.samples().iter().map(|s| (s.q - q).norm()).collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let first = dists.iter().position(|&d| d == min).unwrap();
            assert_eq!(got.index, first);
        }
    }

    #[test]
    fn nearest_on_sample_and_ties() {
        let (_, _, mode) = setup();
        let s = mode.samples()[37];
        let got = nearest_reference(&mode, &s.q);
        assert_eq!(got.index, 37);
        assert_eq!(got.q_bar, s.q);

        let line = |x: f64| ReferenceSample {
            t: x,
            q: Vector2::new(x, 0.0),
            p: Vector2::new(1.0, 0.0),
            qdot: Vector2::new(1.0, 0.0),
            pdot: Vector2::zeros(),
        };
        let straight = ReferenceMode {
            samples: vec![line(0.0), line(1.0), line(2.0)],
            e_bar: 0.0,
            period: 3.0,
            spacing: 1.0,
            closed: false,
        };
        let got = nearest_reference(&straight, &Vector2::new(0.5, 0.25));
        assert_eq!(got.index, 0);
        let got = nearest_reference(&straight, &Vector2::new(1.5, -1.0));
        assert_eq!(got.index, 1);
    }

    #[test]
    fn projection_recovers_interior_points() {
        let (params, net, q0, period) = exact_mode();
        let coarse = ReferenceMode::from_rollout(&params, &net, q0, period, 200).unwrap();
        let fine = ReferenceMode::from_rollout(&params, &net, q0, period, 1600).unwrap();
        // fine samples between coarse ones lie on the same curve; the return half
        // retraces the outbound one, so compare momenta up to sign
        for j in (3..1600).step_by(8) {
            let s = fine.samples()[j];
            let got = project_reference(&coarse, &s.q);
            assert!((got.q_bar - s.q).norm() < 1e-6, "j={j}");
            let dp = (got.p_bar - s.p).norm().min((got.p_bar + s.p).norm());
            assert!(dp < 1e-4, "j={j}");
        }
    }

    #[test]
    fn sign_cases() {
        let params = PendulumParams::default();
        let q = Vector2::new(0.3, -0.2);
        let pb = Vector2::new(1.0, -2.0);
        assert_eq!(momentum_sign(&params, &q, &pb, &pb), 1.0);
        assert_eq!(momentum_sign(&params, &q, &(-pb), &pb), -1.0);
        assert_eq!(momentum_sign(&params, &q, &Vector2::zeros(), &pb), 0.0);
    }

    #[test]
    fn energy_feedback_cases() {
        let (params, net, _) = setup();
        let state = State::new(vec![0.3, 0.1], vec![1.0, -0.5]).unwrap();
        let e = total_energy(&params, &net, &state);
        assert_eq!(energy_feedback(&params, &net, &state, e, 2.0), Vector2::zeros());
        let rest = State::at_rest([0.3, 0.1]);
        assert_eq!(energy_feedback(&params, &net, &rest, e + 5.0, 2.0), Vector2::zeros());
    }

    #[test]
    fn feedback_powers() {
        let (params, net, _) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let s = random_state(&mut rng);
            let q = s.q2();
            let p = s.p2();
            let minv = mass_matrix_inverse(&params, &q);
            let qdot = minv * p;
            let e_bar = rng.gen_range(-30.0..10.0);
            let u_e = energy_feedback(&params, &net, &s, e_bar, 1.5);
            let e = total_energy(&params, &net, &s);
            let expected = 1.5 * (e_bar - e) * p.dot(&qdot).sqrt();
            assert!((u_e.dot(&qdot) - expected).abs() < 1e-10 * (1.0 + expected.abs()));

            let pb = Vector2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let u_m = mode_feedback(&params, &s, &pb, -1.0, 10.0);
            assert!(u_m.dot(&qdot).abs() < 1e-12 * (1.0 + u_m.norm() * qdot.norm()));
        }
    }

    #[test]
    fn projection_properties() {
        let params = PendulumParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let s = random_state(&mut rng);
            let (q, p) = (s.q2(), s.p2());
            let x = Vector2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let once = project_momentum(&params, &q, &p, &x);
            let twice = project_momentum(&params, &q, &p, &once);
            assert!((once - twice).norm() < 1e-12 * (1.0 + once.norm()));
            assert!(project_momentum(&params, &q, &p, &p).norm() < 1e-12 * (1.0 + p.norm()));
        }
        let q = Vector2::new(0.1, 0.2);
        assert_eq!(
            project_momentum(&params, &q, &Vector2::zeros(), &Vector2::new(1.0, 1.0)),
            Vector2::zeros()
        );
    }

    #[test]
    fn mode_feedback_flips_with_momentum() {
        let params = PendulumParams::default();
        let s = State::new(vec![0.2, -0.4], vec![1.5, -0.7]).unwrap();
        let flipped = State::new(vec![0.2, -0.4], vec![-1.5, 0.7]).unwrap();
        let pb = Vector2::new(1.0, 0.3);
        let sigma = momentum_sign(&params, &s.q2(), &s.p2(), &pb);
        let sigma_f = momentum_sign(&params, &flipped.q2(), &flipped.p2(), &pb);
        assert_eq!(sigma, -sigma_f);
        let u = mode_feedback(&params, &s, &pb, sigma, 10.0);
        let u_f = mode_feedback(&params, &flipped, &pb, sigma_f, 10.0);
        assert!((u + u_f).norm() < 1e-12);
    }

    #[test]
    fn feedback_vanishes_on_mode() {
        let (params, net, mode) = setup();
        let gains = ControllerGains::default();
        for j in (0..mode.len()).step_by(7) {
            let u = stabilizing_feedback(&params, &net, &mode, &mode.state(j), &gains);
            assert!(u.norm() < 1e-6, "sample {j}: {u}");
        }
    }

    #[test]
    fn zero_gains_give_zero_feedback() {
        let (params, net, mode) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_state(&mut rng);
        let u = stabilizing_feedback(&params, &net, &mode, &s, &ControllerGains::zero());
        assert_eq!(u, Vector2::zeros());
    }

    #[test]
    fn pure_damping_dissipates() {
        let (params, net, mode) = setup();
        let gains = ControllerGains {
            alpha_e: 0.0,
            alpha_m: 0.0,
            b: 0.7,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let s = random_state(&mut rng);
            let qdot = mass_matrix_inverse(&params, &s.q2()) * s.p2();
            let u = stabilizing_feedback(&params, &net, &mode, &s, &gains);
            assert!(u.dot(&qdot) < 0.0);
            assert!((u.dot(&qdot) + 0.7 * qdot.norm_squared()).abs() < 1e-10 * (1.0 + qdot.norm_squared()));
        }
    }

    #[test]
    fn gains_validation() {
        assert!(ControllerGains::default().validate().is_ok());
        let bad = ControllerGains {
            b: -0.1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn reference_energy_is_constant() {
        let (params, net, mode) = setup();
        for j in 0..mode.len() {
            let e = total_energy(&params, &net, &mode.state(j));
            assert!((e - mode.e_bar()).abs() < 1e-6);
        }
    }

    #[test]
    fn start_on_mode_stays_on_mode() {
        let (params, net, mode) = setup();
        let run = simulate_closed_loop(
            &params,
            &net,
            &mode,
            &mode.state(0),
            &ControllerGains::default(),
            1,
            1e-3,
        )
        .unwrap();
        for e in &run.errors {
            assert!(e.e_err < 1e-6 && e.q_dist < 1e-4 && e.p_dist < 1e-3, "{e:?}");
        }
        assert_eq!(run.errors.len(), run.trajectory.len());
    }

    #[test]
    fn metrics_csv_layout() {
        let (params, net, mode) = setup();
        let s0 = State::new(vec![0.2, 0.2], vec![1.0, 1.0]).unwrap();
        let run = simulate_closed_loop(&params, &net, &mode, &s0, &ControllerGains::default(), 1, 0.01).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        run.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(METRICS_HEADER));
        assert_eq!(lines.count(), run.trajectory.len());
    }
}
