//! Adam training of the control potential (and optionally the period) on the
//! soft-constrained objective `L_task + β·L_eigen`.
//!
//! Each epoch is one full rollout from rest at `q0`; there is no minibatching.
//! A learnable period is optimized as `log T`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::PendulumParams;
use crate::error::{Error, Result};
use crate::integrator::{backprop_scaled, rollout_scaled, TimeGrid, Trajectory};
use crate::objectives::{certify_eigenmode, loss_total, CertificationReport, CertifyTolerances, LossWeights, TaskSpec};
use crate::potential::PotentialNet;

pub const TRAINING_LOG_HEADER: &str = "epoch,loss,l_task,l_eigen,effort,task_err,T";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam state for a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Adam {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// One update of `params` with `gradient` at learning rate `lr`.
    pub fn step(&mut self, params: &mut [f64], gradient: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter length changed");
        assert_eq!(gradient.len(), self.m.len(), "gradient length mismatch");
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = gradient[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub hidden: usize,
    pub learnable_period: bool,
    pub weights: LossWeights,
    pub task: TaskSpec,
    /// RK4 steps per period (even).
    pub steps: usize,
    pub tolerances: CertifyTolerances,
    /// Checkpoint cadence in epochs when an output directory is given; 0 disables.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Reference defaults: 500 epochs, Adam at 1e-3, width 256, `N = 150` for `T = 1.5 s`.
    pub fn new(task: TaskSpec) -> Self {
        TrainConfig {
            epochs: 500,
            adam: AdamConfig::default(),
            seed: 0,
            hidden: 256,
            learnable_period: false,
            weights: LossWeights::default(),
            task,
            steps: 150,
            tolerances: CertifyTolerances::default(),
            checkpoint_every: 50,
        }
    }

    /// Checks everything except the epoch count; zero epochs is a valid no-op run.
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::InvalidParameter("learning rate must be positive".into()));
        }
        self.weights.validate()?;
        self.task.validate()?;
        TimeGrid::new(self.task.period, self.steps)?;
        Ok(())
    }
}

/// Per-epoch record, evaluated before that epoch's update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub loss: f64,
    pub l_task: f64,
    pub l_eigen: f64,
    pub effort: f64,
    pub task_err: f64,
    pub period: f64,
}

impl TrainRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.loss, self.l_task, self.l_eigen, self.effort, self.task_err, self.period
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: PotentialNet,
    pub period: f64,
    pub records: Vec<TrainRecord>,
    pub trajectory: Trajectory,
    pub certification: CertificationReport,
}

impl TrainOutcome {
    pub fn final_effort(&self) -> f64 {
        self.records.last().map(|r| r.effort).unwrap_or(0.0)
    }
}

/// Loss and gradients of one rollout at the given network and period.
pub struct Evaluation {
    pub record: TrainRecord,
    pub trajectory: Trajectory,
    pub d_theta: Vec<f64>,
    pub d_period: f64,
}

pub fn evaluate(
    params: &PendulumParams,
    net: &PotentialNet,
    config: &TrainConfig,
    period: f64,
    epoch: usize,
) -> Result<Evaluation> {
    let traj = rollout_scaled(params, net, config.task.q0, period, config.steps)?;
    let spec = TaskSpec { period, ..config.task };
    let loss = loss_total(params, &traj, &spec, &config.weights)?;
    let sens = backprop_scaled(params, net, &traj, &loss.cotangent)?;
    Ok(Evaluation {
        record: TrainRecord {
            epoch,
            loss: loss.value,
            l_task: loss.task,
            l_eigen: loss.eigen,
            effort: loss.effort,
            task_err: loss.task_error,
            period,
        },
        trajectory: traj,
        d_theta: sens.d_theta,
        d_period: sens.d_period.unwrap_or(0.0),
    })
}

/// Trains from a freshly initialized network.
pub fn train(params: &PendulumParams, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let net = PotentialNet::init(config.hidden, config.seed)?;
    train_from(params, net, config, out_dir)
}

/// Trains starting from `net` for `config.epochs` updates. Zero epochs returns
/// `net` unchanged together with its rollout and certificate.
pub fn train_from(
    params: &PendulumParams,
    mut net: PotentialNet,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    params.validate()?;
    let mut log = match out_dir {
        Some(dir) => Some(TrainingLog::create(dir)?),
        None => None,
    };

    let lr = config.adam.learning_rate;
    let mut adam_theta = Adam::new(config.adam, net.param_count());
    let mut adam_period = Adam::new(config.adam, 1);
    let mut log_period = [config.task.period.ln()];
    let mut records = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let period = log_period[0].exp();
        let eval = evaluate(params, &net, config, period, epoch);
        let eval = match eval {
            Ok(e) if e.record.loss.is_finite() => e,
            Ok(e) => return Err(diverged(&net, out_dir, epoch, e.record.loss)),
            Err(Error::NonFiniteState { .. }) => return Err(diverged(&net, out_dir, epoch, f64::NAN)),
            Err(e) => return Err(e),
        };
        if let Some(log) = log.as_mut() {
            log.append(&eval.record)?;
        }
        records.push(eval.record);

        adam_theta.step(net.params_mut(), &eval.d_theta, lr);
        if config.learnable_period {
            // d/d(log T) = T · d/dT
            adam_period.step(&mut log_period, &[period * eval.d_period], lr);
        }

        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
                net.save(&dir.join(format!("checkpoint_{:04}.json", epoch + 1)))?;
            }
        }
    }

    finalize(params, net, log_period[0].exp(), config, records)
}

/// Rolls out and certifies the final network.
pub fn finalize(
    params: &PendulumParams,
    net: PotentialNet,
    period: f64,
    config: &TrainConfig,
    records: Vec<TrainRecord>,
) -> Result<TrainOutcome> {
    let trajectory = rollout_scaled(params, &net, config.task.q0, period, config.steps)?;
    let certification = certify_eigenmode(&trajectory, &config.tolerances);
    Ok(TrainOutcome {
        net,
        period,
        records,
        trajectory,
        certification,
    })
}

fn diverged(net: &PotentialNet, out_dir: Option<&Path>, epoch: usize, loss: f64) -> Error {
    if let Some(dir) = out_dir {
        // best effort; the divergence is the error worth reporting
        let _ = net.save(&dir.join("checkpoint_diverged.json"));
    }
    Error::DivergedTraining { epoch, loss }
}

struct TrainingLog {
    path: PathBuf,
    file: fs::File,
}

impl TrainingLog {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("training_log.csv");
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(file, "{TRAINING_LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
        Ok(TrainingLog { path, file })
    }

    fn append(&mut self, record: &TrainRecord) -> Result<()> {
        writeln!(self.file, "{}", record.csv_row()).map_err(|e| Error::io(&self.path, e))
    }
}

/// Parameter a sweep varies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepValue {
    AlphaEff(f64),
    Period(f64),
    Q0([f64; 2]),
    HStar([f64; 2]),
    Seed(u64),
}

impl SweepValue {
    pub fn parameter_name(&self) -> &'static str {
        match self {
            SweepValue::AlphaEff(_) => "alpha_eff",
            SweepValue::Period(_) => "T",
            SweepValue::Q0(_) => "q0",
            SweepValue::HStar(_) => "h_star",
            SweepValue::Seed(_) => "seed",
        }
    }

    pub fn label(&self) -> String {
        match self {
            SweepValue::AlphaEff(v) | SweepValue::Period(v) => format!("{v}"),
            SweepValue::Q0(v) | SweepValue::HStar(v) => format!("{}_{}", v[0], v[1]),
            SweepValue::Seed(v) => v.to_string(),
        }
    }

    /// `base` with this value substituted. A period change keeps the step size.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match *self {
            SweepValue::AlphaEff(v) => cfg.weights.alpha_eff = v,
            SweepValue::Period(t) => {
                let dt = base.task.period / base.steps as f64;
                let raw = (t / dt).round().max(2.0) as usize;
                cfg.steps = raw + raw % 2;
                cfg.task.period = t;
            }
            SweepValue::Q0(q) => cfg.task.q0 = q,
            SweepValue::HStar(h) => cfg.task.h_star = h,
            SweepValue::Seed(s) => cfg.seed = s,
        }
        cfg
    }
}

/// Parses a sweep parameter name and its comma/semicolon separated values.
/// Vector-valued parameters take `a:b` pairs, e.g. `0.1:0.2,0.3:0.4`.
pub fn parse_sweep_values(name: &str, values: &[String]) -> Result<Vec<SweepValue>> {
    if values.is_empty() {
        return Err(Error::InvalidParameter("sweep needs at least one value".into()));
    }
    let num = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::InvalidParameter(format!("not a number: {s:?}")))
    };
    let pair = |s: &str| -> Result<[f64; 2]> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 2 {
            return Err(Error::InvalidParameter(format!("expected a:b pair, got {s:?}")));
        }
        Ok([num(parts[0])?, num(parts[1])?])
    };
    values
        .iter()
        .map(|v| match name {
            "alpha_eff" => Ok(SweepValue::AlphaEff(num(v)?)),
            "T" | "period" => Ok(SweepValue::Period(num(v)?)),
            "q0" => Ok(SweepValue::Q0(pair(v)?)),
            "h_star" => Ok(SweepValue::HStar(pair(v)?)),
            "seed" => v
                .trim()
                .parse::<u64>()
                .map(SweepValue::Seed)
                .map_err(|_| Error::InvalidParameter(format!("not a seed: {v:?}"))),
            other => Err(Error::InvalidParameter(format!(
                "unknown sweep parameter {other:?}; expected alpha_eff, T, q0, h_star or seed"
            ))),
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepEntry {
    pub parameter: String,
    pub value: SweepValue,
    pub directory: String,
    pub status: String,
    pub error: Option<String>,
    pub final_loss: Option<f64>,
    pub final_effort: Option<f64>,
    pub task_error: Option<f64>,
    pub period: Option<f64>,
    pub certification: Option<CertificationReport>,
}

pub struct SweepRun {
    pub value: SweepValue,
    pub result: Result<TrainOutcome>,
}

/// Independent training runs, one per value, at most `jobs` at a time. Each run
/// writes under `out_dir/<parameter>=<value>/` when `out_dir` is given. A failing
/// run is recorded and does not stop its siblings.
pub fn sweep(
    params: &PendulumParams,
    base: &TrainConfig,
    values: &[SweepValue],
    out_dir: Option<&Path>,
    jobs: usize,
) -> Result<(Vec<SweepRun>, Vec<SweepEntry>)> {
    if values.is_empty() {
        return Err(Error::InvalidParameter("sweep needs at least one value".into()));
    }
    let dirs: Vec<Option<PathBuf>> = values
        .iter()
        .map(|v| out_dir.map(|d| d.join(format!("{}={}", v.parameter_name(), v.label()))))
        .collect();
    let run_one = |(value, dir): (&SweepValue, &Option<PathBuf>)| -> SweepRun {
        let cfg = value.apply(base);
        let result = match dir {
            Some(d) => fs::create_dir_all(d)
                .map_err(|e| Error::io(d, e))
                .and_then(|_| train(params, &cfg, Some(d))),
            None => train(params, &cfg, None),
        };
        SweepRun {
            value: value.clone(),
            result,
        }
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    let runs: Vec<SweepRun> = pool.install(|| values.par_iter().zip(dirs.par_iter()).map(run_one).collect());

    let entries = runs
        .iter()
        .zip(&dirs)
        .map(|(run, dir)| {
            let directory = dir
                .as_ref()
                .and_then(|d| d.file_name())
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            match &run.result {
                Ok(o) => SweepEntry {
                    parameter: run.value.parameter_name().into(),
                    value: run.value.clone(),
                    directory,
                    status: "ok".into(),
                    error: None,
                    final_loss: o.records.last().map(|r| r.loss),
                    final_effort: Some(o.final_effort()),
                    task_error: o.records.last().map(|r| r.task_err),
                    period: Some(o.period),
                    certification: Some(o.certification),
                },
                Err(e) => SweepEntry {
                    parameter: run.value.parameter_name().into(),
                    value: run.value.clone(),
                    directory,
                    status: "failed".into(),
                    error: Some(e.to_string()),
                    final_loss: None,
                    final_effort: None,
                    task_error: None,
                    period: None,
                    certification: None,
                },
            }
        })
        .collect();
    Ok((runs, entries))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut adam = Adam::new(AdamConfig::default(), 3);
        let mut x = [1.0, -2.0, 3.0];
        adam.step(&mut x, &[0.5, 0.0, -1.0], 1e-3);
        let before = x;
        let (m0, _) = adam.moments();
        let m0 = m0.to_vec();
        adam.step(&mut x, &[0.0, 0.0, 0.0], 0.0);
        assert_eq!(x, before);
        let (m1, _) = adam.moments();
        for (a, b) in m1.iter().zip(&m0) {
            assert!((a - 0.9 * b).abs() < 1e-18);
        }
    }

    #[test]
    fn zero_gradient_from_fresh_state_is_noop() {
        let mut adam = Adam::new(AdamConfig::default(), 2);
        let mut x = [0.3, 0.4];
        adam.step(&mut x, &[0.0, 0.0], 1e-3);
        assert_eq!(x, [0.3, 0.4]);
    }

    #[test]
    fn first_step_is_sign_like() {
        let mut adam = Adam::new(AdamConfig::default(), 3);
        let g = [2.0, -0.01, 1e3];
        let mut x = [0.0; 3];
        adam.step(&mut x, &g, 1e-3);
        for i in 0..3 {
            let expect = -1e-3 * g[i] / (g[i].abs() + 1e-8);
            assert!((x[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::new(AdamConfig::default(), 2);
        let mut x = [3.0, -2.0];
        let f = |x: &[f64; 2]| (x[0] - 1.0).powi(2) + 10.0 * (x[1] + 0.5).powi(2);
        for _ in 0..5000 {
            let g = [2.0 * (x[0] - 1.0), 20.0 * (x[1] + 0.5)];
            adam.step(&mut x, &g, 1e-2);
        }
        assert!(f(&x) < 1e-6, "f = {}", f(&x));
        assert_eq!(adam.step_count(), 5000);
    }

    #[test]
    fn config_validation() {
        let task = TaskSpec {
            q0: [0.0, 0.0],
            h_star: [0.0, -2.0],
            period: 1.5,
        };
        let mut cfg = TrainConfig::new(task);
        assert!(cfg.validate().is_ok());
        cfg.adam.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        cfg.adam.learning_rate = 1e-3;
        cfg.steps = 151;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sweep_value_parsing() {
        let v = parse_sweep_values("alpha_eff", &["0".into(), "1e-4".into()]).unwrap();
        assert_eq!(v, vec![SweepValue::AlphaEff(0.0), SweepValue::AlphaEff(1e-4)]);
        let v = parse_sweep_values("q0", &["0.1:-0.2".into()]).unwrap();
        assert_eq!(v, vec![SweepValue::Q0([0.1, -0.2])]);
        assert!(parse_sweep_values("T", &[]).is_err());
        assert!(parse_sweep_values("gravity", &["1".into()]).is_err());
        assert!(parse_sweep_values("q0", &["0.1".into()]).is_err());
    }

    #[test]
    fn period_sweep_keeps_step_size() {
        let task = TaskSpec {
            q0: [0.0, 0.0],
            h_star: [0.0, -2.0],
            period: 1.5,
        };
        let base = TrainConfig::new(task);
        let cfg = SweepValue::Period(2.25).apply(&base);
        assert_eq!(cfg.steps, 226);
        assert_eq!(cfg.task.period, 2.25);
        let cfg = SweepValue::Period(3.0).apply(&base);
        assert_eq!(cfg.steps, 300);
    }
}
