//! Run configuration and the `modectl` commands.
//!
//! A run is described by one TOML file. Every section is optional and defaults to
//! the main experiment's hyperparameters, except `task.q0` and `task.h_star`:
//!
//! ```toml
//! output_dir = "runs/main"
//!
//! [task]
//! q0 = [0.2353, -0.5312]
//! h_star = [0.1778, -1.7702]
//! period = 1.5
//!
//! [train]
//! epochs = 500
//! ```
//!
//! Commands return a [`Failure`] carrying the process exit code: 1 for
//! configuration or input errors, 2 for diverged training, 3 when a checkpoint
//! cannot be loaded or its mode fails certification in `stabilize`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dynamics::{gravity_potential, spring_potential, PendulumParams, State};
use crate::error::Error;
use crate::integrator::{rollout, TimeGrid};
use crate::objectives::{
    certify_eigenmode, forward_kinematics, CertificationReport, CertifyTolerances, LossWeights, TaskSpec,
};
use crate::potential::PotentialNet;
use crate::stabilizer::{converged_start, cycle_multipliers, simulate_closed_loop, ControllerGains, ReferenceMode};
use crate::trainer::{parse_sweep_values, sweep, train, AdamConfig, TrainConfig, TrainOutcome};

/// Environment variable overriding `net.seed`.
pub const SEED_ENV: &str = "MODECTL_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub hidden: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { hidden: 256, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// RK4 steps per period; even.
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { steps: 150 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub q0: Option<[f64; 2]>,
    pub h_star: Option<[f64; 2]>,
    #[serde(default = "default_period")]
    pub period: f64,
}

fn default_period() -> f64 {
    1.5
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            q0: None,
            h_star: None,
            period: default_period(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub learnable_period: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 500,
            learning_rate: 1e-3,
            learnable_period: false,
            checkpoint_every: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilizeConfig {
    pub q0: [f64; 2],
    pub p0: [f64; 2],
    pub periods: usize,
    pub dt: f64,
    /// Reference samples per period.
    pub samples: usize,
    pub fd_step: f64,
    /// Periods simulated before picking the multiplier base point.
    pub settle_periods: usize,
}

impl Default for StabilizeConfig {
    fn default() -> Self {
        StabilizeConfig {
            q0: [0.2, 0.2],
            p0: [5.0, 5.0],
            periods: 3,
            dt: 1e-3,
            samples: 1000,
            fd_step: 1e-5,
            settle_periods: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportConfig {
    /// Points per axis of the potential grid.
    pub grid: usize,
}

impl Default for ExportConfig {
    fn default() -> Self {
        ExportConfig { grid: 101 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub pendulum: PendulumParams,
    pub net: NetConfig,
    pub grid: GridConfig,
    pub weights: LossWeights,
    pub task: TaskConfig,
    pub train: TrainSection,
    pub certify: CertifyTolerances,
    pub gains: ControllerGains,
    pub stabilize: StabilizeConfig,
    pub export: ExportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs/default"),
            pendulum: PendulumParams::default(),
            net: NetConfig::default(),
            grid: GridConfig::default(),
            weights: LossWeights::default(),
            task: TaskConfig::default(),
            train: TrainSection::default(),
            certify: CertifyTolerances::default(),
            gains: ControllerGains::default(),
            stabilize: StabilizeConfig::default(),
            export: ExportConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Reads, parses and validates a config file. Errors carry the path.
    pub fn load(path: &Path) -> crate::Result<Self> {
        let config_err = |message: String| Error::Config {
            path: path.to_path_buf(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| config_err(e.to_string()))?;
        let config = Self::from_toml_str(&text).map_err(config_err)?;
        config.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(config)
    }

    pub fn validate(&self) -> crate::Result<()> {
        self.pendulum.validate()?;
        self.weights.validate()?;
        self.gains.validate()?;
        if self.net.hidden == 0 {
            return Err(Error::InvalidParameter("net.hidden must be positive".into()));
        }
        TimeGrid::new(self.task.period, self.grid.steps)?;
        let s = &self.stabilize;
        if s.periods == 0 || s.settle_periods == 0 || !(s.dt > 0.0) || !(s.fd_step > 0.0) {
            return Err(Error::InvalidParameter(
                "stabilize.periods, settle_periods, dt and fd_step must be positive".into(),
            ));
        }
        if s.samples < 2 || !s.samples.is_multiple_of(2) {
            return Err(Error::InvalidParameter(
                "stabilize.samples must be even and at least 2".into(),
            ));
        }
        if self.export.grid == 0 {
            return Err(Error::InvalidParameter("export.grid must be positive".into()));
        }
        Ok(())
    }

    /// The task, which requires `q0` and `h_star` to be set.
    pub fn task_spec(&self) -> crate::Result<TaskSpec> {
        let (Some(q0), Some(h_star)) = (self.task.q0, self.task.h_star) else {
            return Err(Error::InvalidParameter("task.q0 and task.h_star are required".into()));
        };
        let spec = TaskSpec {
            q0,
            h_star,
            period: self.task.period,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_config(&self) -> crate::Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.train.epochs,
            adam: AdamConfig {
                learning_rate: self.train.learning_rate,
                ..AdamConfig::default()
            },
            seed: self.net.seed,
            hidden: self.net.hidden,
            learnable_period: self.train.learnable_period,
            weights: self.weights,
            task: self.task_spec()?,
            steps: self.grid.steps,
            tolerances: self.certify,
            checkpoint_every: self.train.checkpoint_every,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `MODECTL_SEED` when set.
    pub fn apply_env(&mut self) -> crate::Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.net.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::InvalidParameter(format!("{SEED_ENV} is not a seed: {raw:?}")))?;
        }
        Ok(())
    }
}

/// A command failure and the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn new(code: u8, err: impl std::fmt::Display) -> Self {
        Failure {
            code,
            message: err.to_string(),
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CommandResult = std::result::Result<RunManifest, Failure>;

fn config_failure(e: Error) -> Failure {
    Failure::new(1, e)
}

fn in_config(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| {
        Failure::new(
            1,
            Error::Config {
                path: path.to_path_buf(),
                message: e.to_string(),
            },
        )
    }
}

fn load_config(path: &Path) -> std::result::Result<RunConfig, Failure> {
    let mut config = RunConfig::load(path).map_err(config_failure)?;
    config.apply_env().map_err(config_failure)?;
    Ok(config)
}

fn create_dir(dir: &Path) -> std::result::Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::new(1, Error::io(dir, e)))
}

/// Record of one command: what ran, with which config, and what it wrote.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub build: String,
    pub config: Option<RunConfig>,
    /// Paths relative to the output directory, sorted.
    pub files: Vec<String>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
    pub results: serde_json::Value,
}

pub fn build_id() -> String {
    match option_env!("MODECTL_BUILD_ID") {
        Some(id) => id.to_string(),
        None => format!("modectl-{}", env!("CARGO_PKG_VERSION")),
    }
}

const MANIFEST_NAME: &str = "manifest.json";

impl RunManifest {
    fn new(command: &str, config: Option<RunConfig>) -> Self {
        RunManifest {
            command: command.to_string(),
            build: build_id(),
            config,
            files: Vec::new(),
            timings: BTreeMap::new(),
            results: serde_json::Value::Null,
        }
    }

    fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings.insert(phase.to_string(), start.elapsed().as_secs_f64());
        out
    }

    /// Lists every file under `dir` (including the manifest itself) and writes it.
    fn finish(mut self, dir: &Path) -> CommandResult {
        let mut files = vec![MANIFEST_NAME.to_string()];
        list_files(dir, dir, &mut files).map_err(|e| Failure::new(1, e))?;
        files.sort();
        files.dedup();
        self.files = files;
        write_json(&dir.join(MANIFEST_NAME), &self).map_err(|e| Failure::new(1, e))?;
        Ok(self)
    }
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> crate::Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            list_files(root, &path, out)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> crate::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize)]
struct CertificationFile {
    period: f64,
    task_error: f64,
    midpoint_position: [f64; 2],
    h_star: [f64; 2],
    report: CertificationReport,
}

/// Writes the final checkpoint, trajectory, certificate and potential grid of a run.
fn write_train_artifacts(
    dir: &Path,
    params: &PendulumParams,
    outcome: &TrainOutcome,
    task: &TaskSpec,
    export_grid: usize,
) -> crate::Result<()> {
    outcome.net.save(&dir.join("checkpoint.json"))?;
    outcome.trajectory.write_csv(&dir.join("trajectory.csv"))?;
    let mid = outcome.trajectory.grid.mid_index();
    let h = forward_kinematics(params, &outcome.trajectory.q(mid));
    let task_error = ((h[0] - task.h_star[0]).powi(2) + (h[1] - task.h_star[1]).powi(2)).sqrt();
    write_json(
        &dir.join("certification.json"),
        &CertificationFile {
            period: outcome.period,
            task_error,
            midpoint_position: [h[0], h[1]],
            h_star: task.h_star,
            report: outcome.certification,
        },
    )?;
    export_potential(params, &outcome.net, export_grid, &dir.join("potential.csv"))
}

/// Trains, then writes checkpoint, training log, trajectory, certificate,
/// potential grid and manifest to `output_dir`.
pub fn cmd_train(config_path: &Path) -> CommandResult {
    let config = load_config(config_path)?;
    let train_cfg = config.train_config().map_err(in_config(config_path))?;
    let dir = config.output_dir.clone();
    create_dir(&dir)?;

    let mut manifest = RunManifest::new("train", Some(config.clone()));
    let outcome = manifest
        .time("train", || train(&config.pendulum, &train_cfg, Some(&dir)))
        .map_err(|e| match e {
            Error::DivergedTraining { .. } => Failure::new(2, e),
            other => Failure::new(1, other),
        })?;
    manifest
        .time("export", || {
            write_train_artifacts(&dir, &config.pendulum, &outcome, &train_cfg.task, config.export.grid)
        })
        .map_err(|e| Failure::new(1, e))?;

    let last = outcome.records.last();
    manifest.results = serde_json::json!({
        "period": outcome.period,
        "is_eigenmode": outcome.certification.is_eigenmode,
        "final_loss": last.map(|r| r.loss),
        "task_error": last.map(|r| r.task_err),
        "final_effort": outcome.final_effort(),
        "epochs": outcome.records.len(),
    });
    manifest.finish(&dir)
}

/// Options of `stabilize` that override the config.
#[derive(Debug, Clone, Copy, Default)]
pub struct StabilizeOverrides {
    pub q0: Option<[f64; 2]>,
    pub p0: Option<[f64; 2]>,
    pub damping: Option<f64>,
    pub periods: Option<usize>,
    /// Reference period, e.g. a learned one; defaults to `task.period`.
    pub period: Option<f64>,
}

/// Builds the reference mode from the checkpoint, runs the stabilized closed loop
/// and evaluates cycle multipliers. Writes `metrics.csv`, `multipliers.json`,
/// `reference.csv` and the manifest.
pub fn cmd_stabilize(config_path: &Path, checkpoint: &Path, overrides: StabilizeOverrides) -> CommandResult {
    let mut config = load_config(config_path)?;
    let task = config.task_spec().map_err(in_config(config_path))?;
    let net = PotentialNet::load(checkpoint).map_err(|e| Failure::new(3, e))?;
    let s = &mut config.stabilize;
    s.q0 = overrides.q0.unwrap_or(s.q0);
    s.p0 = overrides.p0.unwrap_or(s.p0);
    s.periods = overrides.periods.unwrap_or(s.periods);
    config.gains.b = overrides.damping.unwrap_or(config.gains.b);
    let period = overrides.period.unwrap_or(task.period);
    config.validate().map_err(config_failure)?;
    if invalid_period(period) {
        return Err(Failure::new(1, Error::NonPositivePeriod(period)));
    }

    let params = config.pendulum;
    let s = config.stabilize;
    let dir = config.output_dir.clone();
    create_dir(&dir)?;
    let mut manifest = RunManifest::new("stabilize", Some(config.clone()));

    let grid = TimeGrid::new(period, config.grid.steps).map_err(config_failure)?;
    let check = rollout(&params, &net, task.q0, grid).map_err(|e| Failure::new(3, e))?;
    let report = certify_eigenmode(&check, &config.certify);
    if !report.is_eigenmode {
        return Err(Failure::new(
            3,
            Error::Certification(format!(
                "periodic={} symmetric={} line_shaped={} (midpoint momentum {:.3e}, closure {:.3e})",
                report.periodic, report.symmetric, report.line_shaped, report.midpoint_momentum, report.closure_error
            )),
        ));
    }

    let fail = |e: Error| Failure::new(1, e);
    let mode = ReferenceMode::from_rollout(&params, &net, task.q0, period, s.samples).map_err(fail)?;
    let state0 = State::new(s.q0.to_vec(), s.p0.to_vec()).map_err(fail)?;
    let run = manifest
        .time("simulate", || {
            simulate_closed_loop(&params, &net, &mode, &state0, &config.gains, s.periods, s.dt)
        })
        .map_err(fail)?;
    run.write_csv(&dir.join("metrics.csv")).map_err(fail)?;
    write_reference_csv(&mode, &dir.join("reference.csv")).map_err(fail)?;

    let multipliers = manifest
        .time("multipliers", || {
            let x0 = converged_start(&params, &net, &mode, &config.gains, s.settle_periods, 0, s.dt)?;
            cycle_multipliers(&params, &net, &mode, &config.gains, &x0, s.fd_step, s.dt)
        })
        .map_err(fail)?;
    multipliers.write_json(&dir.join("multipliers.json")).map_err(fail)?;

    let first = run.errors[0];
    let last = *run.errors.last().expect("non-empty run");
    manifest.results = serde_json::json!({
        "e_bar": mode.e_bar(),
        "period": period,
        "initial": first,
        "final": last,
        "final_energy": run.trajectory.energies.last(),
        "max_abs_multiplier": multipliers.max_abs(),
        "rows": run.errors.len(),
    });
    manifest.finish(&dir)
}

fn invalid_period(period: f64) -> bool {
    !(period > 0.0) || !period.is_finite()
}

fn write_reference_csv(mode: &ReferenceMode, path: &Path) -> crate::Result<()> {
    let mut out = String::from("t,q1,q2,p1,p2\n");
    for s in mode.samples() {
        out.push_str(&format!("{},{},{},{},{}\n", s.t, s.q[0], s.q[1], s.p[0], s.p[1]));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Independent training runs over one parameter. Per-run failures are recorded in
/// the manifest and do not change the exit code.
pub fn cmd_sweep(config_path: &Path, param: &str, values: &[String], jobs: usize) -> CommandResult {
    let config = load_config(config_path)?;
    let base = config.train_config().map_err(in_config(config_path))?;
    let values = parse_sweep_values(param, values).map_err(config_failure)?;
    let dir = config.output_dir.clone();
    create_dir(&dir)?;

    let mut manifest = RunManifest::new("sweep", Some(config.clone()));
    let (runs, mut entries) = manifest
        .time("sweep", || sweep(&config.pendulum, &base, &values, Some(&dir), jobs))
        .map_err(config_failure)?;
    for (run, entry) in runs.iter().zip(entries.iter_mut()) {
        if let Ok(outcome) = &run.result {
            let task = run.value.apply(&base).task;
            if let Err(e) = write_train_artifacts(
                &dir.join(&entry.directory),
                &config.pendulum,
                outcome,
                &task,
                config.export.grid,
            ) {
                entry.status = "failed".into();
                entry.error = Some(e.to_string());
            }
        }
    }
    manifest.results = serde_json::json!({ "parameter": param, "runs": entries });
    manifest.finish(&dir)
}

/// Writes `q1,q2,V_theta,V_gravity,V_spring,V_total` on an `n × n` grid over `[−π, π]²`.
pub fn export_potential(params: &PendulumParams, net: &PotentialNet, n: usize, path: &Path) -> crate::Result<()> {
    use std::f64::consts::PI;
    if n == 0 {
        return Err(Error::InvalidParameter("grid size must be positive".into()));
    }
    let axis = |i: usize| {
        if n == 1 {
            0.0
        } else {
            -PI + 2.0 * PI * i as f64 / (n - 1) as f64
        }
    };
    let mut out = String::with_capacity(n * n * 80);
    out.push_str("q1,q2,V_theta,V_gravity,V_spring,V_total\n");
    for i in 0..n {
        for j in 0..n {
            let q = nalgebra::Vector2::new(axis(i), axis(j));
            let vt = net.value(&q);
            let vg = gravity_potential(params, &q);
            let vs = spring_potential(params, &q);
            out.push_str(&format!("{},{},{},{},{},{}\n", q[0], q[1], vt, vg, vs, vt + vg + vs));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Exports the potential surface of a checkpoint into `out_dir/potential.csv`.
pub fn cmd_export_potential(
    checkpoint: &Path,
    grid: usize,
    out_dir: &Path,
    params: Option<PendulumParams>,
) -> CommandResult {
    let net = PotentialNet::load(checkpoint).map_err(|e| Failure::new(1, e))?;
    let params = params.unwrap_or_default();
    params.validate().map_err(config_failure)?;
    create_dir(out_dir)?;
    let mut manifest = RunManifest::new("export-potential", None);
    manifest
        .time("export", || {
            export_potential(&params, &net, grid, &out_dir.join("potential.csv"))
        })
        .map_err(config_failure)?;
    manifest.results = serde_json::json!({ "checkpoint": checkpoint, "grid": grid });
    manifest.finish(out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.epochs, 500);
        assert_eq!(cfg.weights, LossWeights::default());
        assert!(cfg.task_spec().is_err());
    }

    #[test]
    fn task_fields_parse() {
        let cfg = RunConfig::from_toml_str(
            "output_dir = \"out\"\n[task]\nq0 = [0.1, 0.2]\nh_star = [0.3, -1.0]\n[gains]\nb = 0.1\n",
        )
        .unwrap();
        let spec = cfg.task_spec().unwrap();
        assert_eq!(spec.q0, [0.1, 0.2]);
        assert_eq!(spec.period, 1.5);
        assert_eq!(cfg.gains.b, 0.1);
        assert_eq!(cfg.gains.alpha_m, 10.0);
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("[train]\nepoch = 3\n").is_err());
        assert!(RunConfig::from_toml_str("bogus = 1\n").is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.grid.steps = 151;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.gains.alpha_e = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.stabilize.samples = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.task.q0 = Some([0.1, -0.2]);
        cfg.task.h_star = Some([0.0, -1.9]);
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn potential_export_is_additive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("potential.csv");
        let net = PotentialNet::init(8, 1).unwrap();
        export_potential(&PendulumParams::default(), &net, 5, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let rows: Vec<Vec<f64>> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 25);
        for r in &rows {
            assert!((r[5] - (r[2] + r[3] + r[4])).abs() < 1e-12);
        }
        assert_eq!(rows[0][0], -std::f64::consts::PI);
        assert_eq!(rows[24][1], std::f64::consts::PI);
    }
}
