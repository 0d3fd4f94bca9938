use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use modectl::expcli::{
    cmd_export_potential, cmd_stabilize, cmd_sweep, cmd_train, CommandResult, RunConfig, StabilizeOverrides,
};

#[derive(Parser)]
#[command(name = "modectl", version, about = "Learn and stabilize double-pendulum eigenmodes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a control potential whose autonomous rollout is an eigenmode.
    Train { config: PathBuf },
    /// Stabilize the checkpoint's mode from a perturbed start.
    Stabilize {
        config: PathBuf,
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_pair)]
        q0: Option<[f64; 2]>,
        #[arg(long, value_parser = parse_pair)]
        p0: Option<[f64; 2]>,
        #[arg(long)]
        damping: Option<f64>,
        #[arg(long)]
        periods: Option<usize>,
        /// Reference period (defaults to task.period, e.g. pass a learned one).
        #[arg(long)]
        period: Option<f64>,
    },
    /// Train once per value of one parameter.
    Sweep {
        config: PathBuf,
        /// alpha_eff, T, q0, h_star or seed.
        #[arg(long)]
        param: String,
        /// Comma separated; vector values as a:b.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write the potential surface of a checkpoint to potential.csv.
    ExportPotential {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 101)]
        grid: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Take pendulum parameters from this config instead of the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    match parts.as_slice() {
        [a, b] => Ok([
            a.trim().parse().map_err(|_| format!("not a number: {a}"))?,
            b.trim().parse().map_err(|_| format!("not a number: {b}"))?,
        ]),
        _ => Err(format!("expected a,b got {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: CommandResult = match cli.command {
        Command::Train { config } => cmd_train(&config),
        Command::Stabilize {
            config,
            checkpoint,
            q0,
            p0,
            damping,
            periods,
            period,
        } => cmd_stabilize(
            &config,
            &checkpoint,
            StabilizeOverrides {
                q0,
                p0,
                damping,
                periods,
                period,
            },
        ),
        Command::Sweep {
            config,
            param,
            values,
            jobs,
        } => cmd_sweep(&config, &param, &values, jobs),
        Command::ExportPotential {
            checkpoint,
            grid,
            out,
            config,
        } => match config.map(|c| RunConfig::load(&c)).transpose() {
            Ok(cfg) => cmd_export_potential(&checkpoint, grid, &out, cfg.map(|c| c.pendulum)),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        },
    };
    match result {
        Ok(manifest) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&manifest.results).unwrap_or_default()
            );
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
