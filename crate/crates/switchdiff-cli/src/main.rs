//! Command-line front end: model validation, simulation, action
//! evaluation, quasipotential and Dirichlet solvers, and declarative
//! multi-stage experiment runs.
//!
//! Output files are deterministic: identical invocations produce identical
//! bytes. Relative output paths honor the `SWITCHDIFF_OUT` environment
//! variable. Every stochastic subcommand takes an explicit `--seed`.

// Same NaN-fails-closed comparison idiom as the library crate.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod experiment;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use switchdiff::dirichlet::{solve_dirichlet, SolveConfig};
use switchdiff::ldp::{
    joint_action, position_action, scheduled_action, verify_invariants, ActionOptions,
    PathDiscretization,
};
use switchdiff::model::{validate_model, ModelSpec, RateSchedule};
use switchdiff::quasipotential::{find_exit_minimizer, geometric_grid, MinimizerOptions};
use switchdiff::sim::{batch_exit_mc, simulate_until_exit, ExitStatistics, SimConfig};
use switchdiff::switching::integrate_averaged;
use switchdiff::Result;

use output::{resolve_out, to_json_pretty, write_text, Table};

#[derive(Parser)]
#[command(
    name = "switchdiff",
    version,
    about = "Slow-fast switching diffusions: simulation, large deviations, exit problems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a model file: structure, rate positivity, domain geometry.
    /// Prints a JSON report; exits 1 when a check fails.
    Validate {
        #[arg(long)]
        model: PathBuf,
        /// Sample points drawn in the domain box for the pointwise checks.
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long)]
        seed: u64,
        /// Optional file for the JSON report (also printed to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Integrate the averaged slow flow and write it as CSV (t, z1..zd).
    AveragedFlow {
        #[arg(long)]
        model: PathBuf,
        /// Start position, comma separated; defaults to the box center.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        z0: Option<Vec<f64>>,
        /// Integration horizon.
        #[arg(long = "T", visible_alias = "horizon")]
        t_end: f64,
        /// Time step; defaults to T/1000.
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run exit-time Monte Carlo and write exits.csv (and optionally a
    /// sampled subset of full trajectories) into a directory.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        eps: f64,
        /// Slow-noise rate; zero disables slow noise.
        #[arg(long = "deltahat", visible_alias = "delta-hat", default_value_t = 0.0)]
        delta_hat: f64,
        /// Time step; defaults to eps/10.
        #[arg(long)]
        dt: Option<f64>,
        /// Censoring horizon.
        #[arg(long = "tmax", visible_alias = "t-max", default_value_t = 1e3)]
        t_max: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        trials: u64,
        /// Start position; defaults to the box center.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        z0: Option<Vec<f64>>,
        /// Start mode, 1-based.
        #[arg(long, default_value_t = 1)]
        mode: usize,
        /// Record the first N trials as full trajectories in paths.csv.
        #[arg(long, default_value_t = 0)]
        paths: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate an exits.csv file into a JSON summary.
    ExitStats {
        /// The exits.csv file to read.
        #[arg(long)]
        input: PathBuf,
        /// The eps the batch was run at (recorded in the summary).
        #[arg(long)]
        eps: f64,
        /// Optional reference point for a near/far exit split.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        center: Option<Vec<f64>>,
        /// Radius for the near/far split.
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the Hamiltonian/conjugate identity suite on random samples.
    /// Prints a JSON report; exits 1 when a check fails.
    LdpVerify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        eps: f64,
        #[arg(long = "deltahat", visible_alias = "delta-hat")]
        delta_hat: f64,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate an action functional on a path CSV (columns t, z1..zd and,
    /// for the joint and scheduled kinds, mu1..muK).
    Action {
        #[arg(long)]
        model: PathBuf,
        /// Path CSV file.
        #[arg(long)]
        path: PathBuf,
        /// S: joint position/occupation action. I: position-only action.
        /// timed: joint action against a time-dependent rate schedule.
        #[arg(long, value_enum)]
        mode: ActionKind,
        #[arg(long)]
        eps: f64,
        #[arg(long = "deltahat", visible_alias = "delta-hat")]
        delta_hat: f64,
        /// Rate schedule TOML, required for the timed kind.
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute the boundary quasipotential profile and exit-point report.
    Quasipotential {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        eps: f64,
        #[arg(long = "deltahat", visible_alias = "delta-hat")]
        delta_hat: f64,
        #[arg(long, default_value_t = 32)]
        boundary_samples: usize,
        /// Horizon grid, comma separated; defaults to a geometric grid
        /// from 0.5 to 6 with 6 points.
        #[arg(long = "Tgrid", visible_alias = "t-grid", value_delimiter = ',')]
        t_grid: Option<Vec<f64>>,
        /// Path segments per optimization.
        #[arg(long = "N", visible_alias = "segments", default_value_t = 16)]
        segments: usize,
        #[arg(long, default_value_t = 2)]
        starts: usize,
        #[arg(long, default_value_t = 200)]
        max_iter: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve the coupled Dirichlet system on a grid and write the fields
    /// as CSV (z1..zd, cell class, one value column per mode).
    Dirichlet {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        eps: f64,
        /// Slow-noise rate; defaults to eps^2.
        #[arg(long = "deltahat", visible_alias = "delta-hat")]
        delta_hat: Option<f64>,
        #[arg(long, default_value_t = 0.05)]
        h: f64,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the Dirichlet system along a decreasing eps list with
    /// delta_hat = eps^2 and tabulate the probe values (JSON).
    DirichletSweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',')]
        eps_list: Vec<f64>,
        /// Probe position, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        probe: Vec<f64>,
        /// Expected limit value; deviations are tabulated when given.
        #[arg(long, allow_hyphen_values = true)]
        expected: Option<f64>,
        #[arg(long, default_value_t = 0.05)]
        h: f64,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a declarative experiment config; writes stage outputs and a
    /// manifest into the output directory. Exits 1 when a stage fails.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory (and SWITCHDIFF_OUT).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Rebuild the exit-localization verdicts from a finished run
    /// directory. Exits 1 when a verdict fails.
    VerifyProp2 {
        /// Run directory containing manifest.json.
        #[arg(long)]
        dir: PathBuf,
        /// Localization radius around the predicted exit point.
        #[arg(long)]
        delta: f64,
        /// Required exit-mode probability at the smallest eps.
        #[arg(long, default_value_t = 0.9)]
        mode_threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ActionKind {
    /// Joint position/occupation action.
    #[value(name = "S")]
    S,
    /// Position-only action.
    #[value(name = "I")]
    I,
    /// Scheduled-rate action.
    #[value(name = "timed")]
    Timed,
}

#[derive(Serialize)]
struct NearSummary {
    center: Vec<f64>,
    delta: f64,
    probability: f64,
    se: f64,
    far_probability: f64,
}

#[derive(Serialize)]
struct ExitSummary {
    eps: f64,
    trials: usize,
    exited: usize,
    censored: usize,
    mean_exit_time: f64,
    mean_exit_time_se: f64,
    mean_occupation: Vec<f64>,
    mode_probabilities: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    near: Option<NearSummary>,
}

fn exit_summary(
    stats: &ExitStatistics,
    center: Option<&[f64]>,
    delta: Option<f64>,
) -> Result<ExitSummary> {
    let exited = stats.trials() - stats.censored;
    if exited == 0 {
        return Err(switchdiff::Error::Degenerate(
            "no trial exited; nothing to summarize".into(),
        ));
    }
    let (mean_tau, tau_se) = stats.mean_exit_time();
    let modes = stats.records.first().map_or(0, |r| r.occupation.len());
    let mode_probabilities = (0..modes).map(|k| stats.mode_probability(k).0).collect();
    let near = match (center, delta) {
        (Some(c), Some(d)) => {
            let (p, se) = stats.probability_near(c, d);
            Some(NearSummary {
                center: c.to_vec(),
                delta: d,
                probability: p,
                se,
                far_probability: 1.0 - p,
            })
        }
        _ => None,
    };
    Ok(ExitSummary {
        eps: stats.eps,
        trials: stats.trials(),
        exited,
        censored: stats.censored,
        mean_exit_time: mean_tau,
        mean_exit_time_se: tau_se,
        mean_occupation: stats.mean_occupation_fractions()?,
        mode_probabilities,
        near,
    })
}

/// Print a JSON document and optionally also write it to a file.
fn emit_json(text: &str, out: &Option<PathBuf>) -> Result<()> {
    print!("{text}");
    if let Some(path) = out {
        write_text(&resolve_out(path), text)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Validate {
            model,
            samples,
            seed,
            out,
        } => {
            let spec = ModelSpec::from_toml_file(&model)?;
            let report = validate_model(&spec, samples, seed)?;
            emit_json(&to_json_pretty(&report)?, &out)?;
            Ok(if report.passed() { 0 } else { 1 })
        }
        Command::AveragedFlow {
            model,
            z0,
            t_end,
            dt,
            out,
        } => {
            let spec = ModelSpec::from_toml_file(&model)?;
            let start = z0.unwrap_or_else(|| spec.domain.box_center());
            let flow = integrate_averaged(&spec, &start, t_end, dt.unwrap_or(t_end / 1000.0))?;
            let mut columns = vec!["t".to_string()];
            for i in 1..=spec.dim() {
                columns.push(format!("z{i}"));
            }
            let mut table = Table::new(columns);
            for (t, z) in flow.times.iter().zip(&flow.positions) {
                let mut row = vec![*t];
                row.extend_from_slice(z);
                table.push(row);
            }
            write_text(&resolve_out(&out), &table.to_csv())?;
            Ok(0)
        }
        Command::Simulate {
            model,
            eps,
            delta_hat,
            dt,
            t_max,
            seed,
            trials,
            z0,
            mode,
            paths,
            out,
        } => {
            let spec = ModelSpec::from_toml_file(&model)?;
            let mut cfg = SimConfig::new(eps);
            cfg.delta_hat = delta_hat;
            if let Some(dt) = dt {
                cfg.dt = dt;
            }
            cfg.t_max = t_max;
            cfg.seed = seed;
            cfg.trials = trials;
            let start = z0.unwrap_or_else(|| spec.domain.box_center());
            if mode == 0 {
                return Err(switchdiff::Error::Config(
                    "--mode is 1-based; 0 is not a mode".into(),
                ));
            }
            let dir = resolve_out(&out);
            let stats = batch_exit_mc(&spec, &cfg, &start, mode - 1)?;
            write_text(&dir.join("exits.csv"), &stats.to_csv())?;
            if paths > 0 {
                let mut columns = vec!["trial".to_string(), "t".to_string()];
                for i in 1..=spec.dim() {
                    columns.push(format!("z{i}"));
                }
                columns.push("mode".into());
                let mut table = Table::new(columns);
                for trial in 0..paths.min(trials) {
                    let record = simulate_until_exit(&spec, &cfg, &start, mode - 1, trial)?;
                    for ((t, z), k) in record
                        .times
                        .iter()
                        .zip(&record.positions)
                        .zip(&record.modes)
                    {
                        let mut row = vec![trial as f64, *t];
                        row.extend_from_slice(z);
                        row.push((k + 1) as f64);
                        table.push(row);
                    }
                }
                write_text(&dir.join("paths.csv"), &table.to_csv())?;
            }
            let summary = exit_summary(&stats, None, None)?;
            print!("{}", to_json_pretty(&summary)?);
            Ok(0)
        }
        Command::ExitStats {
            input,
            eps,
            center,
            delta,
            out,
        } => {
            let text = output::read_text(&input)?;
            let stats = ExitStatistics::from_csv(&text, eps)?;
            let summary = exit_summary(&stats, center.as_deref(), delta)?;
            emit_json(&to_json_pretty(&summary)?, &out)?;
            Ok(0)
        }
        Command::LdpVerify {
            model,
            eps,
            delta_hat,
            samples,
            seed,
            out,
        } => {
            let spec = ModelSpec::from_toml_file(&model)?;
            let report = verify_invariants(&spec, eps, delta_hat, samples, seed)?;
            emit_json(&to_json_pretty(&report)?, &out)?;
            Ok(if report.passed() { 0 } else { 1 })
        }
        Command::Action {
            model,
            path,
            mode,
            eps,
            delta_hat,
            schedule,
            out,
        } => {
            let spec = ModelSpec::from_toml_file(&model)?;
            let text = output::read_text(&path)?;
            let disc = PathDiscretization::from_csv(&text)?;
            let opts = ActionOptions::default();
            let (kind, value) = match mode {
                ActionKind::S => ("S", joint_action(&spec, &disc, eps, delta_hat, &opts)?),
                ActionKind::I => ("I", position_action(&spec, &disc, eps, delta_hat, &opts)?),
                ActionKind::Timed => {
                    let schedule_path = schedule.ok_or_else(|| {
                        switchdiff::Error::Config(
                            "--schedule is required for the timed action".into(),
                        )
                    })?;
                    let sched = RateSchedule::from_toml_file(&schedule_path)?;
                    (
                        "timed",
                        scheduled_action(&spec, &disc, &sched, eps, delta_hat, &opts)?,
                    )
                }
            };
            #[derive(Serialize)]
            struct ActionOut<'a> {
                kind: &'a str,
                #[serde(flatten)]
                value: switchdiff::ldp::ActionValue,
            }
            emit_json(&to_json_pretty(&ActionOut { kind, value })?, &out)?;
            Ok(0)
        }
        Command::Quasipotential {
            model,
            eps,
            delta_hat,
            boundary_samples,
            t_grid,
            segments,
            starts,
            max_iter,
            seed,
            out,
        } => {
            let spec = ModelSpec::from_toml_file(&model)?;
            let opts = MinimizerOptions {
                segments,
                starts,
                max_iter,
                seed,
                ..MinimizerOptions::default()
            };
            let grid = t_grid.unwrap_or_else(|| geometric_grid(0.5, 6.0, 6));
            let profile =
                find_exit_minimizer(&spec, eps, delta_hat, boundary_samples, &grid, &opts)?;
            emit_json(&to_json_pretty(&profile)?, &out)?;
            Ok(0)
        }
        Command::Dirichlet {
            model,
            eps,
            delta_hat,
            h,
            tol,
            out,
        } => {
            let spec = ModelSpec::from_toml_file(&model)?;
            let mut cfg = SolveConfig::new(eps);
            if let Some(dh) = delta_hat {
                cfg.delta_hat = dh;
            }
            cfg.h = h;
            cfg.tol = tol;
            let field = solve_dirichlet(&spec, &cfg)?;
            write_text(&resolve_out(&out), &field.to_csv())?;
            #[derive(Serialize)]
            struct SolveSummary {
                eps: f64,
                delta_hat: f64,
                h: f64,
                residual: f64,
                iterations: usize,
            }
            print!(
                "{}",
                to_json_pretty(&SolveSummary {
                    eps,
                    delta_hat: cfg.delta_hat,
                    h,
                    residual: field.residual,
                    iterations: field.iterations,
                })?
            );
            Ok(0)
        }
        Command::DirichletSweep {
            model,
            eps_list,
            probe,
            expected,
            h,
            tol,
            out,
        } => {
            let spec = ModelSpec::from_toml_file(&model)?;
            let first = *eps_list.first().ok_or_else(|| {
                switchdiff::Error::Config("--eps-list must not be empty".into())
            })?;
            let mut cfg = SolveConfig::new(first);
            cfg.h = h;
            cfg.tol = tol;
            let table = switchdiff::dirichlet::limit_sweep(&spec, &cfg, &eps_list, &probe, expected)?;
            emit_json(&to_json_pretty(&table)?, &out)?;
            Ok(0)
        }
        Command::Run { config, out_dir } => {
            let manifest = experiment::run_experiment(&config, out_dir.as_deref())?;
            print!("{}", to_json_pretty(&manifest)?);
            Ok(if manifest.all_ok() { 0 } else { 1 })
        }
        Command::VerifyProp2 {
            dir,
            delta,
            mode_threshold,
            out,
        } => {
            let report = experiment::verify_prop2_dir(&dir, delta, mode_threshold)?;
            emit_json(&to_json_pretty(&report)?, &out)?;
            Ok(if report.passed { 0 } else { 1 })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
