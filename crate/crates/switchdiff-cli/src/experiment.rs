//! Declarative multi-stage experiments: a TOML config names the model, a
//! root seed, and a stage list; stages run in the listed order, write
//! deterministic CSV/JSON artifacts, and a manifest records what happened.
//!
//! Every stage derives its random streams from the root seed and the stage
//! name, so re-running an identical config reproduces every numerical
//! output byte for byte.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use switchdiff::dirichlet::{limit_sweep, SolveConfig, SweepTable};
use switchdiff::model::ModelSpec;
use switchdiff::quasipotential::{
    find_exit_minimizer, geometric_grid, ExitProfile, MinimizerOptions,
};
use switchdiff::rng::stage_seed;
use switchdiff::sim::{batch_exit_mc, ExitStatistics, SimConfig};
use switchdiff::{Error, Result};

use crate::output::{read_text, to_json_pretty, write_text, Table};

fn default_out_dir() -> String {
    "out".into()
}

fn default_true() -> bool {
    true
}

fn default_boundary_samples() -> usize {
    32
}

fn default_segments() -> usize {
    12
}

fn default_starts() -> usize {
    2
}

fn default_max_iter() -> usize {
    160
}

fn default_mode_threshold() -> f64 {
    0.9
}

/// One declarative experiment: model, root seed, output options, stages.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Model configuration file, resolved relative to the experiment file.
    pub model: String,
    /// Root seed; stages derive their streams from it by name. Required, so
    /// no run ever depends on wall-clock state.
    pub seed: u64,
    /// Output directory, resolved relative to the working directory unless
    /// overridden on the command line or through the environment.
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default = "default_true")]
    pub emit_csv: bool,
    #[serde(default = "default_true")]
    pub emit_json: bool,
    #[serde(default, rename = "stage")]
    pub stages: Vec<StageSpec>,
}

/// Stage descriptions. `kind` selects the variant; unknown keys are errors.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StageSpec {
    /// Boundary quasipotential profile and exit-point analysis.
    Quasipotential {
        eps: f64,
        /// Slow-noise rate for the action; defaults to `eps^2`.
        delta_hat: Option<f64>,
        #[serde(default = "default_boundary_samples")]
        boundary_samples: usize,
        /// Horizon grid for the outer infimum; defaults to a geometric grid
        /// from 0.5 to 6 with 6 points.
        t_grid: Option<Vec<f64>>,
        #[serde(default = "default_segments")]
        segments: usize,
        #[serde(default = "default_starts")]
        starts: usize,
        #[serde(default = "default_max_iter")]
        max_iter: usize,
    },
    /// Exit-time Monte Carlo over a decreasing list of `eps`.
    ExitMc {
        eps_list: Vec<f64>,
        trials: u64,
        /// Slow-noise rate; defaults to zero (the unregularized process).
        #[serde(default)]
        delta_hat: f64,
        /// Step factor: `dt = eps * dt_factor`; defaults to 0.1.
        dt_factor: Option<f64>,
        /// Censoring horizon; defaults to 1e3.
        t_max: Option<f64>,
        /// Start position; defaults to the stationary point found by an
        /// earlier quasipotential stage, else the domain box center.
        z0: Option<Vec<f64>>,
        /// Start mode, 1-based; defaults to 1.
        mode0: Option<usize>,
    },
    /// Dirichlet probe values along a decreasing list of `eps` with
    /// `delta_hat = eps^2`.
    DirichletSweep {
        eps_list: Vec<f64>,
        probe: Vec<f64>,
        h: Option<f64>,
        tol: Option<f64>,
    },
    /// Exit-localization verdicts from the quasipotential profile and the
    /// exit batches of the earlier stages.
    Prop2 {
        delta: f64,
        #[serde(default = "default_mode_threshold")]
        mode_threshold: f64,
    },
}

impl StageSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            StageSpec::Quasipotential { .. } => "quasipotential",
            StageSpec::ExitMc { .. } => "exit-mc",
            StageSpec::DirichletSweep { .. } => "dirichlet-sweep",
            StageSpec::Prop2 { .. } => "prop2",
        }
    }

    /// Validate this stage's parameters; `at` names the stage for messages.
    fn validate(&self, at: &str) -> Result<()> {
        let bad = |key: &str, why: &str| -> Result<()> {
            Err(Error::Config(format!("{at}.{key} {why}")))
        };
        match self {
            StageSpec::Quasipotential {
                eps,
                delta_hat,
                boundary_samples,
                t_grid,
                segments,
                starts,
                ..
            } => {
                if !(*eps > 0.0) {
                    return bad("eps", "must be positive");
                }
                if let Some(dh) = delta_hat {
                    if !(*dh >= 0.0) {
                        return bad("delta_hat", "must be nonnegative");
                    }
                }
                if *boundary_samples < 2 {
                    return bad("boundary_samples", "must be at least 2");
                }
                if let Some(grid) = t_grid {
                    if grid.is_empty() || grid.iter().any(|t| !(*t > 0.0)) {
                        return bad("t_grid", "must be a nonempty list of positive horizons");
                    }
                }
                if *segments < 8 {
                    return bad("segments", "must be at least 8");
                }
                if *starts == 0 {
                    return bad("starts", "must be positive");
                }
                Ok(())
            }
            StageSpec::ExitMc {
                eps_list,
                trials,
                delta_hat,
                dt_factor,
                t_max,
                mode0,
                ..
            } => {
                if eps_list.is_empty() {
                    return bad("eps_list", "must not be empty");
                }
                if eps_list.iter().any(|e| !(*e > 0.0)) {
                    return bad("eps_list", "entries must be positive");
                }
                if eps_list.windows(2).any(|w| !(w[1] < w[0])) {
                    return bad("eps_list", "must be strictly decreasing");
                }
                if *trials == 0 {
                    return bad("trials", "must be positive");
                }
                if !(*delta_hat >= 0.0) {
                    return bad("delta_hat", "must be nonnegative");
                }
                if let Some(f) = dt_factor {
                    if !(*f > 0.0) {
                        return bad("dt_factor", "must be positive");
                    }
                }
                if let Some(t) = t_max {
                    if !(*t > 0.0) {
                        return bad("t_max", "must be positive");
                    }
                }
                if mode0 == &Some(0) {
                    return bad("mode0", "is 1-based; 0 is not a mode");
                }
                Ok(())
            }
            StageSpec::DirichletSweep {
                eps_list,
                probe,
                h,
                tol,
            } => {
                if eps_list.is_empty() {
                    return bad("eps_list", "must not be empty");
                }
                if eps_list.windows(2).any(|w| !(w[1] < w[0])) {
                    return bad("eps_list", "must be strictly decreasing");
                }
                if probe.is_empty() {
                    return bad("probe", "must give the probe coordinates");
                }
                if let Some(h) = h {
                    if !(*h > 0.0) {
                        return bad("h", "must be positive");
                    }
                }
                if let Some(tol) = tol {
                    if !(*tol > 0.0) {
                        return bad("tol", "must be positive");
                    }
                }
                Ok(())
            }
            StageSpec::Prop2 {
                delta,
                mode_threshold,
            } => {
                if !(*delta > 0.0) {
                    return bad("delta", "must be positive");
                }
                if !(*mode_threshold > 0.0 && *mode_threshold <= 1.0) {
                    return bad("mode_threshold", "must lie in (0, 1]");
                }
                Ok(())
            }
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Validate every stage before anything runs, including the cross-stage
    /// dependencies of the prop2 verdict stage.
    pub fn validate(&self) -> Result<()> {
        let mut have_profile = false;
        let mut have_exits = false;
        for (i, stage) in self.stages.iter().enumerate() {
            let at = format!("stage[{i}] ({})", stage.kind());
            stage.validate(&at)?;
            match stage {
                StageSpec::Quasipotential { .. } => have_profile = true,
                StageSpec::ExitMc { eps_list, .. } => {
                    have_exits = eps_list.len() >= 3;
                }
                StageSpec::Prop2 { .. } => {
                    if !have_profile {
                        return Err(Error::Config(format!(
                            "{at}: needs an earlier quasipotential stage"
                        )));
                    }
                    if !have_exits {
                        return Err(Error::Config(format!(
                            "{at}: needs an earlier exit-mc stage with at least 3 eps values"
                        )));
                    }
                }
                StageSpec::DirichletSweep { .. } => {}
            }
        }
        Ok(())
    }
}

/// Record of one executed run: config fingerprint, per-stage status and
/// outputs. Wall times vary between runs; the numerical artifacts do not.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    /// SHA-256 of the experiment config file.
    pub config_hash: String,
    pub version: String,
    pub out_dir: String,
    pub stages: Vec<StageStatus>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageStatus {
    pub kind: String,
    /// "ok", "failed: reason", or "skipped: reason".
    pub status: String,
    pub wall_ms: u64,
    /// Files written by this stage, relative to the output directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn all_ok(&self) -> bool {
        self.stages.iter().all(|s| s.status == "ok")
    }
}

/// Per-`eps` estimates for the exit-localization check, plus verdicts.
#[derive(Debug, Clone, Serialize)]
pub struct Prop2Report {
    pub delta: f64,
    /// Predicted exit location (the boundary quasipotential minimizer).
    pub center: Vec<f64>,
    /// Predicted exit mode, 1-based as in the exits CSV.
    pub mode: usize,
    pub mode_threshold: f64,
    pub rows: Vec<Prop2Row>,
    /// Far-exit probability non-increasing along the decreasing eps list.
    pub monotone_far: bool,
    /// Exit-mode probability at the smallest eps clears the threshold.
    pub final_mode_ok: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Prop2Row {
    pub eps: f64,
    pub trials: usize,
    pub exited: usize,
    /// Fraction of exits farther than `delta` from the predicted location,
    /// with binomial standard error.
    pub far_probability: f64,
    pub far_se: f64,
    /// Fraction of exits in the predicted mode, with standard error.
    pub mode_probability: f64,
    pub mode_se: f64,
}

/// Build the exit-localization report from a profile and exit batches.
/// `mode` is the predicted exit mode, 0-based; batches must cover at least
/// three strictly decreasing `eps`.
pub fn prop2_report(
    center: &[f64],
    mode: usize,
    batches: &[(f64, ExitStatistics)],
    delta: f64,
    mode_threshold: f64,
) -> Result<Prop2Report> {
    if batches.len() < 3 {
        return Err(Error::Config(format!(
            "exit-localization check needs at least 3 eps batches, got {}",
            batches.len()
        )));
    }
    if batches.windows(2).any(|w| !(w[1].0 < w[0].0)) {
        return Err(Error::Config(
            "exit batches must come in strictly decreasing eps order".into(),
        ));
    }
    let mut rows = Vec::with_capacity(batches.len());
    for (eps, stats) in batches {
        let exited = stats.trials() - stats.censored;
        if exited == 0 {
            return Err(Error::Degenerate(format!(
                "no trials exited at eps = {eps}; raise t_max"
            )));
        }
        let (near, near_se) = stats.probability_near(center, delta);
        let (mode_p, mode_se) = stats.mode_probability(mode);
        rows.push(Prop2Row {
            eps: *eps,
            trials: stats.trials(),
            exited,
            far_probability: 1.0 - near,
            far_se: near_se,
            mode_probability: mode_p,
            mode_se,
        });
    }
    let monotone_far = rows
        .windows(2)
        .all(|w| w[1].far_probability <= w[0].far_probability);
    let final_mode_ok = rows.last().unwrap().mode_probability >= mode_threshold;
    Ok(Prop2Report {
        delta,
        center: center.to_vec(),
        mode: mode + 1,
        mode_threshold,
        rows,
        monotone_far,
        final_mode_ok,
        passed: monotone_far && final_mode_ok,
    })
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Deterministic text form of an `eps` value for file names and stage names.
fn eps_tag(eps: f64) -> String {
    format!("{eps}")
}

fn exits_table(stats: &ExitStatistics) -> Table {
    let dim = stats.records.first().map_or(0, |r| r.position.len());
    let modes = stats.records.first().map_or(0, |r| r.occupation.len());
    let mut columns = vec!["tau".to_string()];
    for i in 1..=dim {
        columns.push(format!("z{i}"));
    }
    columns.push("mode".into());
    for k in 1..=modes {
        columns.push(format!("r{k}"));
    }
    let mut table = Table::new(columns);
    for r in stats.exited() {
        let mut row = Vec::with_capacity(2 + dim + modes);
        row.push(r.time);
        row.extend_from_slice(&r.position);
        row.push((r.mode + 1) as f64);
        row.extend_from_slice(&r.occupation);
        table.push(row);
    }
    table
}

fn sweep_csv(table: &SweepTable) -> String {
    let modes = table.rows.first().map_or(0, |r| r.values.len());
    let mut columns = vec!["eps".to_string(), "delta_hat".to_string()];
    for k in 1..=modes {
        columns.push(format!("v{k}"));
    }
    if table.expected.is_some() {
        for k in 1..=modes {
            columns.push(format!("dev{k}"));
        }
    }
    columns.push("spread".into());
    columns.push("residual".into());
    columns.push("iterations".into());
    let mut out = Table::new(columns);
    for row in &table.rows {
        let mut cells = vec![row.eps, row.delta_hat];
        cells.extend_from_slice(&row.values);
        if let Some(dev) = &row.deviations {
            cells.extend_from_slice(dev);
        }
        cells.push(row.spread);
        cells.push(row.residual);
        cells.push(row.iterations as f64);
        out.push(cells);
    }
    out.to_csv()
}

/// Artifacts the stages hand to their dependents.
#[derive(Default)]
struct StageData {
    profile: Option<ExitProfile>,
    batches: Vec<(f64, ExitStatistics)>,
}

struct StageRun {
    outputs: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
fn run_quasipotential(
    spec: &ModelSpec,
    root_seed: u64,
    out_dir: &Path,
    emit_csv: bool,
    eps: f64,
    delta_hat: Option<f64>,
    boundary_samples: usize,
    t_grid: &Option<Vec<f64>>,
    segments: usize,
    starts: usize,
    max_iter: usize,
    data: &mut StageData,
) -> Result<StageRun> {
    let opts = MinimizerOptions {
        segments,
        starts,
        max_iter,
        seed: stage_seed(root_seed, "quasipotential"),
        ..MinimizerOptions::default()
    };
    let dh = delta_hat.unwrap_or(eps * eps);
    let grid = match t_grid {
        Some(g) => g.clone(),
        None => geometric_grid(0.5, 6.0, 6),
    };
    let profile = find_exit_minimizer(spec, eps, dh, boundary_samples, &grid, &opts)?;
    let mut outputs = Vec::new();
    write_text(
        &out_dir.join("quasipotential.json"),
        &to_json_pretty(&profile)?,
    )?;
    outputs.push("quasipotential.json".into());
    if emit_csv {
        let dim = spec.dim();
        let mut columns: Vec<String> = (1..=dim).map(|i| format!("z{i}")).collect();
        columns.push("value".into());
        let mut table = Table::new(columns);
        for (s, v) in profile.samples.iter().zip(&profile.values) {
            let mut row = s.clone();
            row.push(*v);
            table.push(row);
        }
        write_text(&out_dir.join("profile.csv"), &table.to_csv())?;
        outputs.push("profile.csv".into());
    }
    data.profile = Some(profile);
    Ok(StageRun { outputs })
}

#[allow(clippy::too_many_arguments)]
fn run_exit_mc(
    spec: &ModelSpec,
    root_seed: u64,
    out_dir: &Path,
    emit_csv: bool,
    emit_json: bool,
    eps_list: &[f64],
    trials: u64,
    delta_hat: f64,
    dt_factor: Option<f64>,
    t_max: Option<f64>,
    z0: &Option<Vec<f64>>,
    mode0: Option<usize>,
    data: &mut StageData,
) -> Result<StageRun> {
    let start: Vec<f64> = match (z0, &data.profile) {
        (Some(z), _) => z.clone(),
        (None, Some(p)) => p.stationary.clone(),
        (None, None) => spec.domain.box_center(),
    };
    let mode = mode0.unwrap_or(1) - 1;
    let mut outputs = Vec::new();
    data.batches.clear();
    for &eps in eps_list {
        let mut sim = SimConfig::new(eps);
        sim.delta_hat = delta_hat;
        sim.dt = eps * dt_factor.unwrap_or(0.1);
        sim.t_max = t_max.unwrap_or(1e3);
        sim.trials = trials;
        sim.seed = stage_seed(root_seed, &format!("exit-mc:{}", eps_tag(eps)));
        let stats = batch_exit_mc(spec, &sim, &start, mode)?;
        let base = format!("exits_eps{}", eps_tag(eps));
        if emit_csv {
            write_text(&out_dir.join(format!("{base}.csv")), &stats.to_csv())?;
            outputs.push(format!("{base}.csv"));
        }
        if emit_json {
            write_text(
                &out_dir.join(format!("{base}.json")),
                &exits_table(&stats).to_json(),
            )?;
            outputs.push(format!("{base}.json"));
        }
        data.batches.push((eps, stats));
    }
    Ok(StageRun { outputs })
}

fn run_dirichlet_sweep(
    spec: &ModelSpec,
    out_dir: &Path,
    emit_csv: bool,
    eps_list: &[f64],
    probe: &[f64],
    h: Option<f64>,
    tol: Option<f64>,
    data: &StageData,
) -> Result<StageRun> {
    let mut cfg = SolveConfig::new(eps_list[0]);
    if let Some(h) = h {
        cfg.h = h;
    }
    if let Some(tol) = tol {
        cfg.tol = tol;
    }
    let expected = match &data.profile {
        Some(p) => Some(spec.boundary_at(p.dominant_mode, &p.minimizer)?),
        None => None,
    };
    let table = limit_sweep(spec, &cfg, eps_list, probe, expected)?;
    let mut outputs = Vec::new();
    write_text(&out_dir.join("sweep.json"), &to_json_pretty(&table)?)?;
    outputs.push("sweep.json".into());
    if emit_csv {
        write_text(&out_dir.join("sweep.csv"), &sweep_csv(&table))?;
        outputs.push("sweep.csv".into());
    }
    Ok(StageRun { outputs })
}

fn run_prop2(
    out_dir: &Path,
    delta: f64,
    mode_threshold: f64,
    data: &StageData,
) -> Result<StageRun> {
    let profile = data.profile.as_ref().ok_or_else(|| {
        Error::Config("exit-localization stage needs a completed quasipotential stage".into())
    })?;
    if data.batches.is_empty() {
        return Err(Error::Config(
            "exit-localization stage needs completed exit batches".into(),
        ));
    }
    let report = prop2_report(
        &profile.minimizer,
        profile.dominant_mode,
        &data.batches,
        delta,
        mode_threshold,
    )?;
    write_text(&out_dir.join("prop2.json"), &to_json_pretty(&report)?)?;
    Ok(StageRun {
        outputs: vec!["prop2.json".into()],
    })
}

/// Run an experiment config file. Stages execute in listed order; a failed
/// stage fails the run but later independent stages still execute, while
/// stages that need its outputs are skipped. The manifest is always
/// written. Returns the manifest; `all_ok` tells the caller whether every
/// stage succeeded.
pub fn run_experiment(config_path: &Path, out_override: Option<&Path>) -> Result<RunManifest> {
    let raw = read_text(config_path)?;
    let cfg = ExperimentConfig::from_toml_str(&raw)?;
    let config_dir = config_path.parent().unwrap_or_else(|| Path::new("."));
    let model_path = config_dir.join(&cfg.model);
    let spec = ModelSpec::from_toml_file(&model_path)?;

    let out_dir: PathBuf = match out_override {
        Some(dir) => dir.to_path_buf(),
        None => crate::output::resolve_out(Path::new(&cfg.out_dir)),
    };
    std::fs::create_dir_all(&out_dir).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", out_dir.display()),
        ))
    })?;

    let mut data = StageData::default();
    let mut stages = Vec::with_capacity(cfg.stages.len());
    let mut profile_ok = false;
    let mut exits_ok = false;
    for stage in &cfg.stages {
        let kind = stage.kind().to_string();
        let skip_reason = match stage {
            StageSpec::Prop2 { .. } if !profile_ok => {
                Some("skipped: quasipotential stage did not complete".to_string())
            }
            StageSpec::Prop2 { .. } if !exits_ok => {
                Some("skipped: exit-mc stage did not complete".to_string())
            }
            _ => None,
        };
        if let Some(reason) = skip_reason {
            stages.push(StageStatus {
                kind,
                status: reason,
                wall_ms: 0,
                outputs: Vec::new(),
            });
            continue;
        }
        let started = Instant::now();
        let outcome = match stage {
            StageSpec::Quasipotential {
                eps,
                delta_hat,
                boundary_samples,
                t_grid,
                segments,
                starts,
                max_iter,
            } => run_quasipotential(
                &spec,
                cfg.seed,
                &out_dir,
                cfg.emit_csv,
                *eps,
                *delta_hat,
                *boundary_samples,
                t_grid,
                *segments,
                *starts,
                *max_iter,
                &mut data,
            ),
            StageSpec::ExitMc {
                eps_list,
                trials,
                delta_hat,
                dt_factor,
                t_max,
                z0,
                mode0,
            } => run_exit_mc(
                &spec,
                cfg.seed,
                &out_dir,
                cfg.emit_csv,
                cfg.emit_json,
                eps_list,
                *trials,
                *delta_hat,
                *dt_factor,
                *t_max,
                z0,
                *mode0,
                &mut data,
            ),
            StageSpec::DirichletSweep {
                eps_list,
                probe,
                h,
                tol,
            } => run_dirichlet_sweep(
                &spec,
                &out_dir,
                cfg.emit_csv,
                eps_list,
                probe,
                *h,
                *tol,
                &data,
            ),
            StageSpec::Prop2 {
                delta,
                mode_threshold,
            } => run_prop2(&out_dir, *delta, *mode_threshold, &data),
        };
        let wall_ms = started.elapsed().as_millis() as u64;
        match outcome {
            Ok(run) => {
                match stage {
                    StageSpec::Quasipotential { .. } => profile_ok = true,
                    StageSpec::ExitMc { eps_list, .. } => exits_ok = eps_list.len() >= 3,
                    _ => {}
                }
                stages.push(StageStatus {
                    kind,
                    status: "ok".into(),
                    wall_ms,
                    outputs: run.outputs,
                });
            }
            Err(e) => {
                stages.push(StageStatus {
                    kind,
                    status: format!("failed: {e}"),
                    wall_ms,
                    outputs: Vec::new(),
                });
            }
        }
    }

    let manifest = RunManifest {
        config_hash: sha256_hex(raw.as_bytes()),
        version: env!("CARGO_PKG_VERSION").to_string(),
        out_dir: out_dir.display().to_string(),
        stages,
    };
    write_text(&out_dir.join("manifest.json"), &to_json_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Standalone verdict from a finished run directory: reads the profile and
/// the exit CSVs named by the manifest and rebuilds the report.
pub fn verify_prop2_dir(dir: &Path, delta: f64, mode_threshold: f64) -> Result<Prop2Report> {
    let manifest_text = read_text(&dir.join("manifest.json"))?;
    let manifest: serde_json::Value = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::Config(format!("manifest.json: {e}")))?;
    let profile_text = read_text(&dir.join("quasipotential.json"))?;
    let profile: serde_json::Value = serde_json::from_str(&profile_text)
        .map_err(|e| Error::Config(format!("quasipotential.json: {e}")))?;
    let center: Vec<f64> = profile["minimizer"]
        .as_array()
        .ok_or_else(|| Error::Config("quasipotential.json lacks a minimizer".into()))?
        .iter()
        .filter_map(|v| v.as_f64())
        .collect();
    let mode = profile["dominant_mode"]
        .as_u64()
        .ok_or_else(|| Error::Config("quasipotential.json lacks a dominant mode".into()))?
        as usize;

    let mut batches = Vec::new();
    let stages = manifest["stages"]
        .as_array()
        .ok_or_else(|| Error::Config("manifest.json lacks a stage list".into()))?;
    for stage in stages {
        if stage["kind"].as_str() != Some("exit-mc") || stage["status"].as_str() != Some("ok") {
            continue;
        }
        for output in stage["outputs"].as_array().into_iter().flatten() {
            let Some(name) = output.as_str() else { continue };
            let Some(tag) = name
                .strip_prefix("exits_eps")
                .and_then(|s| s.strip_suffix(".csv"))
            else {
                continue;
            };
            let eps: f64 = tag
                .parse()
                .map_err(|_| Error::Config(format!("unparsable eps in output name {name}")))?;
            let text = read_text(&dir.join(name))?;
            batches.push((eps, ExitStatistics::from_csv(&text, eps)?));
        }
    }
    batches.sort_by(|a, b| b.0.total_cmp(&a.0));
    prop2_report(&center, mode, &batches, delta, mode_threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_bad_stages_before_running() {
        let text = r#"
model = "model.toml"
seed = 7
[[stage]]
kind = "exit-mc"
eps_list = [0.1, 0.2]
trials = 10
"#;
        let err = ExperimentConfig::from_toml_str(text).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("eps_list"), "message should name the key: {msg}");
    }

    #[test]
    fn config_requires_seed() {
        let text = "model = \"model.toml\"\n";
        assert!(ExperimentConfig::from_toml_str(text).is_err());
    }

    #[test]
    fn prop2_stage_needs_dependencies_listed_first() {
        let text = r#"
model = "model.toml"
seed = 7
[[stage]]
kind = "prop2"
delta = 0.15
"#;
        let err = format!("{}", ExperimentConfig::from_toml_str(text).unwrap_err());
        assert!(err.contains("quasipotential"), "{err}");
    }

    #[test]
    fn unknown_stage_keys_are_errors() {
        let text = r#"
model = "model.toml"
seed = 7
[[stage]]
kind = "dirichlet-sweep"
eps_list = [0.2, 0.1]
probe = [0.0]
bogus = 1
"#;
        let err = format!("{}", ExperimentConfig::from_toml_str(text).unwrap_err());
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn sha256_matches_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn empty_stage_list_is_valid() {
        let cfg = ExperimentConfig::from_toml_str("model = \"m.toml\"\nseed = 1\n").unwrap();
        assert!(cfg.stages.is_empty());
        assert!(cfg.emit_csv && cfg.emit_json);
    }
}
