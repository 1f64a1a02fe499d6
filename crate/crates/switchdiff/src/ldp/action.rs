//! Action functionals over discretized paths.
//!
//! A path is a sequence of states on an increasing time grid starting at
//! zero, optionally carrying cumulative occupation times `mu_k(t)` per
//! mode. Actions integrate a running cost over the path with midpoint
//! coefficients and forward-difference velocities on each segment:
//!
//! * [`joint_action`]: integral of `eta(z, zdot, mudot)`; needs the
//!   occupation component.
//! * [`position_action`]: integral of `rho(z, zdot)`; ignores occupation.
//! * [`scheduled_action`]: like `joint_action` but with switching
//!   intensities taken from a time schedule instead of the model.
//!
//! Segment costs are independent conjugate problems and run through the
//! data-parallel driver; each segment is warm-started from its own
//! previous solution when the same discretization is re-evaluated
//! (relevant for the path optimizer, which calls these per segment).

use crate::error::{Error, Result};
use crate::exec;
use crate::ldp::rate::{
    joint_rate_with, position_rate_with, ConjugateOptions, ConjugateSolution,
};
use crate::ldp::Hamiltonian;
use crate::model::{ModelSpec, RateSchedule};
use crate::switching::{weights_at, FlowPath};

/// A discretized path `(t_i, z_i)` with optional cumulative occupation
/// times `mu_i in R^K`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PathDiscretization {
    pub times: Vec<f64>,
    pub positions: Vec<Vec<f64>>,
    /// Cumulative occupation per mode; `mu[0] = 0`, each component
    /// nondecreasing, components summing to `t_i` at every node.
    pub occupation: Option<Vec<Vec<f64>>>,
}

impl PathDiscretization {
    pub fn new(
        times: Vec<f64>,
        positions: Vec<Vec<f64>>,
        occupation: Option<Vec<Vec<f64>>>,
    ) -> Result<PathDiscretization> {
        let path = PathDiscretization {
            times,
            positions,
            occupation,
        };
        path.validate()?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if n < 2 {
            return Err(Error::Config("a path needs at least two nodes".into()));
        }
        if self.positions.len() != n {
            return Err(Error::Dimension(format!(
                "{} positions for {n} times",
                self.positions.len()
            )));
        }
        if self.times[0] != 0.0 {
            return Err(Error::Config(format!(
                "path must start at t = 0, got {}",
                self.times[0]
            )));
        }
        for i in 1..n {
            if !(self.times[i] > self.times[i - 1]) {
                return Err(Error::Config(format!(
                    "times must increase strictly: t[{i}] = {} after {}",
                    self.times[i],
                    self.times[i - 1]
                )));
            }
        }
        let d = self.positions[0].len();
        if self.positions.iter().any(|z| z.len() != d) {
            return Err(Error::Dimension("ragged position rows".into()));
        }
        if let Some(mu) = &self.occupation {
            if mu.len() != n {
                return Err(Error::Dimension(format!(
                    "{} occupation rows for {n} times",
                    mu.len()
                )));
            }
            let k = mu[0].len();
            if mu.iter().any(|r| r.len() != k) {
                return Err(Error::Dimension("ragged occupation rows".into()));
            }
            for (j, v) in mu[0].iter().enumerate() {
                if v.abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "occupation must start at zero, mu[0][{j}] = {v}"
                    )));
                }
            }
            for i in 1..n {
                for j in 0..k {
                    if mu[i][j] < mu[i - 1][j] - 1e-9 {
                        return Err(Error::Config(format!(
                            "occupation component {j} decreases at node {i}"
                        )));
                    }
                }
                let total: f64 = mu[i].iter().sum();
                if (total - self.times[i]).abs() > 1e-6 * self.times[i].max(1.0) {
                    return Err(Error::Config(format!(
                        "occupation sums to {total} at t = {}, node {i}",
                        self.times[i]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> usize {
        self.times.len()
    }

    pub fn segments(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn dim(&self) -> usize {
        self.positions[0].len()
    }

    /// Attach the natural occupation component to a deterministic flow:
    /// the invariant weights of the mode chain integrated along the path
    /// by the trapezoid rule. Increments per node sum to the time step
    /// exactly, preserving the occupation invariants.
    pub fn from_flow(flow: &FlowPath, spec: &ModelSpec) -> Result<PathDiscretization> {
        let n = flow.times.len();
        let k = spec.modes;
        let mut weights = Vec::with_capacity(n);
        for z in &flow.positions {
            weights.push(weights_at(spec, z)?.weights);
        }
        let mut mu = vec![vec![0.0; k]; n];
        for i in 1..n {
            let dt = flow.times[i] - flow.times[i - 1];
            for j in 0..k {
                let inc = 0.5 * dt * (weights[i - 1][j] + weights[i][j]);
                mu[i][j] = mu[i - 1][j] + inc;
            }
        }
        PathDiscretization::new(flow.times.clone(), flow.positions.clone(), Some(mu))
    }

    /// Time reversal on the same grid; occupation increments are replayed
    /// backwards so the invariants keep holding.
    pub fn reversed(&self) -> PathDiscretization {
        let n = self.nodes();
        let horizon = self.horizon();
        let times: Vec<f64> = (0..n).map(|i| horizon - self.times[n - 1 - i]).collect();
        let positions: Vec<Vec<f64>> =
            (0..n).map(|i| self.positions[n - 1 - i].clone()).collect();
        let occupation = self.occupation.as_ref().map(|mu| {
            let k = mu[0].len();
            let mut out = vec![vec![0.0; k]; n];
            for i in 1..n {
                for j in 0..k {
                    let inc = mu[n - i][j] - mu[n - 1 - i][j];
                    out[i][j] = out[i - 1][j] + inc;
                }
            }
            out
        });
        PathDiscretization {
            times,
            positions,
            occupation,
        }
    }

    /// Serialize as CSV with header `t,z1,...,zd[,mu1,...,muK]`.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::from("t");
        for i in 1..=d {
            out.push_str(&format!(",z{i}"));
        }
        if let Some(mu) = &self.occupation {
            for j in 1..=mu[0].len() {
                out.push_str(&format!(",mu{j}"));
            }
        }
        out.push('\n');
        for i in 0..self.nodes() {
            out.push_str(&format!("{:.16e}", self.times[i]));
            for v in &self.positions[i] {
                out.push_str(&format!(",{v:.16e}"));
            }
            if let Some(mu) = &self.occupation {
                for v in &mu[i] {
                    out.push_str(&format!(",{v:.16e}"));
                }
            }
            out.push('\n');
        }
        out
    }

    /// Parse the CSV format emitted by [`PathDiscretization::to_csv`].
    pub fn from_csv(text: &str) -> Result<PathDiscretization> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::CsvFormat("empty path file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"t") {
            return Err(Error::CsvFormat(format!(
                "first column must be `t`, found `{}`",
                cols.first().unwrap_or(&"")
            )));
        }
        let d = cols.iter().filter(|c| c.starts_with('z')).count();
        let k = cols.iter().filter(|c| c.starts_with("mu")).count();
        let expected: Vec<String> = std::iter::once("t".to_string())
            .chain((1..=d).map(|i| format!("z{i}")))
            .chain((1..=k).map(|j| format!("mu{j}")))
            .collect();
        if cols != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::CsvFormat(format!(
                "header `{header}` does not match t,z1..z{d}[,mu1..mu{k}]"
            )));
        }
        let mut times = Vec::new();
        let mut positions = Vec::new();
        let mut occupation = if k > 0 { Some(Vec::new()) } else { None };
        for (lineno, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 1 + d + k {
                return Err(Error::CsvFormat(format!(
                    "line {}: {} fields, expected {}",
                    lineno + 2,
                    fields.len(),
                    1 + d + k
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| Error::CsvFormat(format!("line {}: bad number `{s}`", lineno + 2)))
            };
            times.push(parse(fields[0])?);
            positions.push(
                fields[1..1 + d]
                    .iter()
                    .map(|s| parse(s))
                    .collect::<Result<Vec<f64>>>()?,
            );
            if let Some(mu) = &mut occupation {
                mu.push(
                    fields[1 + d..]
                        .iter()
                        .map(|s| parse(s))
                        .collect::<Result<Vec<f64>>>()?,
                );
            }
        }
        PathDiscretization::new(times, positions, occupation)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ActionOptions {
    pub conjugate: ConjugateOptions,
}

impl Default for ActionOptions {
    fn default() -> Self {
        ActionOptions {
            conjugate: ConjugateOptions::default(),
        }
    }
}

/// An evaluated action: total value and the per-segment contributions.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ActionValue {
    pub total: f64,
    pub segments: Vec<f64>,
    /// False if any segment's conjugate solve hit its iteration cap.
    pub converged: bool,
}

fn segment_velocity(path: &PathDiscretization, i: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let dt = path.times[i + 1] - path.times[i];
    let d = path.dim();
    let mut mid = vec![0.0; d];
    let mut vel = vec![0.0; d];
    for j in 0..d {
        mid[j] = 0.5 * (path.positions[i][j] + path.positions[i + 1][j]);
        vel[j] = (path.positions[i + 1][j] - path.positions[i][j]) / dt;
    }
    (dt, mid, vel)
}

fn segment_beta(path: &PathDiscretization, i: usize) -> Vec<f64> {
    let mu = path.occupation.as_ref().expect("occupation checked by caller");
    let dt = path.times[i + 1] - path.times[i];
    mu[i + 1]
        .iter()
        .zip(&mu[i])
        .map(|(next, prev)| {
            let b = (next - prev) / dt;
            // Occupation increments can round to tiny negatives; clamp
            // them (validation already bounded the violation).
            if b < 0.0 && b > -1e-9 {
                0.0
            } else {
                b
            }
        })
        .collect()
}

fn collect_action(per_segment: Vec<Result<ConjugateSolution>>) -> Result<ActionValue> {
    let mut segments = Vec::with_capacity(per_segment.len());
    let mut converged = true;
    for r in per_segment {
        let sol = r?;
        converged &= sol.converged;
        segments.push(sol.value);
    }
    let total = segments.iter().sum();
    Ok(ActionValue {
        total,
        segments,
        converged,
    })
}

/// Integral of the joint running cost `eta` over the path; each segment
/// contributes `dt * eta(z_mid, dz/dt, dmu/dt)`.
pub fn joint_action(
    spec: &ModelSpec,
    path: &PathDiscretization,
    eps: f64,
    delta_hat: f64,
    opts: &ActionOptions,
) -> Result<ActionValue> {
    path.validate()?;
    if path.occupation.is_none() {
        return Err(Error::Config(
            "joint action needs a path with occupation times".into(),
        ));
    }
    let per_segment = exec::map_indexed(path.segments(), |i| {
        let (dt, mid, vel) = segment_velocity(path, i);
        let beta = segment_beta(path, i);
        let ham = Hamiltonian::at(spec, &mid, eps, delta_hat)?;
        let mut sol = joint_rate_with(&ham, &vel, &beta, &opts.conjugate, None)?;
        sol.value *= dt;
        Ok(sol)
    });
    collect_action(per_segment)
}

/// Integral of the position-only running cost `rho` over the path.
pub fn position_action(
    spec: &ModelSpec,
    path: &PathDiscretization,
    eps: f64,
    delta_hat: f64,
    opts: &ActionOptions,
) -> Result<ActionValue> {
    path.validate()?;
    let per_segment = exec::map_indexed(path.segments(), |i| {
        let (dt, mid, vel) = segment_velocity(path, i);
        let ham = Hamiltonian::at(spec, &mid, eps, delta_hat)?;
        let mut sol = position_rate_with(&ham, &vel, &opts.conjugate, None)?;
        sol.value *= dt;
        Ok(sol)
    });
    collect_action(per_segment)
}

/// Joint action with switching intensities taken from a time schedule:
/// segment `i` uses the scheduled rates at its midpoint time.
pub fn scheduled_action(
    spec: &ModelSpec,
    path: &PathDiscretization,
    schedule: &RateSchedule,
    eps: f64,
    delta_hat: f64,
    opts: &ActionOptions,
) -> Result<ActionValue> {
    path.validate()?;
    if path.occupation.is_none() {
        return Err(Error::Config(
            "scheduled action needs a path with occupation times".into(),
        ));
    }
    let per_segment = exec::map_indexed(path.segments(), |i| {
        let (dt, mid, vel) = segment_velocity(path, i);
        let t_mid = 0.5 * (path.times[i] + path.times[i + 1]);
        let beta = segment_beta(path, i);
        let ham = Hamiltonian::scheduled_at(spec, &mid, schedule, t_mid, eps, delta_hat)?;
        let mut sol = joint_rate_with(&ham, &vel, &beta, &opts.conjugate, None)?;
        sol.value *= dt;
        Ok(sol)
    });
    collect_action(per_segment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_model;
    use crate::switching::integrate_averaged;
    use std::collections::BTreeMap;

    fn const_coef() -> ModelSpec {
        builtin_model("const-coef", &BTreeMap::new()).unwrap()
    }

    fn straight_path(
        z0: [f64; 2],
        q: [f64; 2],
        beta: [f64; 2],
        t_end: f64,
        n: usize,
    ) -> PathDiscretization {
        let times: Vec<f64> = (0..=n).map(|i| t_end * i as f64 / n as f64).collect();
        let positions = times
            .iter()
            .map(|t| vec![z0[0] + q[0] * t, z0[1] + q[1] * t])
            .collect();
        let occupation = times
            .iter()
            .map(|t| vec![beta[0] * t, beta[1] * t])
            .collect();
        PathDiscretization::new(times, positions, Some(occupation)).unwrap()
    }

    #[test]
    fn joint_action_of_constant_velocity_path_is_t_times_eta() {
        // Constant coefficients, constant velocity and occupation rates:
        // every segment solves the same problem, so S = T * eta(q, beta),
        // and eta has the closed form checked in the rate tests.
        let spec = const_coef();
        let (eps, dh) = (0.2, 0.02);
        let q = [0.3, 0.25];
        let beta = [0.6, 0.4];
        let t_end = 1.5;
        let path = straight_path([0.0, 0.0], q, beta, t_end, 40);
        let action = joint_action(&spec, &path, eps, dh, &ActionOptions::default()).unwrap();
        let vmix = beta[0] * 1.0 + beta[1] * (-1.0);
        let eta = (q[0] - 0.3).powi(2) / (2.0 * dh / eps)
            + (q[1] - vmix).powi(2) / 2.0
            + ((beta[0] * 1.0_f64).sqrt() - (beta[1] * 1.0_f64).sqrt()).powi(2);
        let exact = t_end * eta;
        assert!(
            (action.total - exact).abs() < 1e-5 * (1.0 + exact),
            "{} vs {exact}",
            action.total
        );
        assert!(action.converged);
        assert_eq!(action.segments.len(), 40);
    }

    #[test]
    fn position_action_matches_ornstein_uhlenbeck_integral() {
        // I = int (q + z(t))^2 / 2 dt along z(t) = z0 + q t has the
        // antiderivative (A = q + z0): (A^2 T + A q T^2 + q^2 T^3 / 3)/2.
        let spec = builtin_model("ou-k1", &BTreeMap::new()).unwrap();
        let (z0, q, t_end) = (0.4, 0.5, 2.0);
        let n = 400;
        let times: Vec<f64> = (0..=n).map(|i| t_end * i as f64 / n as f64).collect();
        let positions = times.iter().map(|t| vec![z0 + q * t]).collect();
        let path = PathDiscretization::new(times, positions, None).unwrap();
        let action =
            position_action(&spec, &path, 0.3, 0.0, &ActionOptions::default()).unwrap();
        let a = q + z0;
        let exact = 0.5 * (a * a * t_end + a * q * t_end * t_end
            + q * q * t_end.powi(3) / 3.0);
        assert!(
            (action.total - exact).abs() < 1e-5 * exact,
            "{} vs {exact}",
            action.total
        );
    }

    #[test]
    fn averaged_flow_has_negligible_action_and_reversal_does_not() {
        let spec = builtin_model("two-mode-linear", &BTreeMap::new()).unwrap();
        let flow = integrate_averaged(&spec, &[0.3, 0.5], 2.0, 0.01).unwrap();
        let path = PathDiscretization::from_flow(&flow, &spec).unwrap();
        let along = joint_action(&spec, &path, 0.1, 0.01, &ActionOptions::default()).unwrap();
        assert!(along.total >= -1e-12);
        assert!(along.total < 1e-5, "flow action {}", along.total);
        let reversed = path.reversed();
        reversed.validate().unwrap();
        let back =
            position_action(&spec, &reversed, 0.1, 0.01, &ActionOptions::default()).unwrap();
        assert!(
            back.total > 1e3 * along.total.max(1e-9),
            "reversed action {} not much larger than {}",
            back.total,
            along.total
        );
    }

    #[test]
    fn scheduled_action_with_model_rates_recovers_joint_action() {
        let spec = const_coef();
        let sched = crate::model::RateSchedule::from_toml_str(
            "K = 2\n\n[rates]\nc12 = \"1\"\nc21 = \"1\"\n",
        )
        .unwrap();
        let path = straight_path([0.1, -0.2], [0.3, 0.4], [0.5, 0.5], 1.0, 16);
        let opts = ActionOptions::default();
        let s = joint_action(&spec, &path, 0.25, 0.025, &opts).unwrap();
        let s_hat = scheduled_action(&spec, &path, &sched, 0.25, 0.025, &opts).unwrap();
        assert!(
            (s.total - s_hat.total).abs() < 1e-12,
            "{} vs {}",
            s.total,
            s_hat.total
        );
        // A genuinely time-dependent schedule also evaluates finitely.
        let sched_t = crate::model::RateSchedule::from_toml_str(
            "K = 2\n\n[rates]\nc12 = \"1 + 0.5*sin(t)\"\nc21 = \"2 - t/10\"\n",
        )
        .unwrap();
        let s_t = scheduled_action(&spec, &path, &sched_t, 0.25, 0.025, &opts).unwrap();
        assert!(s_t.total.is_finite());
        assert_ne!(s_t.total, s.total);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let path = straight_path([0.12345, -0.6789], [0.31, -0.27], [0.7, 0.3], 0.9, 7);
        let text = path.to_csv();
        let back = PathDiscretization::from_csv(&text).unwrap();
        assert_eq!(path.times, back.times);
        assert_eq!(path.positions, back.positions);
        assert_eq!(path.occupation, back.occupation);
        // and again without occupation
        let bare = PathDiscretization::new(path.times.clone(), path.positions.clone(), None)
            .unwrap();
        let text = bare.to_csv();
        let back = PathDiscretization::from_csv(&text).unwrap();
        assert!(back.occupation.is_none());
        assert_eq!(bare.positions, back.positions);
    }

    #[test]
    fn validation_rejects_broken_paths() {
        // nonmonotone times
        assert!(PathDiscretization::new(
            vec![0.0, 0.5, 0.4],
            vec![vec![0.0], vec![0.1], vec![0.2]],
            None
        )
        .is_err());
        // occupation not summing to t
        assert!(PathDiscretization::new(
            vec![0.0, 1.0],
            vec![vec![0.0], vec![0.1]],
            Some(vec![vec![0.0, 0.0], vec![0.3, 0.3]])
        )
        .is_err());
        // decreasing occupation component
        assert!(PathDiscretization::new(
            vec![0.0, 1.0, 2.0],
            vec![vec![0.0], vec![0.1], vec![0.2]],
            Some(vec![vec![0.0, 0.0], vec![0.8, 0.2], vec![0.7, 1.3]])
        )
        .is_err());
        // nonzero start time
        assert!(PathDiscretization::new(
            vec![1.0, 2.0],
            vec![vec![0.0], vec![0.1]],
            None
        )
        .is_err());
    }
}
