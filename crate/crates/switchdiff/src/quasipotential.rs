//! Minimum-action paths, the quasipotential, and exit-point analysis.
//!
//! The quasipotential from a stationary point of the averaged dynamics to a
//! target is the infimum of the position-level action over connecting paths
//! and over the horizon. This module discretizes paths on a uniform time grid,
//! optimizes the interior nodes by Barzilai-Borwein descent with central
//! finite-difference gradients, and takes the infimum over a caller-supplied
//! horizon grid. On top of that sit the boundary analysis routines: sampling
//! the level set `phi = 0` along rays, the boundary quasipotential profile
//! with its minimizer, and the drift-direction checks at the boundary.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec;
use crate::ldp::{position_rate_with, ConjugateOptions, Hamiltonian, PathDiscretization};
use crate::model::{box_samples, ModelSpec};
use crate::rng::trial_rng;
use crate::switching::averaged_drift;

/// Settings for the path optimizer.
#[derive(Debug, Clone)]
pub struct MinimizerOptions {
    /// Number of path segments; at least 8.
    pub segments: usize,
    /// Outer descent iteration cap per start.
    pub max_iter: usize,
    /// Descent stops when the sup-norm of the node gradient drops below this.
    pub grad_tol: f64,
    /// Number of initializations: the straight line plus `starts - 1`
    /// smoothly perturbed copies.
    pub starts: usize,
    /// Relative amplitude of the start perturbations (fraction of the
    /// bounding-box diameter).
    pub perturbation: f64,
    /// Seed for the perturbation draws.
    pub seed: u64,
    /// Inner conjugate-solve settings for the segment costs.
    pub conjugate: ConjugateOptions,
}

impl Default for MinimizerOptions {
    fn default() -> Self {
        MinimizerOptions {
            segments: 16,
            max_iter: 200,
            grad_tol: 1e-4,
            starts: 4,
            perturbation: 0.08,
            seed: 0,
            conjugate: ConjugateOptions::default(),
        }
    }
}

/// Result of one fixed-horizon path optimization.
#[derive(Debug, Clone, Serialize)]
pub struct MinimizerResult {
    pub path: PathDiscretization,
    /// Action of the best path found.
    pub action: f64,
    pub horizon: f64,
    /// Iterations used by the winning start.
    pub iterations: usize,
    /// Final node-gradient sup-norm of the winning start.
    pub gradient_norm: f64,
    /// False when the winning start hit the iteration cap; the best iterate
    /// is still returned.
    pub converged: bool,
    /// Final action of every start, in start order; their spread measures
    /// multi-start dispersion.
    pub start_values: Vec<f64>,
}

/// Geometric grid with `count` points from `lo` to `hi` inclusive.
pub fn geometric_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && count >= 2);
    let ratio = (hi / lo).powf(1.0 / (count as f64 - 1.0));
    (0..count).map(|i| lo * ratio.powi(i as i32)).collect()
}

/// One start of the fixed-horizon optimizer: owns the per-segment warm-start
/// cache so repeated segment evaluations reuse the previous maximizer.
struct Optimizer<'a> {
    spec: &'a ModelSpec,
    eps: f64,
    delta_hat: f64,
    times: Vec<f64>,
    z_start: &'a [f64],
    z_end: &'a [f64],
    dim: usize,
    segments: usize,
    conj: ConjugateOptions,
    /// Warm momenta per segment, updated on every evaluation.
    warm: Vec<Option<Vec<f64>>>,
    fd_step: f64,
}

impl<'a> Optimizer<'a> {
    /// Cost of the segment between explicit node positions, `dt` long.
    fn segment_cost(&mut self, seg: usize, za: &[f64], zb: &[f64]) -> Result<f64> {
        let dt = self.times[seg + 1] - self.times[seg];
        let d = self.dim;
        let mut mid = vec![0.0; d];
        let mut vel = vec![0.0; d];
        for j in 0..d {
            mid[j] = 0.5 * (za[j] + zb[j]);
            vel[j] = (zb[j] - za[j]) / dt;
        }
        let ham = Hamiltonian::at(self.spec, &mid, self.eps, self.delta_hat)?;
        let sol = position_rate_with(
            &ham,
            &vel,
            &self.conj,
            self.warm[seg].as_deref(),
        )?;
        if sol.value.is_finite() {
            self.warm[seg] = Some(sol.momentum);
        }
        Ok(dt * sol.value)
    }

    fn node<'b>(&'b self, x: &'b [f64], i: usize) -> &'b [f64] {
        if i == 0 {
            self.z_start
        } else if i == self.segments {
            self.z_end
        } else {
            &x[(i - 1) * self.dim..i * self.dim]
        }
    }

    /// Total action of the interior-node vector `x`.
    fn total_cost(&mut self, x: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for seg in 0..self.segments {
            let za = self.node(x, seg).to_vec();
            let zb = self.node(x, seg + 1).to_vec();
            total += self.segment_cost(seg, &za, &zb)?;
        }
        Ok(total)
    }

    /// Cost of the two segments adjacent to interior node `i`, with
    /// coordinate `coord` of that node shifted by `delta`.
    fn pair_cost(&mut self, x: &[f64], i: usize, coord: usize, delta: f64) -> Result<f64> {
        let mut zi = self.node(x, i).to_vec();
        zi[coord] += delta;
        let za = self.node(x, i - 1).to_vec();
        let zb = self.node(x, i + 1).to_vec();
        Ok(self.segment_cost(i - 1, &za, &zi)? + self.segment_cost(i, &zi, &zb)?)
    }

    /// Central finite-difference gradient over the interior nodes. Falls back
    /// to a one-sided difference if a probe produces an infinite cost.
    fn gradient(&mut self, x: &[f64], grad: &mut [f64]) -> Result<()> {
        let h = self.fd_step;
        for i in 1..self.segments {
            for coord in 0..self.dim {
                let plus = self.pair_cost(x, i, coord, h)?;
                let minus = self.pair_cost(x, i, coord, -h)?;
                let g = if plus.is_finite() && minus.is_finite() {
                    (plus - minus) / (2.0 * h)
                } else {
                    let base = self.pair_cost(x, i, coord, 0.0)?;
                    if !base.is_finite() {
                        return Err(Error::Divergence(
                            "path cost is infinite; use a positive slow-noise rate".into(),
                        ));
                    }
                    if plus.is_finite() {
                        (plus - base) / h
                    } else if minus.is_finite() {
                        (base - minus) / h
                    } else {
                        return Err(Error::Divergence(
                            "path cost is infinite near the current path".into(),
                        ));
                    }
                };
                grad[(i - 1) * self.dim + coord] = g;
            }
        }
        Ok(())
    }

    /// Barzilai-Borwein descent with backtracking from the interior-node
    /// vector `x0`. Returns the final nodes, action, iterations, gradient
    /// norm, and convergence flag.
    fn descend(
        &mut self,
        mut x: Vec<f64>,
        max_iter: usize,
        grad_tol: f64,
        diam: f64,
    ) -> Result<(Vec<f64>, f64, usize, f64, bool)> {
        let nv = x.len();
        let mut fx = self.total_cost(&x)?;
        if !fx.is_finite() {
            return Err(Error::Divergence(
                "initial path has infinite action; use a positive slow-noise rate".into(),
            ));
        }
        let mut grad = vec![0.0; nv];
        self.gradient(&x, &mut grad)?;
        let mut prev_x = x.clone();
        let mut prev_g = grad.clone();
        let sup = |v: &[f64]| v.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
        let mut gnorm = sup(&grad);
        let mut iterations = 0;
        let mut converged = gnorm <= grad_tol;
        let max_move = 0.25 * diam;

        for iter in 1..=max_iter {
            if converged {
                break;
            }
            iterations = iter;
            // Barzilai-Borwein step length from the previous displacement;
            // a conservative scaled step on the first iteration.
            let mut step = if iter == 1 {
                0.01 * diam / gnorm.max(1e-12)
            } else {
                let mut sy = 0.0;
                let mut yy = 0.0;
                for j in 0..nv {
                    let s = x[j] - prev_x[j];
                    let y = grad[j] - prev_g[j];
                    sy += s * y;
                    yy += y * y;
                }
                if sy > 0.0 && yy > 0.0 {
                    (sy / yy).clamp(1e-10, 1e4)
                } else {
                    0.01 * diam / gnorm.max(1e-12)
                }
            };
            if step * gnorm > max_move {
                step = max_move / gnorm;
            }
            prev_x.copy_from_slice(&x);
            prev_g.copy_from_slice(&grad);

            let g2: f64 = grad.iter().map(|g| g * g).sum();
            let mut accepted = false;
            for _ in 0..50 {
                let trial: Vec<f64> = (0..nv).map(|j| x[j] - step * grad[j]).collect();
                let ft = self.total_cost(&trial)?;
                if ft.is_finite() && ft <= fx - 1e-4 * step * g2 {
                    x = trial;
                    fx = ft;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                // No descent step exists at line-search resolution; treat the
                // point as converged at its current gradient.
                converged = true;
                break;
            }
            self.gradient(&x, &mut grad)?;
            gnorm = sup(&grad);
            converged = gnorm <= grad_tol;
        }
        // Refresh the cost with fully converged inner solves along the final
        // path (cheap: everything is warm).
        fx = self.total_cost(&x)?;
        Ok((x, fx, iterations, gnorm, converged))
    }
}

fn straight_line(z_start: &[f64], z_end: &[f64], segments: usize) -> Vec<f64> {
    let d = z_start.len();
    let mut x = Vec::with_capacity((segments - 1) * d);
    for i in 1..segments {
        let s = i as f64 / segments as f64;
        for j in 0..d {
            x.push(z_start[j] + s * (z_end[j] - z_start[j]));
        }
    }
    x
}

/// Minimize the position-level action between fixed endpoints over paths with
/// a fixed horizon `t`. Multi-start: the straight line plus smoothly
/// perturbed copies, best result kept. Non-convergence is flagged on the
/// result rather than reported as an error.
pub fn minimize_action(
    spec: &ModelSpec,
    z_start: &[f64],
    z_end: &[f64],
    t: f64,
    eps: f64,
    delta_hat: f64,
    opts: &MinimizerOptions,
) -> Result<MinimizerResult> {
    let d = spec.dim();
    if z_start.len() != d || z_end.len() != d {
        return Err(Error::Dimension(format!(
            "endpoints must have {d} coordinates"
        )));
    }
    if opts.segments < 8 {
        return Err(Error::Config("at least 8 path segments required".into()));
    }
    if opts.starts == 0 {
        return Err(Error::Config("at least one start required".into()));
    }
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Config("horizon must be positive".into()));
    }
    if spec.slow_dim > 0 && !(delta_hat > 0.0) {
        return Err(Error::Config(
            "slow coordinates need a positive slow-noise rate for finite actions".into(),
        ));
    }
    let segments = opts.segments;
    let diam = spec.domain.box_diameter();
    let times: Vec<f64> = (0..=segments)
        .map(|i| t * i as f64 / segments as f64)
        .collect();

    // Build the starts: straight line, then smooth sine-bump perturbations
    // with seeded random directions.
    let base = straight_line(z_start, z_end, segments);
    let mut inits = vec![base.clone()];
    for s in 1..opts.starts {
        let mut rng = trial_rng(opts.seed, s as u64);
        let mut dir1 = vec![0.0; d];
        let mut dir2 = vec![0.0; d];
        let mut norm1 = 0.0;
        let mut norm2 = 0.0;
        for j in 0..d {
            dir1[j] = rng.gen::<f64>() - 0.5;
            dir2[j] = rng.gen::<f64>() - 0.5;
            norm1 += dir1[j] * dir1[j];
            norm2 += dir2[j] * dir2[j];
        }
        let (norm1, norm2) = (norm1.sqrt().max(1e-12), norm2.sqrt().max(1e-12));
        let amp = opts.perturbation * diam;
        let mut x = base.clone();
        for i in 1..segments {
            let s1 = (std::f64::consts::PI * i as f64 / segments as f64).sin();
            let s2 = (2.0 * std::f64::consts::PI * i as f64 / segments as f64).sin();
            for j in 0..d {
                x[(i - 1) * d + j] +=
                    amp * (s1 * dir1[j] / norm1 + 0.5 * s2 * dir2[j] / norm2);
            }
        }
        inits.push(x);
    }

    let outcomes: Vec<Result<(Vec<f64>, f64, usize, f64, bool)>> =
        exec::map_indexed(inits.len(), |s| {
            let mut opt = Optimizer {
                spec,
                eps,
                delta_hat,
                times: times.clone(),
                z_start,
                z_end,
                dim: d,
                segments,
                conj: opts.conjugate.clone(),
                warm: vec![None; segments],
                fd_step: 2.5e-5 * diam.max(1.0),
            };
            opt.descend(inits[s].clone(), opts.max_iter, opts.grad_tol, diam)
        });

    let mut best: Option<(Vec<f64>, f64, usize, f64, bool)> = None;
    let mut start_values = Vec::with_capacity(outcomes.len());
    for res in outcomes {
        let out = res?;
        start_values.push(out.1);
        let better = match &best {
            Some(b) => out.1 < b.1,
            None => true,
        };
        if better {
            best = Some(out);
        }
    }
    let (x, action, iterations, gradient_norm, converged) = best.unwrap();

    let mut positions = Vec::with_capacity(segments + 1);
    positions.push(z_start.to_vec());
    for i in 1..segments {
        positions.push(x[(i - 1) * d..i * d].to_vec());
    }
    positions.push(z_end.to_vec());
    let path = PathDiscretization::new(times, positions, None)?;
    Ok(MinimizerResult {
        path,
        action,
        horizon: t,
        iterations,
        gradient_norm,
        converged,
        start_values,
    })
}

/// Quasipotential from `z_start` to `z_target`: the minimum over the horizon
/// grid of the fixed-horizon minimized action. Returns the value and the
/// winning minimizer.
pub fn quasipotential_v(
    spec: &ModelSpec,
    z_start: &[f64],
    z_target: &[f64],
    eps: f64,
    delta_hat: f64,
    t_grid: &[f64],
    opts: &MinimizerOptions,
) -> Result<(f64, MinimizerResult)> {
    if t_grid.is_empty() {
        return Err(Error::Config("horizon grid must not be empty".into()));
    }
    let mut best: Option<MinimizerResult> = None;
    for &t in t_grid {
        let res = minimize_action(spec, z_start, z_target, t, eps, delta_hat, opts)?;
        let better = match &best {
            Some(b) => res.action < b.action,
            None => true,
        };
        if better {
            best = Some(res);
        }
    }
    let best = best.unwrap();
    Ok((best.action, best))
}

// ---------------------------------------------------------------------------
// Boundary sampling and analysis
// ---------------------------------------------------------------------------

/// Deterministic points on the domain boundary `phi = 0`, found by bisection
/// along rays from the box center. Supports one to three dimensions (two
/// points, a uniform angular grid, and a Fibonacci sphere respectively).
pub fn boundary_points(spec: &ModelSpec, count: usize) -> Result<Vec<Vec<f64>>> {
    let d = spec.dim();
    let center = spec.domain.box_center();
    if spec.level_at(&center)? >= 0.0 {
        return Err(Error::Domain(
            "box center lies outside the domain; boundary rays need an interior origin".into(),
        ));
    }
    let directions: Vec<Vec<f64>> = match d {
        1 => vec![vec![-1.0], vec![1.0]],
        2 => (0..count.max(3))
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / count.max(3) as f64;
                vec![a.cos(), a.sin()]
            })
            .collect(),
        3 => {
            let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
            (0..count.max(4))
                .map(|i| {
                    let y = 1.0 - 2.0 * (i as f64 + 0.5) / count.max(4) as f64;
                    let r = (1.0 - y * y).sqrt();
                    let a = golden * i as f64;
                    vec![r * a.cos(), y, r * a.sin()]
                })
                .collect()
        }
        _ => {
            return Err(Error::Domain(
                "boundary sampling supports at most three dimensions".into(),
            ))
        }
    };
    let diam = spec.domain.box_diameter();
    let mut points = Vec::with_capacity(directions.len());
    for dir in &directions {
        // Find an outside radius by doubling, then bisect the crossing.
        let mut hi = 0.25 * diam;
        let mut found = false;
        for _ in 0..30 {
            let z: Vec<f64> = center.iter().zip(dir).map(|(c, u)| c + hi * u).collect();
            if spec.level_at(&z)? >= 0.0 {
                found = true;
                break;
            }
            hi *= 1.5;
        }
        if !found {
            return Err(Error::Domain(
                "level set never becomes nonnegative along a boundary ray".into(),
            ));
        }
        let mut lo = 0.0_f64;
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            let z: Vec<f64> = center.iter().zip(dir).map(|(c, u)| c + mid * u).collect();
            let phi = spec.level_at(&z)?;
            if phi >= 0.0 {
                hi = mid;
                if phi <= 1e-10 * diam {
                    break;
                }
            } else {
                lo = mid;
            }
        }
        points.push(center.iter().zip(dir).map(|(c, u)| c + hi * u).collect());
    }
    Ok(points)
}

/// A boundary point where a drift check failed, with the offending inner
/// product.
#[derive(Debug, Clone, Serialize)]
pub struct BoundaryWitness {
    pub position: Vec<f64>,
    pub normal: Vec<f64>,
    pub product: f64,
}

/// Results of the structural checks behind the exit analysis: the
/// inward-drift condition on the boundary and the stationary points of the
/// averaged dynamics.
#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    /// Number of boundary samples tested.
    pub boundary_samples: usize,
    /// True when the averaged drift points strictly inward at every sample.
    pub inward_ok: bool,
    /// Number of samples violating the inward condition.
    pub inward_violations: usize,
    /// Witnesses for the violations (capped).
    pub inward_witnesses: Vec<BoundaryWitness>,
    /// Clustered stationary points of the averaged drift found inside the
    /// domain.
    pub stationary_points: Vec<Vec<f64>>,
    /// Sup-norm drift residual at each stationary point.
    pub stationary_residuals: Vec<f64>,
    /// True when exactly one stationary cluster was found.
    pub unique_stationary: bool,
    /// Uniqueness of the boundary quasipotential minimizer; only known when
    /// the report was produced by the exit analysis.
    pub unique_minimizer: Option<bool>,
    /// Uniqueness of the dominant boundary mode; only known when the report
    /// was produced by the exit analysis.
    pub unique_mode: Option<bool>,
}

const WITNESS_CAP: usize = 8;

/// Check the inward-drift condition on the boundary and scan for stationary
/// points of the averaged dynamics from quasi-random interior starts.
pub fn check_assumptions(
    spec: &ModelSpec,
    boundary_samples: usize,
    interior_starts: usize,
) -> Result<AssumptionReport> {
    let samples = boundary_points(spec, boundary_samples)?;
    let mut witnesses = Vec::new();
    let mut violations = 0usize;
    for z in &samples {
        let normal = spec.boundary_normal(z)?;
        let drift = averaged_drift(spec, z)?;
        let product: f64 = normal.iter().zip(&drift).map(|(n, f)| n * f).sum();
        if product >= 0.0 {
            violations += 1;
            if witnesses.len() < WITNESS_CAP {
                witnesses.push(BoundaryWitness {
                    position: z.clone(),
                    normal,
                    product,
                });
            }
        }
    }
    let (stationary_points, stationary_residuals) =
        stationary_scan(spec, interior_starts)?;
    let unique = stationary_points.len() == 1;
    Ok(AssumptionReport {
        boundary_samples: samples.len(),
        inward_ok: violations == 0,
        inward_violations: violations,
        inward_witnesses: witnesses,
        stationary_points,
        stationary_residuals,
        unique_stationary: unique,
        unique_minimizer: None,
        unique_mode: None,
    })
}

/// Damped Newton iteration toward a zero of the averaged drift, starting at
/// `z0`. The Jacobian is taken by central differences. Returns the root and
/// its residual, or `None` when the iteration stalls or leaves the domain.
fn newton_root(spec: &ModelSpec, z0: &[f64], diam: f64) -> Result<Option<(Vec<f64>, f64)>> {
    let d = spec.dim();
    let h = 1e-6 * diam.max(1.0);
    let sup = |v: &[f64]| v.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
    let mut z = z0.to_vec();
    let mut f = averaged_drift(spec, &z)?;
    let tol = 1e-10 * (1.0 + sup(&f));
    for _ in 0..80 {
        let fnorm = sup(&f);
        if fnorm <= tol {
            return Ok(Some((z, fnorm)));
        }
        let mut jac = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += h;
            zm[j] -= h;
            let fp = averaged_drift(spec, &zp)?;
            let fm = averaged_drift(spec, &zm)?;
            for i in 0..d {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let rhs = DVector::from_column_slice(&f);
        let step = match jac.lu().solve(&rhs) {
            Some(s) => s,
            None => return Ok(None),
        };
        // Damped update: first fraction that reduces the residual.
        let mut improved = false;
        let mut gamma = 1.0;
        for _ in 0..12 {
            let trial: Vec<f64> = (0..d).map(|i| z[i] - gamma * step[i]).collect();
            if trial.iter().any(|v| !v.is_finite()) {
                gamma *= 0.5;
                continue;
            }
            let ft = averaged_drift(spec, &trial)?;
            if sup(&ft) < fnorm {
                z = trial;
                f = ft;
                improved = true;
                break;
            }
            gamma *= 0.5;
        }
        if !improved {
            return Ok(None);
        }
    }
    Ok(None)
}

/// Locate and cluster the stationary points of the averaged drift inside the
/// domain, starting Newton iterations from `starts` quasi-random interior
/// points.
fn stationary_scan(spec: &ModelSpec, starts: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let diam = spec.domain.box_diameter();
    let cluster_tol = 1e-5 * diam.max(1.0);
    let mut roots: Vec<Vec<f64>> = Vec::new();
    let mut residuals: Vec<f64> = Vec::new();
    let candidates = box_samples(&spec.domain.bounds, starts, 23);
    for z0 in candidates.iter().filter(|z| {
        matches!(spec.level_at(z), Ok(phi) if phi < 0.0)
    }) {
        if let Some((root, residual)) = newton_root(spec, z0, diam)? {
            if spec.level_at(&root)? >= 0.0 {
                continue;
            }
            let dup = roots.iter().any(|r| {
                r.iter()
                    .zip(&root)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0_f64, f64::max)
                    <= cluster_tol
            });
            if !dup {
                roots.push(root);
                residuals.push(residual);
            }
        }
    }
    Ok((roots, residuals))
}

/// Boundary exit analysis: the quasipotential profile over boundary samples,
/// its minimizer, and the drift-direction comparison across modes there.
#[derive(Debug, Clone, Serialize)]
pub struct ExitProfile {
    /// Boundary sample positions.
    pub samples: Vec<Vec<f64>>,
    /// Quasipotential from the stationary point to each sample.
    pub values: Vec<f64>,
    /// Stationary point used as the path origin.
    pub stationary: Vec<f64>,
    /// Sample attaining the smallest quasipotential.
    pub minimizer: Vec<f64>,
    pub min_value: f64,
    /// Smallest value among samples away from the minimizer (beyond a few
    /// sample spacings) minus the minimum; zero when no such sample exists.
    pub gap: f64,
    /// True when the gap clears the tie tolerance relative to the value
    /// range.
    pub unique_minimizer: bool,
    /// Inner products of each mode's stacked drift with the outward normal
    /// at the minimizer.
    pub normal_products: Vec<f64>,
    /// Mode with the largest normal product, `0`-based.
    pub dominant_mode: usize,
    /// Lead of the dominant mode over the runner-up.
    pub mode_margin: f64,
    pub unique_mode: bool,
    /// False when any per-sample optimization hit its iteration cap.
    pub all_converged: bool,
    /// Structural checks, with the uniqueness flags filled in.
    pub assumptions: AssumptionReport,
}

/// Tie tolerance for the boundary minimizer, as a fraction of the value
/// range over the samples.
const MINIMIZER_TIE_REL: f64 = 1e-3;

/// Compute the boundary quasipotential profile and locate the dominant exit
/// point and mode. The path origin is the stationary point of the averaged
/// dynamics (the scan must find at least one; with several, the one closest
/// to the box center is used).
pub fn find_exit_minimizer(
    spec: &ModelSpec,
    eps: f64,
    delta_hat: f64,
    boundary_samples: usize,
    t_grid: &[f64],
    opts: &MinimizerOptions,
) -> Result<ExitProfile> {
    let mut assumptions = check_assumptions(spec, boundary_samples, 64)?;
    if assumptions.stationary_points.is_empty() {
        return Err(Error::Degenerate(
            "no stationary point of the averaged dynamics found inside the domain".into(),
        ));
    }
    let center = spec.domain.box_center();
    let stationary = assumptions
        .stationary_points
        .iter()
        .min_by(|a, b| {
            let da: f64 = a.iter().zip(&center).map(|(x, c)| (x - c) * (x - c)).sum();
            let db: f64 = b.iter().zip(&center).map(|(x, c)| (x - c) * (x - c)).sum();
            da.total_cmp(&db)
        })
        .unwrap()
        .clone();

    let samples = boundary_points(spec, boundary_samples)?;
    let results: Vec<Result<(f64, bool)>> = exec::map_indexed(samples.len(), |i| {
        let (v, res) =
            quasipotential_v(spec, &stationary, &samples[i], eps, delta_hat, t_grid, opts)?;
        Ok((v, res.converged))
    });
    let mut values = Vec::with_capacity(samples.len());
    let mut all_converged = true;
    for r in results {
        let (v, conv) = r?;
        values.push(v);
        all_converged &= conv;
    }

    let (min_idx, &min_value) = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let minimizer = samples[min_idx].clone();
    let max_value = values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let range = max_value - min_value;

    // Runner-up search excludes samples within a few spacings of the
    // minimizer, so adjacent samples of a smooth minimum do not masquerade
    // as competing minimizers.
    let spacing = median_nearest_spacing(&samples);
    let exclusion = 2.5 * spacing;
    let mut runner_up = f64::INFINITY;
    for (i, v) in values.iter().enumerate() {
        if i == min_idx {
            continue;
        }
        let dist: f64 = samples[i]
            .iter()
            .zip(&minimizer)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if dist > exclusion && *v < runner_up {
            runner_up = *v;
        }
    }
    let gap = if runner_up.is_finite() {
        runner_up - min_value
    } else {
        0.0
    };
    let unique_minimizer = range > 0.0 && gap > MINIMIZER_TIE_REL * range;

    let normal = spec.boundary_normal(&minimizer)?;
    let mut normal_products: Vec<f64> = Vec::with_capacity(spec.modes);
    for k in 0..spec.modes {
        let drift = spec.stacked_drift_at(k, &minimizer)?;
        normal_products.push(normal.iter().zip(&drift).map(|(n, f)| n * f).sum());
    }
    let (dominant_mode, &best_product) = normal_products
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let second_product = normal_products
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != dominant_mode)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mode_margin = if second_product.is_finite() {
        best_product - second_product
    } else {
        f64::INFINITY
    };
    let scale = normal_products
        .iter()
        .fold(0.0_f64, |a, b| a.max(b.abs()));
    let unique_mode = mode_margin > 1e-9 + 1e-6 * scale;

    assumptions.unique_minimizer = Some(unique_minimizer);
    assumptions.unique_mode = Some(unique_mode);

    Ok(ExitProfile {
        samples,
        values,
        stationary,
        minimizer,
        min_value,
        gap,
        unique_minimizer,
        normal_products,
        dominant_mode,
        mode_margin,
        unique_mode,
        all_converged,
        assumptions,
    })
}

fn median_nearest_spacing(samples: &[Vec<f64>]) -> f64 {
    if samples.len() < 2 {
        return 0.0;
    }
    let mut nearest: Vec<f64> = samples
        .iter()
        .enumerate()
        .map(|(i, a)| {
            samples
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| {
                    a.iter()
                        .zip(b)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    nearest.sort_by(f64::total_cmp);
    nearest[nearest.len() / 2]
}
