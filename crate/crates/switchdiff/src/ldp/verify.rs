//! Machine-checkable identities of the rate-function machinery.
//!
//! These are the properties that make the Hamiltonian/Legendre stack
//! trustworthy, packaged as a report so both the test suite and the CLI
//! can run them against any model:
//!
//! * at `(p, alpha) = 0` the principal eigenvalue vanishes and its
//!   gradients reproduce the invariant weights and the averaged drift;
//! * shifting `alpha` by `c 1` shifts the eigenvalue by exactly `c`;
//! * principal eigenvectors are strictly positive;
//! * Fenchel-Young: `eta(q, beta) + lambda(p, alpha) >= q.p + beta.alpha`;
//! * `eta` is jointly convex in `(q, beta)`;
//! * `rho(z, .)` is nonnegative and vanishes exactly at the averaged
//!   drift;
//! * `rho(z, q) = inf_beta eta(z, q, beta)` (checked on a simplex grid
//!   for two-mode models).

use crate::error::Result;
use crate::ldp::eigen::{eigen_gradient, principal_eigenvalue, GradientVar};
use crate::ldp::rate::{joint_rate_with, position_rate_with, ConjugateOptions};
use crate::ldp::Hamiltonian;
use crate::model::{box_samples, ModelSpec};
use crate::rng::trial_rng;
use crate::switching::{averaged_drift, weights_at};
use rand::Rng;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct InvariantCheck {
    pub name: String,
    pub passed: bool,
    /// Worst observed violation (interpretation depends on the check).
    pub worst: f64,
    pub tolerance: f64,
    pub samples: usize,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct InvariantReport {
    pub eps: f64,
    pub delta_hat: f64,
    pub seed: u64,
    pub checks: Vec<InvariantCheck>,
}

impl InvariantReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&InvariantCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Run the full identity suite on `samples` quasi-random state points
/// (and as many random dual/primal draws).
pub fn verify_invariants(
    spec: &ModelSpec,
    eps: f64,
    delta_hat: f64,
    samples: usize,
    seed: u64,
) -> Result<InvariantReport> {
    let d = spec.dim();
    let k = spec.modes;
    let points = box_samples(&spec.domain.bounds, samples, seed);
    let opts = ConjugateOptions::default();
    let mut checks = Vec::new();

    // -- equilibrium identities at (p, alpha) = 0 --------------------------
    let zeros_p = vec![0.0; d];
    let zeros_a = vec![0.0; k];
    let mut worst_lambda = 0.0_f64;
    let mut worst_alpha_grad = 0.0_f64;
    let mut worst_p_grad = 0.0_f64;
    let mut worst_positivity = f64::INFINITY;
    for z in &points {
        let ham = Hamiltonian::at(spec, z, eps, delta_hat)?;
        let h = ham.matrix(&zeros_p, &zeros_a);
        let eig = principal_eigenvalue(&h)?;
        worst_lambda = worst_lambda.max(eig.value.abs());
        let ga = eigen_gradient(&h, &eig, GradientVar::Occupation);
        let gp = eigen_gradient(&h, &eig, GradientVar::Momentum);
        let w = weights_at(spec, z)?.weights;
        let fbar = averaged_drift(spec, z)?;
        for i in 0..k {
            worst_alpha_grad = worst_alpha_grad.max((ga[i] - w[i]).abs());
        }
        for i in 0..d {
            worst_p_grad = worst_p_grad.max((gp[i] - fbar[i]).abs());
        }
        for x in eig.right.iter().chain(eig.left.iter()) {
            worst_positivity = worst_positivity.min(*x);
        }
    }
    checks.push(InvariantCheck {
        name: "equilibrium-eigenvalue".into(),
        passed: worst_lambda <= 1e-10,
        worst: worst_lambda,
        tolerance: 1e-10,
        samples: points.len(),
        detail: "lambda(z, 0, 0) = 0".into(),
    });
    checks.push(InvariantCheck {
        name: "equilibrium-alpha-gradient".into(),
        passed: worst_alpha_grad <= 1e-8,
        worst: worst_alpha_grad,
        tolerance: 1e-8,
        samples: points.len(),
        detail: "d lambda / d alpha at 0 equals the invariant weights".into(),
    });
    checks.push(InvariantCheck {
        name: "equilibrium-momentum-gradient".into(),
        passed: worst_p_grad <= 1e-8,
        worst: worst_p_grad,
        tolerance: 1e-8,
        samples: points.len(),
        detail: "d lambda / d p at 0 equals the averaged drift".into(),
    });
    checks.push(InvariantCheck {
        name: "perron-positivity".into(),
        passed: worst_positivity > 0.0,
        worst: worst_positivity,
        tolerance: 0.0,
        samples: points.len(),
        detail: "principal eigenvectors strictly positive (worst = min component)"
            .into(),
    });

    // -- gauge shift --------------------------------------------------------
    let mut rng = trial_rng(seed, 1);
    let gauge_samples = samples.min(300).max(1);
    let mut worst_gauge = 0.0_f64;
    for i in 0..gauge_samples {
        let z = &points[i % points.len()];
        let ham = Hamiltonian::at(spec, z, eps, delta_hat)?;
        let p: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let alpha: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: f64 = rng.gen_range(-2.0..2.0);
        let base = principal_eigenvalue(&ham.matrix(&p, &alpha))?.value;
        let shifted_alpha: Vec<f64> = alpha.iter().map(|a| a + c).collect();
        let shifted = principal_eigenvalue(&ham.matrix(&p, &shifted_alpha))?.value;
        let rel = (shifted - base - c).abs() / (1.0 + base.abs() + c.abs());
        worst_gauge = worst_gauge.max(rel);
    }
    checks.push(InvariantCheck {
        name: "gauge-shift".into(),
        passed: worst_gauge <= 1e-9,
        worst: worst_gauge,
        tolerance: 1e-9,
        samples: gauge_samples,
        detail: "lambda(z, p, alpha + c) = lambda(z, p, alpha) + c (relative)".into(),
    });

    // -- Fenchel-Young ------------------------------------------------------
    let mut rng = trial_rng(seed, 2);
    let mut worst_fy = f64::INFINITY;
    for i in 0..samples.max(1) {
        let z = &points[i % points.len()];
        let ham = Hamiltonian::at(spec, z, eps, delta_hat)?;
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let beta = random_simplex(&mut rng, k);
        let eta = joint_rate_with(&ham, &q, &beta, &opts, None)?;
        if !eta.value.is_finite() {
            continue;
        }
        let p: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let alpha: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lambda = principal_eigenvalue(&ham.matrix(&p, &alpha))?.value;
        let pairing: f64 = q.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>()
            + beta.iter().zip(&alpha).map(|(a, b)| a * b).sum::<f64>();
        worst_fy = worst_fy.min(eta.value + lambda - pairing);
    }
    checks.push(InvariantCheck {
        name: "fenchel-young".into(),
        passed: worst_fy >= -1e-7,
        worst: worst_fy,
        tolerance: 1e-7,
        samples: samples.max(1),
        detail: "eta(q, beta) + lambda(p, alpha) >= q.p + beta.alpha (worst slack)"
            .into(),
    });

    // -- convexity of eta ---------------------------------------------------
    let mut rng = trial_rng(seed, 3);
    let mut worst_convex = f64::NEG_INFINITY;
    let mut convex_count = 0usize;
    for i in 0..samples.max(1) {
        let z = &points[i % points.len()];
        let ham = Hamiltonian::at(spec, z, eps, delta_hat)?;
        let q1: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.2..1.2)).collect();
        let q2: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.2..1.2)).collect();
        let b1 = random_simplex(&mut rng, k);
        let b2 = random_simplex(&mut rng, k);
        let t: f64 = rng.gen_range(0.05..0.95);
        let qm: Vec<f64> = q1
            .iter()
            .zip(&q2)
            .map(|(a, b)| t * a + (1.0 - t) * b)
            .collect();
        let bm: Vec<f64> = b1
            .iter()
            .zip(&b2)
            .map(|(a, b)| t * a + (1.0 - t) * b)
            .collect();
        let e1 = joint_rate_with(&ham, &q1, &b1, &opts, None)?;
        let e2 = joint_rate_with(&ham, &q2, &b2, &opts, None)?;
        let em = joint_rate_with(&ham, &qm, &bm, &opts, None)?;
        if !(e1.value.is_finite() && e2.value.is_finite() && em.value.is_finite()) {
            continue;
        }
        convex_count += 1;
        let violation = em.value - (t * e1.value + (1.0 - t) * e2.value);
        worst_convex = worst_convex.max(violation);
    }
    checks.push(InvariantCheck {
        name: "convexity".into(),
        passed: worst_convex <= 1e-7,
        worst: worst_convex,
        tolerance: 1e-7,
        samples: convex_count,
        detail: "eta(t x1 + (1-t) x2) <= t eta(x1) + (1-t) eta(x2) (worst excess)"
            .into(),
    });

    // -- position rate: nonnegative, zero exactly at the averaged drift ----
    let mut rng = trial_rng(seed, 4);
    let probe = samples.min(200).max(1);
    let mut worst_at_drift = 0.0_f64;
    let mut min_perturbed = f64::INFINITY;
    for i in 0..probe {
        let z = &points[i % points.len()];
        let ham = Hamiltonian::at(spec, z, eps, delta_hat)?;
        let fbar = averaged_drift(spec, z)?;
        let at_drift = position_rate_with(&ham, &fbar, &opts, None)?;
        worst_at_drift = worst_at_drift.max(at_drift.value.abs());
        let mut q = fbar.clone();
        for qi in &mut q {
            *qi += rng.gen_range(0.2..0.6) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        }
        let perturbed = position_rate_with(&ham, &q, &opts, None)?;
        min_perturbed = min_perturbed.min(perturbed.value);
    }
    checks.push(InvariantCheck {
        name: "position-rate-at-drift".into(),
        passed: worst_at_drift <= 1e-8,
        worst: worst_at_drift,
        tolerance: 1e-8,
        samples: probe,
        detail: "rho(z, Fbar(z)) = 0".into(),
    });
    checks.push(InvariantCheck {
        name: "position-rate-positive-off-drift".into(),
        passed: min_perturbed > 0.0,
        worst: min_perturbed,
        tolerance: 0.0,
        samples: probe,
        detail: "rho(z, q) > 0 away from the averaged drift (worst = min value)"
            .into(),
    });

    // -- partial infimum: rho = inf_beta eta --------------------------------
    let mut rng = trial_rng(seed, 5);
    let grid_probe = samples.min(40).max(1);
    let mut worst_bound = f64::NEG_INFINITY;
    let mut worst_gap = 0.0_f64;
    for i in 0..grid_probe {
        let z = &points[i % points.len()];
        let ham = Hamiltonian::at(spec, z, eps, delta_hat)?;
        let fbar = averaged_drift(spec, z)?;
        let q: Vec<f64> = fbar
            .iter()
            .map(|f| f + rng.gen_range(-0.8..0.8))
            .collect();
        let rho = position_rate_with(&ham, &q, &opts, None)?;
        if !rho.value.is_finite() {
            continue;
        }
        let mut grid_min = f64::INFINITY;
        if k == 2 {
            for step in 0..=20 {
                let b1 = step as f64 / 20.0;
                let eta = joint_rate_with(&ham, &q, &[b1, 1.0 - b1], &opts, None)?;
                grid_min = grid_min.min(eta.value);
            }
        } else {
            let w = weights_at(spec, z)?.weights;
            let eta = joint_rate_with(&ham, &q, &w, &opts, None)?;
            grid_min = eta.value;
        }
        // rho must lower-bound every eta; on the two-mode grid it should
        // also be close to the grid minimum.
        worst_bound = worst_bound.max(rho.value - grid_min);
        if k == 2 {
            worst_gap = worst_gap.max((grid_min - rho.value).abs());
        }
    }
    checks.push(InvariantCheck {
        name: "partial-infimum-bound".into(),
        passed: worst_bound <= 1e-6,
        worst: worst_bound,
        tolerance: 1e-6,
        samples: grid_probe,
        detail: "rho(z, q) <= eta(z, q, beta) over the beta grid (worst excess)"
            .into(),
    });
    if k == 2 {
        checks.push(InvariantCheck {
            name: "partial-infimum-gap".into(),
            // The grid spacing contributes O(grid^2) to the discrepancy.
            passed: worst_gap <= 1e-2,
            worst: worst_gap,
            tolerance: 1e-2,
            samples: grid_probe,
            detail: "rho vs the minimum of eta over a 21-point simplex grid".into(),
        });
    }

    Ok(InvariantReport {
        eps,
        delta_hat,
        seed,
        checks,
    })
}

fn random_simplex<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    // Exponential spacings normalized to the simplex.
    let mut raw: Vec<f64> = (0..k)
        .map(|_| -f64::ln(1.0 - rng.gen_range(0.0..0.999_999)))
        .collect();
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return vec![1.0 / k as f64; k];
    }
    for x in &mut raw {
        *x /= total;
    }
    // Renormalize the float sum to land inside the simplex tolerance.
    let sum: f64 = raw.iter().sum();
    raw[k - 1] += 1.0 - sum;
    if raw[k - 1] < 0.0 {
        raw[k - 1] = 0.0;
    }
    raw
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_model;
    use std::collections::BTreeMap;

    #[test]
    fn two_mode_linear_passes_all_invariants() {
        let spec = builtin_model("two-mode-linear", &BTreeMap::new()).unwrap();
        let report = verify_invariants(&spec, 0.1, 0.01, 60, 17).unwrap();
        for check in &report.checks {
            assert!(
                check.passed,
                "{} failed: worst {} vs tol {}",
                check.name, check.worst, check.tolerance
            );
        }
    }

    #[test]
    fn const_coef_passes_all_invariants() {
        let spec = builtin_model("const-coef", &BTreeMap::new()).unwrap();
        let report = verify_invariants(&spec, 0.2, 0.04, 40, 3).unwrap();
        assert!(report.passed(), "{:#?}", report.checks);
    }

    #[test]
    fn single_mode_passes_invariants() {
        let spec = builtin_model("ou-k1", &BTreeMap::new()).unwrap();
        let report = verify_invariants(&spec, 0.3, 0.0, 40, 5).unwrap();
        assert!(report.passed(), "{:#?}", report.checks);
    }
}
