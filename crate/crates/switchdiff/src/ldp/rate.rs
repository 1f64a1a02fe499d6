//! Legendre transforms of the principal eigenvalue: the running rate
//! functions of the joint position/occupation process.
//!
//! All three transforms are concave maximizations solved by the same
//! gradient ascent (Barzilai-Borwein steps with Armijo backtracking,
//! eigen-gradients from first-order perturbation theory):
//!
//! * `eta(z, q, beta) = sup_{p, alpha} [ q.p + beta.alpha - lambda ]`,
//!   with `beta` restricted to the probability simplex; off-simplex
//!   arguments are `+inf` by convention and short-circuit.
//! * `rho(z, q) = sup_p [ q.p - lambda(z, p, 0) ]`, the position-only
//!   cost; equals `inf_beta eta(z, q, beta)`.
//! * `L(beta) = sup_alpha [ beta.alpha - lambda(z, 0, alpha) ]`, the
//!   occupation cost of the frozen mode chain.
//!
//! `lambda(z, p, alpha + c 1) = lambda(z, p, alpha) + c` for any scalar
//! `c`, so the `alpha` maximization is gauge-fixed by pinning the last
//! component to zero; on the simplex the objective is invariant under
//! the shift, making the fixed-gauge supremum exact.
//!
//! Suprema can be genuinely infinite (e.g. a slow velocity component
//! that no control can produce when `delta_hat = 0`). The ascent detects
//! this as unbounded growth of the maximizer with the objective still
//! increasing and reports the value as `+inf`. Finite results are exact
//! lower bounds on the supremum: the returned value is the objective at
//! the best feasible dual point found.

use crate::error::Result;
use crate::ldp::eigen::PerronSolver;
use crate::ldp::Hamiltonian;
use crate::model::ModelSpec;
use serde::Serialize;

/// Tolerance for `sum beta = 1` when deciding simplex membership.
const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy)]
pub struct ConjugateOptions {
    /// Ascent stops when the sup-norm of the gradient drops below this.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Dual points beyond this sup-norm with a still-increasing objective
    /// are classified as a diverging (infinite) supremum.
    pub divergence_cap: f64,
}

impl Default for ConjugateOptions {
    fn default() -> Self {
        ConjugateOptions {
            grad_tol: 1e-8,
            max_iter: 600,
            divergence_cap: 1e4,
        }
    }
}

/// Result of a conjugate maximization.
#[derive(Debug, Clone, Serialize)]
pub struct ConjugateSolution {
    /// The transform value; `f64::INFINITY` for diverging suprema and
    /// off-simplex occupation arguments.
    pub value: f64,
    /// Maximizing momentum (empty if `p` was not a free variable).
    pub momentum: Vec<f64>,
    /// Maximizing occupation dual in the gauge `alpha_K = 0` (empty if
    /// `alpha` was not a free variable).
    pub occupation_dual: Vec<f64>,
    /// Sup-norm of the dual gradient at the returned point.
    pub gradient_norm: f64,
    pub iterations: usize,
    /// False only when the iteration cap was hit before the gradient
    /// tolerance; the value is still a valid lower bound.
    pub converged: bool,
}

impl ConjugateSolution {
    fn infinite() -> ConjugateSolution {
        ConjugateSolution {
            value: f64::INFINITY,
            momentum: Vec::new(),
            occupation_dual: Vec::new(),
            gradient_norm: 0.0,
            iterations: 0,
            converged: true,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }
}

fn off_simplex(beta: &[f64]) -> bool {
    let sum: f64 = beta.iter().sum();
    (sum - 1.0).abs() > SIMPLEX_TOL || beta.iter().any(|b| *b < 0.0)
}

/// Joint position/occupation cost `eta(z, q, beta)`.
pub fn joint_rate(
    spec: &ModelSpec,
    z: &[f64],
    q: &[f64],
    beta: &[f64],
    eps: f64,
    delta_hat: f64,
) -> Result<ConjugateSolution> {
    let ham = Hamiltonian::at(spec, z, eps, delta_hat)?;
    joint_rate_with(&ham, q, beta, &ConjugateOptions::default(), None)
}

/// `eta` on a prebuilt Hamiltonian, with optional warm-started dual point
/// `[p, alpha_1..alpha_{K-1}]`.
pub fn joint_rate_with(
    ham: &Hamiltonian,
    q: &[f64],
    beta: &[f64],
    opts: &ConjugateOptions,
    warm: Option<&[f64]>,
) -> Result<ConjugateSolution> {
    if off_simplex(beta) {
        return Ok(ConjugateSolution::infinite());
    }
    ascend(ham, Some(q), Some(beta), opts, warm)
}

/// Position-only cost `rho(z, q)`.
pub fn position_rate(
    spec: &ModelSpec,
    z: &[f64],
    q: &[f64],
    eps: f64,
    delta_hat: f64,
) -> Result<ConjugateSolution> {
    let ham = Hamiltonian::at(spec, z, eps, delta_hat)?;
    position_rate_with(&ham, q, &ConjugateOptions::default(), None)
}

/// `rho` on a prebuilt Hamiltonian, warm point is the momentum.
pub fn position_rate_with(
    ham: &Hamiltonian,
    q: &[f64],
    opts: &ConjugateOptions,
    warm: Option<&[f64]>,
) -> Result<ConjugateSolution> {
    ascend(ham, Some(q), None, opts, warm)
}

/// Occupation cost `L(beta)` of the mode chain frozen at `z`.
pub fn occupation_rate(
    spec: &ModelSpec,
    z: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<ConjugateSolution> {
    let ham = Hamiltonian::at(spec, z, eps, 0.0)?;
    occupation_rate_with(&ham, beta, &ConjugateOptions::default(), None)
}

/// `L` on a prebuilt Hamiltonian, warm point is the gauge-fixed alpha.
pub fn occupation_rate_with(
    ham: &Hamiltonian,
    beta: &[f64],
    opts: &ConjugateOptions,
    warm: Option<&[f64]>,
) -> Result<ConjugateSolution> {
    if off_simplex(beta) {
        return Ok(ConjugateSolution::infinite());
    }
    ascend(ham, None, Some(beta), opts, warm)
}

/// Shared concave maximization. Free variables are packed as
/// `theta = [p (if q given); alpha over active modes, gauge-fixed]`.
///
/// Modes with `beta_k = 0` are handled exactly: their maximizing
/// `alpha_k` runs to `-inf`, and in that limit the principal eigenvalue
/// converges to the principal eigenvalue of the submatrix on the support
/// of `beta`. Reducing to the support keeps the remaining problem
/// strictly concave with a finite maximizer.
fn ascend(
    ham: &Hamiltonian,
    q: Option<&[f64]>,
    beta: Option<&[f64]>,
    opts: &ConjugateOptions,
    warm: Option<&[f64]>,
) -> Result<ConjugateSolution> {
    let d = ham.dim;
    let k = ham.modes;
    let active: Vec<usize> = match beta {
        Some(beta) => (0..k).filter(|i| beta[*i] > 0.0).collect(),
        None => (0..k).collect(),
    };
    let ks = active.len();
    let np = if q.is_some() { d } else { 0 };
    let na = if beta.is_some() { ks - 1 } else { 0 };
    let nv = np + na;

    let mut theta = vec![0.0; nv];
    if let Some(w) = warm {
        if w.len() == nv && w.iter().all(|x| x.is_finite()) {
            theta.copy_from_slice(w);
        }
    }

    let mut solver = PerronSolver::new(ks);
    let mut entries = vec![0.0; k * k];
    let mut sub = vec![0.0; ks * ks];
    let mut p = vec![0.0; d];
    let mut alpha = vec![0.0; k];
    let mut weights = vec![0.0; ks];
    let mut scratch = vec![0.0; d];

    // Objective and gradient at a packed dual point.
    let mut eval = |theta: &[f64],
                    solver: &mut PerronSolver,
                    grad: &mut [f64]|
     -> Result<f64> {
        let (tp, ta) = theta.split_at(np);
        p[..np].copy_from_slice(tp);
        for i in np..d {
            p[i] = 0.0;
        }
        alpha.fill(0.0);
        for (i, t) in ta.iter().enumerate() {
            alpha[active[i]] = *t;
        }
        ham.fill_entries(&p, &alpha, &mut entries);
        for (a, ia) in active.iter().enumerate() {
            for (b, ib) in active.iter().enumerate() {
                sub[a * ks + b] = entries[ia * k + ib];
            }
        }
        let lambda = solver.solve(&sub)?;
        solver.weights_into(&mut weights);

        let mut value = -lambda;
        if let Some(q) = q {
            for i in 0..d {
                value += q[i] * p[i];
            }
            // d/dp [q.p - lambda] = q - sum_k w_k (at_k p + Ft_k), the
            // sum running over active modes only.
            for i in 0..np {
                grad[i] = q[i];
            }
            for (a, mode) in active.iter().enumerate() {
                ham.apply_diffusion(*mode, &p, &mut scratch);
                let f = ham.drift(*mode);
                let w = weights[a];
                for i in 0..np {
                    grad[i] -= w * (scratch[i] + f[i]);
                }
            }
        }
        if let Some(beta) = beta {
            for i in 0..na {
                value += beta[active[i]] * ta[i];
                grad[np + i] = beta[active[i]] - weights[i];
            }
        }
        Ok(value)
    };

    let mut grad = vec![0.0; nv];
    let mut value = eval(&theta, &mut solver, &mut grad)?;

    let pack_alpha = |ta: &[f64]| -> Vec<f64> {
        // Full-length dual: gauge zero on the last active mode, limits
        // (-inf) on modes outside the support of beta.
        let mut out = vec![f64::NEG_INFINITY; k];
        for (i, idx) in active.iter().enumerate() {
            out[*idx] = if i < na { ta[i] } else { 0.0 };
        }
        out
    };

    if nv == 0 {
        // No free dual variables (single active mode, no momentum): the
        // value at the origin is the answer.
        return Ok(ConjugateSolution {
            value,
            momentum: if q.is_some() { vec![0.0; d] } else { Vec::new() },
            occupation_dual: if beta.is_some() {
                pack_alpha(&[])
            } else {
                Vec::new()
            },
            gradient_norm: 0.0,
            iterations: 0,
            converged: true,
        });
    }

    let gnorm2 = |g: &[f64]| g.iter().map(|x| x * x).sum::<f64>();
    let gnorm_inf = |g: &[f64]| g.iter().fold(0.0_f64, |m, x| m.max(x.abs()));

    let mut step = 1.0 / (1.0 + gnorm2(&grad).sqrt());
    let mut iterations = 0;
    let mut converged = false;
    let mut trial = vec![0.0; nv];
    let mut trial_grad = vec![0.0; nv];

    for _ in 0..opts.max_iter {
        iterations += 1;
        let ginf = gnorm_inf(&grad);
        if ginf <= opts.grad_tol {
            converged = true;
            break;
        }
        if theta.iter().any(|x| x.abs() > opts.divergence_cap) {
            // Ascent only ever accepts improving steps, so reaching the
            // cap means the objective is still growing: the supremum is
            // infinite.
            return Ok(ConjugateSolution::infinite());
        }

        let g2 = gnorm2(&grad);
        let mut s = step;
        let mut accepted = false;
        let mut trial_value = value;
        for _ in 0..60 {
            for i in 0..nv {
                trial[i] = theta[i] + s * grad[i];
            }
            trial_value = eval(&trial, &mut solver, &mut trial_grad)?;
            if trial_value >= value + 1e-4 * s * g2 {
                accepted = true;
                break;
            }
            s *= 0.5;
        }
        if !accepted {
            // Objective can no longer be improved at floating precision.
            break;
        }

        // Barzilai-Borwein step from the accepted move; for a concave
        // objective s.y <= 0 and the ratio is positive.
        let mut ss = 0.0;
        let mut sy = 0.0;
        for i in 0..nv {
            let ds = trial[i] - theta[i];
            let dy = trial_grad[i] - grad[i];
            ss += ds * ds;
            sy += ds * dy;
        }
        step = if sy < -1e-300 {
            (ss / -sy).clamp(1e-12, 1e8)
        } else {
            s * 2.0
        };

        theta.copy_from_slice(&trial);
        grad.copy_from_slice(&trial_grad);
        value = trial_value;
    }

    if !converged {
        converged = gnorm_inf(&grad) <= opts.grad_tol;
    }
    let (tp, ta) = theta.split_at(np);
    let momentum = if q.is_some() { tp.to_vec() } else { Vec::new() };
    let occupation_dual = if beta.is_some() {
        pack_alpha(ta)
    } else {
        Vec::new()
    };
    Ok(ConjugateSolution {
        value,
        momentum,
        occupation_dual,
        gradient_norm: gnorm_inf(&grad),
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_model;
    use crate::switching;
    use std::collections::BTreeMap;

    fn const_coef(c12: f64, c21: f64) -> ModelSpec {
        let mut params = BTreeMap::new();
        params.insert("c12".to_string(), c12);
        params.insert("c21".to_string(), c21);
        builtin_model("const-coef", &params).unwrap()
    }

    /// Occupation cost of a two-state chain in closed form.
    fn occupation_oracle(beta1: f64, c12: f64, c21: f64) -> f64 {
        let beta2 = 1.0 - beta1;
        ((beta1 * c12).sqrt() - (beta2 * c21).sqrt()).powi(2)
    }

    #[test]
    fn occupation_rate_matches_two_state_closed_form() {
        let (c12, c21) = (1.3, 0.6);
        let spec = const_coef(c12, c21);
        let z = [0.1, -0.2];
        for i in 0..=10 {
            let b1 = i as f64 / 10.0;
            let sol = occupation_rate(&spec, &z, &[b1, 1.0 - b1], 1.0).unwrap();
            let exact = occupation_oracle(b1, c12, c21);
            assert!(
                (sol.value - exact).abs() < 1e-7,
                "beta1 = {b1}: {} vs {exact}",
                sol.value
            );
        }
        // zero exactly at the invariant weights
        let w = switching::weights_at(&spec, &z).unwrap().weights;
        let sol = occupation_rate(&spec, &z, &w, 1.0).unwrap();
        assert!(sol.value.abs() < 1e-10);
    }

    #[test]
    fn occupation_rate_rejects_off_simplex() {
        let spec = const_coef(1.0, 1.0);
        let z = [0.0, 0.0];
        let sol = occupation_rate(&spec, &z, &[0.9, 0.6], 1.0).unwrap();
        assert!(sol.value.is_infinite());
        assert_eq!(sol.iterations, 0);
        let sol = occupation_rate(&spec, &z, &[1.2, -0.2], 1.0).unwrap();
        assert!(sol.value.is_infinite());
    }

    #[test]
    fn position_rate_single_mode_gaussian_cost() {
        // For one mode the transform is the explicit quadratic
        // (q - f(z))^2 / (2 sigma^2).
        let spec = builtin_model("ou-k1", &BTreeMap::new()).unwrap();
        for &(z, q) in &[(0.4, 0.0), (-0.8, 1.1), (1.5, -2.0)] {
            let sol = position_rate(&spec, &[z], &[q], 0.3, 0.0).unwrap();
            let exact = 0.5 * (q + z) * (q + z);
            assert!(
                (sol.value - exact).abs() < 1e-9 * (1.0 + exact),
                "z={z} q={q}: {} vs {exact}",
                sol.value
            );
            assert!(sol.converged);
        }
    }

    /// Constant-coefficient joint cost in closed form: quadratic
    /// transport against the beta-mixed coefficients plus the occupation
    /// cost of the chain.
    fn joint_oracle(
        q: [f64; 2],
        beta1: f64,
        b: f64,
        v1: f64,
        v2: f64,
        c12: f64,
        c21: f64,
        slow_diff: f64,
    ) -> f64 {
        let beta2 = 1.0 - beta1;
        let vmix = beta1 * v1 + beta2 * v2;
        let slow = (q[0] - b).powi(2) / (2.0 * slow_diff);
        let fast = (q[1] - vmix).powi(2) / 2.0;
        slow + fast + occupation_oracle(beta1, c12, c21)
    }

    #[test]
    fn joint_rate_matches_constant_coefficient_decomposition() {
        let (c12, c21) = (1.0, 2.0);
        let spec = const_coef(c12, c21);
        let z = [0.3, 0.1];
        let (eps, delta_hat) = (0.2, 0.02);
        let slow_diff = delta_hat / eps;
        for &(qx, qy, b1) in &[
            (0.3, 0.2, 0.5),
            (0.5, -0.4, 0.3),
            (0.1, 0.9, 0.8),
            (0.3, 0.0, 1.0),
        ] {
            let sol = joint_rate(&spec, &z, &[qx, qy], &[b1, 1.0 - b1], eps, delta_hat)
                .unwrap();
            let exact = joint_oracle([qx, qy], b1, 0.3, 1.0, -1.0, c12, c21, slow_diff);
            assert!(
                (sol.value - exact).abs() < 1e-6 * (1.0 + exact),
                "q=({qx},{qy}) b1={b1}: {} vs {exact}",
                sol.value
            );
        }
    }

    #[test]
    fn joint_rate_is_zero_at_averaged_velocity_and_weights() {
        let spec = const_coef(1.0, 3.0);
        let z = [0.0, 0.0];
        let w = switching::weights_at(&spec, &z).unwrap().weights;
        let fbar = switching::averaged_drift(&spec, &z).unwrap();
        let sol = joint_rate(&spec, &z, &fbar, &w, 0.5, 0.05).unwrap();
        assert!(sol.value.abs() < 1e-12, "value {}", sol.value);
        assert!(sol.converged);
        assert!(sol.iterations <= 2);
    }

    #[test]
    fn position_rate_diverges_for_unreachable_slow_velocity() {
        // With delta_hat = 0 the slow coordinate has no noise, so any
        // velocity other than the drift b = 0.3 is infinitely costly.
        let spec = const_coef(1.0, 1.0);
        let z = [0.0, 0.0];
        let sol = position_rate(&spec, &z, &[0.9, 0.0], 0.2, 0.0).unwrap();
        assert!(sol.value.is_infinite());
        // The reachable slow velocity stays finite and matches the
        // grid minimum of the joint cost over beta.
        let sol = position_rate(&spec, &z, &[0.3, 0.4], 0.2, 0.0).unwrap();
        assert!(sol.value.is_finite());
        let mut best = f64::INFINITY;
        for i in 0..=400 {
            let b1 = i as f64 / 400.0;
            best = best.min(joint_oracle(
                [0.3, 0.4],
                b1,
                0.3,
                1.0,
                -1.0,
                1.0,
                1.0,
                f64::INFINITY,
            ));
        }
        assert!(
            (sol.value - best).abs() < 1e-5 * (1.0 + best),
            "{} vs {best}",
            sol.value
        );
    }

    #[test]
    fn fenchel_young_holds_on_spot_checks() {
        let spec = const_coef(0.8, 1.7);
        let z = [0.2, -0.4];
        let (eps, dh) = (0.3, 0.03);
        let ham = Hamiltonian::at(&spec, &z, eps, dh).unwrap();
        let opts = ConjugateOptions::default();
        let duals = [
            ([0.5, -0.3], [0.2, 0.0]),
            ([-1.0, 0.8], [-0.5, 0.0]),
            ([0.0, 0.0], [0.0, 0.0]),
        ];
        let primals = [([0.3, 0.1], [0.6, 0.4]), ([0.2, -0.7], [0.1, 0.9])];
        let mut entries = vec![0.0; 4];
        let mut solver = PerronSolver::new(2);
        for (q, beta) in primals {
            let eta = joint_rate_with(&ham, &q, &beta, &opts, None).unwrap();
            for (p, alpha) in duals {
                ham.fill_entries(&p, &alpha, &mut entries);
                solver.reset();
                let lambda = solver.solve(&entries).unwrap();
                let pairing: f64 = q.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>()
                    + beta.iter().zip(&alpha).map(|(a, b)| a * b).sum::<f64>();
                assert!(
                    eta.value + lambda >= pairing - 1e-8,
                    "eta {} + lambda {lambda} < pairing {pairing}",
                    eta.value
                );
            }
        }
    }
}
