//! Mode-switching generator and the averaged slow-fast system.
//!
//! At a frozen state `z` the mode variable is a continuous-time Markov
//! chain with generator `C(z)`: off-diagonal entries `c_kj(z)`, diagonal
//! chosen so rows sum to zero. With strictly positive rates the chain is
//! ergodic and has a unique invariant probability vector `w(z)` solving
//! `w^T C = 0`, `sum w = 1`, `w > 0`. Averaging the per-mode drifts
//! against `w` gives the deterministic system the fast switching limit
//! follows:
//!
//! ```text
//!   Fbar(z) = sum_k w_k(z) * (F(z), f_k(z))
//! ```
//!
//! The flow of `Fbar` is the zero-cost path of the large-deviation action
//! and the backbone of several consistency checks elsewhere in the crate.

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use nalgebra::{DMatrix, DVector};

/// Generator of the mode chain frozen at a state point.
#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    /// `K x K`; rows sum to zero by construction.
    pub matrix: DMatrix<f64>,
    /// The state the rates were evaluated at.
    pub anchor: Vec<f64>,
}

/// Evaluate the generator `C(z)`.
pub fn generator_at(spec: &ModelSpec, z: &[f64]) -> Result<GeneratorMatrix> {
    let k = spec.modes;
    let mut matrix = DMatrix::zeros(k, k);
    for i in 0..k {
        let mut leaving = 0.0;
        for j in 0..k {
            if i == j {
                continue;
            }
            let c = spec.rate_at(i, j, z)?;
            matrix[(i, j)] = c;
            leaving += c;
        }
        matrix[(i, i)] = -leaving;
    }
    Ok(GeneratorMatrix {
        matrix,
        anchor: z.to_vec(),
    })
}

/// Invariant probability vector of a generator, with the residual of the
/// balance equations actually achieved.
#[derive(Debug, Clone)]
pub struct InvariantWeights {
    pub weights: Vec<f64>,
    /// `max_j |sum_k w_k C_kj|` at the returned weights.
    pub residual: f64,
}

/// Solve `w^T C = 0`, `sum w = 1` by least squares on the stacked system
/// `[C^T; 1^T] w = [0; 1]`. Errors if the result is not a strictly
/// positive probability vector or the balance residual is large, which
/// happens exactly when the rates fail the positivity assumption.
pub fn invariant_weights(generator: &GeneratorMatrix) -> Result<InvariantWeights> {
    let k = generator.matrix.nrows();
    let mut a = DMatrix::zeros(k + 1, k);
    for i in 0..k {
        for j in 0..k {
            a[(i, j)] = generator.matrix[(j, i)];
        }
    }
    for j in 0..k {
        a[(k, j)] = 1.0;
    }
    let mut b = DVector::zeros(k + 1);
    b[k] = 1.0;
    let svd = a.svd(true, true);
    let w = svd
        .solve(&b, 1e-14)
        .map_err(|e| Error::Singular(format!("invariant weights: {e}")))?;

    let scale = generator
        .matrix
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
        .max(1.0);
    let mut residual = 0.0_f64;
    for j in 0..k {
        let mut dot = 0.0;
        for i in 0..k {
            dot += w[i] * generator.matrix[(i, j)];
        }
        residual = residual.max(dot.abs());
    }
    if residual > 1e-10 * scale {
        return Err(Error::Singular(format!(
            "invariant weights residual {residual:.3e} too large at {:?}",
            generator.anchor
        )));
    }
    if w.iter().any(|v| *v <= 0.0) {
        return Err(Error::Singular(format!(
            "invariant weights not strictly positive at {:?}: {:?}",
            generator.anchor,
            w.as_slice()
        )));
    }
    let total: f64 = w.iter().sum();
    Ok(InvariantWeights {
        weights: w.iter().map(|v| v / total).collect(),
        residual,
    })
}

/// Invariant weights of the mode chain frozen at `z`.
pub fn weights_at(spec: &ModelSpec, z: &[f64]) -> Result<InvariantWeights> {
    invariant_weights(&generator_at(spec, z)?)
}

/// Averaged drift `Fbar(z)` of the full state.
pub fn averaged_drift(spec: &ModelSpec, z: &[f64]) -> Result<Vec<f64>> {
    let w = weights_at(spec, z)?.weights;
    let d = spec.dim();
    let mut out = vec![0.0; d];
    for (k, wk) in w.iter().enumerate() {
        let drift = spec.stacked_drift_at(k, z)?;
        for i in 0..d {
            out[i] += wk * drift[i];
        }
    }
    Ok(out)
}

/// A deterministic trajectory sampled on a uniform grid.
#[derive(Debug, Clone)]
pub struct FlowPath {
    pub times: Vec<f64>,
    pub positions: Vec<Vec<f64>>,
}

impl FlowPath {
    pub fn terminal(&self) -> &[f64] {
        self.positions.last().expect("flow path is never empty")
    }
}

const DIVERGENCE_CAP: f64 = 1e6;

/// Integrate the averaged flow `zdot = Fbar(z)` with classical RK4.
/// The final step is shortened to land exactly on `t_end`. Trajectories
/// leaving `|z|_inf > 1e6` abort with a divergence error.
pub fn integrate_averaged(
    spec: &ModelSpec,
    z0: &[f64],
    t_end: f64,
    dt: f64,
) -> Result<FlowPath> {
    if !(t_end > 0.0) || !(dt > 0.0) {
        return Err(Error::Config(format!(
            "flow horizon {t_end} and step {dt} must be positive"
        )));
    }
    let d = spec.dim();
    if z0.len() != d {
        return Err(Error::Dimension(format!(
            "initial state has {} coordinates, model needs {d}",
            z0.len()
        )));
    }
    let mut times = vec![0.0];
    let mut positions = vec![z0.to_vec()];
    let mut z = z0.to_vec();
    let mut t = 0.0;
    while t < t_end - 1e-12 * t_end.max(1.0) {
        let h = dt.min(t_end - t);
        let k1 = averaged_drift(spec, &z)?;
        let k2 = averaged_drift(spec, &axpy(&z, 0.5 * h, &k1))?;
        let k3 = averaged_drift(spec, &axpy(&z, 0.5 * h, &k2))?;
        let k4 = averaged_drift(spec, &axpy(&z, h, &k3))?;
        for i in 0..d {
            z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        t += h;
        if z.iter().any(|v| v.abs() > DIVERGENCE_CAP) {
            return Err(Error::Divergence(format!(
                "averaged flow left |z| <= {DIVERGENCE_CAP} at t = {t:.6}"
            )));
        }
        times.push(t);
        positions.push(z.clone());
    }
    Ok(FlowPath { times, positions })
}

fn axpy(z: &[f64], a: f64, v: &[f64]) -> Vec<f64> {
    z.iter().zip(v).map(|(zi, vi)| zi + a * vi).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_model;
    use std::collections::BTreeMap;

    fn two_mode(params: &[(&str, f64)]) -> ModelSpec {
        let map: BTreeMap<String, f64> = params
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        builtin_model("two-mode-linear", &map).unwrap()
    }

    #[test]
    fn generator_rows_sum_to_zero() {
        let spec = two_mode(&[("c12", 1.7), ("c21", 0.4)]);
        let g = generator_at(&spec, &[0.3, -0.2]).unwrap();
        for i in 0..2 {
            let row: f64 = (0..2).map(|j| g.matrix[(i, j)]).sum();
            assert_eq!(row, 0.0);
        }
        assert_eq!(g.matrix[(0, 1)], 1.7);
        assert_eq!(g.matrix[(1, 0)], 0.4);
    }

    #[test]
    fn invariant_weights_match_detailed_balance() {
        // Two-state chain: w proportional to (c21, c12).
        let spec = two_mode(&[("c12", 1.0), ("c21", 3.0)]);
        let w = weights_at(&spec, &[0.0, 0.0]).unwrap();
        assert!((w.weights[0] - 0.75).abs() < 1e-12);
        assert!((w.weights[1] - 0.25).abs() < 1e-12);
        assert!(w.residual < 1e-12);
    }

    #[test]
    fn single_mode_weights_are_trivial() {
        let spec = builtin_model("ou-k1", &BTreeMap::new()).unwrap();
        let w = weights_at(&spec, &[0.5]).unwrap();
        assert_eq!(w.weights, vec![1.0]);
    }

    #[test]
    fn averaged_drift_of_symmetric_two_mode_model() {
        // Equal rates average the pulls toward +1 and -1 to -y; the slow
        // coordinate keeps its own drift y.
        let spec = two_mode(&[]);
        for &(x, y) in &[(0.2, 0.6), (-0.3, -0.8), (0.5, 0.0)] {
            let f = averaged_drift(&spec, &[x, y]).unwrap();
            assert!((f[0] - y).abs() < 1e-14);
            assert!((f[1] + y).abs() < 1e-14);
        }
    }

    #[test]
    fn weighted_averaged_drift() {
        // c12 = 1, c21 = 3 gives weights (3/4, 1/4) and fast component
        // 0.75*(1 - y) + 0.25*(-1 - y) = 0.5 - y.
        let spec = two_mode(&[("c12", 1.0), ("c21", 3.0)]);
        let f = averaged_drift(&spec, &[0.1, 0.2]).unwrap();
        assert!((f[0] - 0.2).abs() < 1e-12);
        assert!((f[1] - (0.5 - 0.2)).abs() < 1e-12);
    }

    #[test]
    fn rk4_flow_matches_closed_form() {
        // For the symmetric model Fbar = (y, -y), so y decays
        // exponentially and x integrates it.
        let spec = two_mode(&[]);
        let (x0, y0) = (0.3, 0.5);
        let t_end = 2.0;
        let flow = integrate_averaged(&spec, &[x0, y0], t_end, 1e-3).unwrap();
        let z = flow.terminal();
        let y_exact = y0 * (-t_end).exp();
        let x_exact = x0 + y0 * (1.0 - (-t_end).exp());
        assert!((z[0] - x_exact).abs() < 1e-10, "x = {}, exact {x_exact}", z[0]);
        assert!((z[1] - y_exact).abs() < 1e-10, "y = {}, exact {y_exact}", z[1]);
        assert_eq!(flow.times.len(), flow.positions.len());
        assert!((flow.times.last().unwrap() - t_end).abs() < 1e-12);
    }

    #[test]
    fn exploding_flow_reports_divergence() {
        let text = r#"
[dims]
n = 0
m = 1
K = 1

[drift]
F = []

[modes.1]
f = ["1 + z1^2"]
sigma = [["1"]]

[domain]
phi = "z1^2 - 1"
box = [[-2, 2]]

[boundary]
g = ["z1"]
"#;
        let spec = ModelSpec::from_toml_str(text).unwrap();
        let err = integrate_averaged(&spec, &[0.0], 10.0, 1e-3).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)), "{err}");
    }
}
