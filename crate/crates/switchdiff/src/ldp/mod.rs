//! Large-deviation machinery for the switching diffusion.
//!
//! Everything here is built around one object: the `K x K` Hamiltonian
//! matrix of the process at a frozen state `z`, momentum `p` (dual to the
//! position) and occupation dual `alpha` (dual to the vector of mode
//! occupation times):
//!
//! ```text
//!   H_km = c_km(z)                                         for k != m,
//!   H_kk = (1/2) p.at_k(z) p + p.Ft_k(z) + alpha_k - c_k(z),
//! ```
//!
//! where `Ft_k = (F, f_k)` is the stacked drift, `at_k` the full-state
//! diffusion `blockdiag((dh/eps) I_n, a_k)` with regularization `dh` on
//! the slow block, and `c_k` the total leaving rate. `H` is Metzler and
//! irreducible, so it has a simple principal eigenvalue `lambda(z, p,
//! alpha)` with strictly positive right and left eigenvectors; `lambda`
//! is convex in `(p, alpha)` and its Legendre transforms are the rate
//! functions of the joint position/occupation process:
//!
//! * [`rate::joint_rate`]: the running cost `eta(z, q, beta)` of moving
//!   with velocity `q` while spending occupation fractions `beta`,
//! * [`rate::position_rate`]: `rho(z, q) = inf_beta eta`, paths only,
//! * [`rate::occupation_rate`]: the pure occupation cost `L(beta)` of the
//!   frozen mode chain.
//!
//! Time integrals of these costs over discretized paths live in
//! [`action`], and [`verify`] packages the identities that make the whole
//! construction trustworthy (eigenvalue normalization at the equilibrium,
//! gauge covariance, Fenchel-Young, convexity) into a machine-checkable
//! report.

pub mod action;
pub mod eigen;
pub mod rate;
pub mod verify;

pub use action::{
    joint_action, position_action, scheduled_action, ActionOptions, ActionValue,
    PathDiscretization,
};
pub use eigen::{eigen_gradient, principal_eigenvalue, EigenData, GradientVar};
pub use rate::{
    joint_rate, joint_rate_with, occupation_rate, occupation_rate_with, position_rate,
    position_rate_with, ConjugateOptions, ConjugateSolution,
};
pub use verify::{verify_invariants, InvariantCheck, InvariantReport};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, RateSchedule};
use crate::switching::generator_at;

/// Coefficients of the Hamiltonian frozen at a state point. Building one
/// evaluates every coefficient field once; evaluating `H` or `lambda` at
/// different `(p, alpha)` afterwards is pure arithmetic, which is what
/// the conjugate solvers and path optimizers hammer on.
#[derive(Debug, Clone)]
pub struct Hamiltonian {
    pub anchor: Vec<f64>,
    pub modes: usize,
    pub dim: usize,
    pub eps: f64,
    pub delta_hat: f64,
    /// Stacked drifts `Ft_k`, `K x d`.
    drift: Vec<Vec<f64>>,
    /// Full-state diffusions `at_k`, `K` row-major `d x d` blocks.
    diffusion: Vec<Vec<f64>>,
    /// Generator with diagonal, `K x K` row-major.
    generator: Vec<f64>,
}

impl Hamiltonian {
    /// Freeze the model coefficients at `z` with regularization `delta_hat`
    /// on the slow block (`delta_hat = 0` leaves the slow block degenerate).
    pub fn at(spec: &ModelSpec, z: &[f64], eps: f64, delta_hat: f64) -> Result<Hamiltonian> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("eps = {eps} must be positive")));
        }
        if delta_hat < 0.0 {
            return Err(Error::Config(format!(
                "delta_hat = {delta_hat} must be nonnegative"
            )));
        }
        let generator = generator_at(spec, z)?;
        let gen_flat = flatten_generator(&generator.matrix);
        Self::build(spec, z, eps, delta_hat, gen_flat)
    }

    /// Same coefficients but with the switching intensities replaced by a
    /// time schedule evaluated at `time`.
    pub fn scheduled_at(
        spec: &ModelSpec,
        z: &[f64],
        schedule: &RateSchedule,
        time: f64,
        eps: f64,
        delta_hat: f64,
    ) -> Result<Hamiltonian> {
        if schedule.modes != spec.modes {
            return Err(Error::Dimension(format!(
                "schedule has {} modes, model has {}",
                schedule.modes, spec.modes
            )));
        }
        let k = spec.modes;
        let mut gen_flat = vec![0.0; k * k];
        for i in 0..k {
            let mut leaving = 0.0;
            for j in 0..k {
                if i == j {
                    continue;
                }
                let c = schedule.rate_at(i, j, time)?;
                gen_flat[i * k + j] = c;
                leaving += c;
            }
            gen_flat[i * k + i] = -leaving;
        }
        Self::build(spec, z, eps, delta_hat, gen_flat)
    }

    fn build(
        spec: &ModelSpec,
        z: &[f64],
        eps: f64,
        delta_hat: f64,
        generator: Vec<f64>,
    ) -> Result<Hamiltonian> {
        let d = spec.dim();
        let n = spec.slow_dim;
        let mut drift = Vec::with_capacity(spec.modes);
        let mut diffusion = Vec::with_capacity(spec.modes);
        for k in 0..spec.modes {
            drift.push(spec.stacked_drift_at(k, z)?);
            let a = spec.diffusion_at(k, z)?;
            let mut full = vec![0.0; d * d];
            for i in 0..n {
                full[i * d + i] = delta_hat / eps;
            }
            for i in 0..spec.fast_dim {
                for j in 0..spec.fast_dim {
                    full[(n + i) * d + (n + j)] = a[(i, j)];
                }
            }
            diffusion.push(full);
        }
        Ok(Hamiltonian {
            anchor: z.to_vec(),
            modes: spec.modes,
            dim: d,
            eps,
            delta_hat,
            drift,
            diffusion,
            generator,
        })
    }

    pub fn drift(&self, mode: usize) -> &[f64] {
        &self.drift[mode]
    }

    pub fn diffusion(&self, mode: usize) -> &[f64] {
        &self.diffusion[mode]
    }

    pub fn generator_entry(&self, from: usize, to: usize) -> f64 {
        self.generator[from * self.modes + to]
    }

    /// `at_k p` into `out`.
    pub fn apply_diffusion(&self, mode: usize, p: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let a = &self.diffusion[mode];
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += a[i * d + j] * p[j];
            }
            out[i] = acc;
        }
    }

    /// Diagonal contribution `(1/2) p.at_k p + p.Ft_k` of mode `k`.
    pub fn diagonal_term(&self, mode: usize, p: &[f64]) -> f64 {
        let d = self.dim;
        let a = &self.diffusion[mode];
        let f = &self.drift[mode];
        let mut quad = 0.0;
        let mut lin = 0.0;
        for i in 0..d {
            let mut row = 0.0;
            for j in 0..d {
                row += a[i * d + j] * p[j];
            }
            quad += p[i] * row;
            lin += p[i] * f[i];
        }
        0.5 * quad + lin
    }

    /// Fill `out` (row-major `K x K`) with `H(p, alpha)`.
    pub fn fill_entries(&self, p: &[f64], alpha: &[f64], out: &mut [f64]) {
        let k = self.modes;
        out.copy_from_slice(&self.generator);
        for i in 0..k {
            out[i * k + i] += self.diagonal_term(i, p) + alpha[i];
        }
    }

    /// Assembled Hamiltonian matrix with its evaluation context attached.
    pub fn matrix(&self, p: &[f64], alpha: &[f64]) -> HamiltonianMatrix {
        assert_eq!(p.len(), self.dim, "momentum dimension mismatch");
        assert_eq!(alpha.len(), self.modes, "occupation dual dimension mismatch");
        let mut entries = vec![0.0; self.modes * self.modes];
        self.fill_entries(p, alpha, &mut entries);
        HamiltonianMatrix {
            context: self.clone(),
            momentum: p.to_vec(),
            occupation_dual: alpha.to_vec(),
            entries,
        }
    }
}

fn flatten_generator(m: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    let k = m.nrows();
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            out[i * k + j] = m[(i, j)];
        }
    }
    out
}

/// `H(z, p, alpha)` together with the point it was assembled at.
#[derive(Debug, Clone)]
pub struct HamiltonianMatrix {
    pub context: Hamiltonian,
    pub momentum: Vec<f64>,
    pub occupation_dual: Vec<f64>,
    /// Row-major `K x K`.
    pub entries: Vec<f64>,
}

impl HamiltonianMatrix {
    pub fn modes(&self) -> usize {
        self.context.modes
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.context.modes + j]
    }
}

/// Assemble `H(z, p, alpha)` from scratch. Callers evaluating many
/// `(p, alpha)` at one `z` should build a [`Hamiltonian`] once instead.
pub fn h_matrix(
    spec: &ModelSpec,
    z: &[f64],
    p: &[f64],
    alpha: &[f64],
    eps: f64,
    delta_hat: f64,
) -> Result<HamiltonianMatrix> {
    Ok(Hamiltonian::at(spec, z, eps, delta_hat)?.matrix(p, alpha))
}
