//! Principal eigenvalue of the Hamiltonian matrix.
//!
//! `H` is Metzler (nonnegative off-diagonal) and irreducible whenever the
//! switching rates are strictly positive, so Perron-Frobenius applies to
//! `A = H + s I` for a shift `s` large enough to make `A` nonnegative
//! with positive diagonal. The dominant eigenpair of `A` is computed by
//! power iteration on `A` and `A^T` simultaneously; the shift guarantees
//! primitivity, hence convergence. A dense Schur decomposition serves as
//! fallback for the rare stiff case and as an independent oracle in the
//! tests.

use crate::error::{Error, Result};
use crate::ldp::HamiltonianMatrix;
use nalgebra::DMatrix;

/// Principal eigenpair: simple real eigenvalue with strictly positive
/// right vector `u` (normalized to sum 1) and left vector `v` scaled so
/// `v . u = 1`.
#[derive(Debug, Clone)]
pub struct EigenData {
    pub value: f64,
    pub right: Vec<f64>,
    pub left: Vec<f64>,
}

/// Which dual variable a derivative of the eigenvalue is taken in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientVar {
    /// Derivatives in the momentum `p`.
    Momentum,
    /// Derivatives in the occupation dual `alpha`.
    Occupation,
}

/// Reusable scratch for repeated eigenvalue solves at the same mode count.
/// Warm-started iterations in inner optimization loops converge in a
/// handful of steps because consecutive matrices differ slightly.
#[derive(Debug, Clone)]
pub struct PerronSolver {
    k: usize,
    u: Vec<f64>,
    v: Vec<f64>,
    tmp: Vec<f64>,
    warm: bool,
}

const POWER_TOL: f64 = 1e-13;
const POWER_MAX_ITER: usize = 60_000;

impl PerronSolver {
    pub fn new(modes: usize) -> PerronSolver {
        PerronSolver {
            k: modes,
            u: vec![1.0 / modes as f64; modes],
            v: vec![1.0 / modes as f64; modes],
            tmp: vec![0.0; modes],
            warm: false,
        }
    }

    /// Forget the previous eigenvector estimate.
    pub fn reset(&mut self) {
        for x in self.u.iter_mut().chain(self.v.iter_mut()) {
            *x = 1.0 / self.k as f64;
        }
        self.warm = false;
    }

    /// Dominant eigenvalue of the Metzler matrix `h` (row-major `k x k`).
    /// Eigenvectors stay in the solver for warm starts; use
    /// [`PerronSolver::eigen_data`] to extract them.
    pub fn solve(&mut self, h: &[f64]) -> Result<f64> {
        let k = self.k;
        debug_assert_eq!(h.len(), k * k);
        if k == 1 {
            self.u[0] = 1.0;
            self.v[0] = 1.0;
            self.warm = true;
            return Ok(h[0]);
        }

        // Shift so A = H + s I is nonnegative with a safely positive
        // diagonal; the extra margin keeps A primitive even when some
        // diagonal of H + max(-H_kk) I would vanish.
        let mut max_neg_diag = 0.0_f64;
        let mut scale = 0.0_f64;
        for i in 0..k {
            max_neg_diag = max_neg_diag.max(-h[i * k + i]);
            for j in 0..k {
                scale = scale.max(h[i * k + j].abs());
            }
        }
        let shift = max_neg_diag + 0.5 + 0.01 * scale;

        if !self.warm {
            self.reset();
        }
        let mut lambda = 0.0;
        let mut converged = false;
        for iter in 0..POWER_MAX_ITER {
            // u <- normalize(A u)
            mul_shifted(h, shift, &self.u, &mut self.tmp, k, false);
            let su: f64 = self.tmp.iter().sum();
            if !(su > 0.0) || !su.is_finite() {
                self.reset();
                return dense_fallback(h, k, self);
            }
            for i in 0..k {
                self.u[i] = self.tmp[i] / su;
            }
            // v <- normalize(A^T v)
            mul_shifted(h, shift, &self.v, &mut self.tmp, k, true);
            let sv: f64 = self.tmp.iter().sum();
            if !(sv > 0.0) || !sv.is_finite() {
                self.reset();
                return dense_fallback(h, k, self);
            }
            for i in 0..k {
                self.v[i] = self.tmp[i] / sv;
            }

            // Rayleigh estimate and residual check every few sweeps.
            if iter % 4 == 3 || iter == 0 {
                mul_shifted(h, shift, &self.u, &mut self.tmp, k, false);
                let vu: f64 = self.v.iter().zip(&self.u).map(|(a, b)| a * b).sum();
                let vau: f64 = self.v.iter().zip(&self.tmp).map(|(a, b)| a * b).sum();
                let mu = vau / vu;
                let mut res = 0.0_f64;
                for i in 0..k {
                    res = res.max((self.tmp[i] - mu * self.u[i]).abs());
                }
                mul_shifted(h, shift, &self.v, &mut self.tmp, k, true);
                for i in 0..k {
                    res = res.max((self.tmp[i] - mu * self.v[i]).abs());
                }
                if res <= POWER_TOL * (shift + scale + 1.0) {
                    lambda = mu - shift;
                    converged = true;
                    break;
                }
            }
        }
        if !converged {
            self.reset();
            return dense_fallback(h, k, self);
        }
        self.warm = true;
        Ok(lambda)
    }

    /// Componentwise products `v_k u_k / (v . u)` of the current eigenpair;
    /// these are the derivatives of the eigenvalue in the diagonal entries.
    pub fn weights_into(&self, out: &mut [f64]) {
        let vu: f64 = self.v.iter().zip(&self.u).map(|(a, b)| a * b).sum();
        for i in 0..self.k {
            out[i] = self.v[i] * self.u[i] / vu;
        }
    }

    /// Eigenpair at the last solved matrix, normalized: `sum u = 1`,
    /// `v . u = 1`. Errors if a component is not strictly positive, which
    /// would contradict irreducibility of the switching structure.
    pub fn eigen_data(&self, value: f64) -> Result<EigenData> {
        let su: f64 = self.u.iter().sum();
        let right: Vec<f64> = self.u.iter().map(|x| x / su).collect();
        let vu: f64 = self.v.iter().zip(&right).map(|(a, b)| a * b).sum();
        if vu.abs() < 1e-300 {
            return Err(Error::NonConvergence(
                "left/right eigenvectors nearly orthogonal".into(),
            ));
        }
        let left: Vec<f64> = self.v.iter().map(|x| x / vu).collect();
        if right.iter().any(|x| *x <= 0.0) || left.iter().any(|x| *x <= 0.0) {
            return Err(Error::NonConvergence(
                "principal eigenvector has nonpositive components".into(),
            ));
        }
        Ok(EigenData {
            value,
            right,
            left,
        })
    }
}

fn mul_shifted(h: &[f64], shift: f64, x: &[f64], out: &mut [f64], k: usize, transpose: bool) {
    for i in 0..k {
        let mut acc = shift * x[i];
        if transpose {
            for j in 0..k {
                acc += h[j * k + i] * x[j];
            }
        } else {
            for j in 0..k {
                acc += h[i * k + j] * x[j];
            }
        }
        out[i] = acc;
    }
}

/// Dense eigenvalue fallback via Schur decomposition, for matrices the
/// power iteration cannot crack. Only sensible for small mode counts.
fn dense_fallback(h: &[f64], k: usize, solver: &mut PerronSolver) -> Result<f64> {
    if k > 8 {
        return Err(Error::NonConvergence(format!(
            "power iteration stalled and dense fallback is limited to K <= 8 (K = {k})"
        )));
    }
    let m = DMatrix::from_row_slice(k, k, h);
    let lambda = dense_principal_value(&m)?;
    // Recover eigenvectors by inverse iteration on the shifted matrix.
    let mut shifted = m.clone();
    for i in 0..k {
        shifted[(i, i)] -= lambda + 1e-10;
    }
    let lu = shifted.clone().lu();
    let mut u = DMatrix::from_element(k, 1, 1.0);
    let mut ok = true;
    for _ in 0..50 {
        match lu.solve(&u) {
            Some(next) => {
                let norm = next.amax();
                if !(norm > 0.0) || !norm.is_finite() {
                    ok = false;
                    break;
                }
                u = next / norm;
            }
            None => {
                ok = false;
                break;
            }
        }
    }
    let mut shifted_t = m.transpose();
    for i in 0..k {
        shifted_t[(i, i)] -= lambda + 1e-10;
    }
    let lu_t = shifted_t.lu();
    let mut v = DMatrix::from_element(k, 1, 1.0);
    for _ in 0..50 {
        match lu_t.solve(&v) {
            Some(next) => {
                let norm = next.amax();
                if !(norm > 0.0) || !norm.is_finite() {
                    ok = false;
                    break;
                }
                v = next / norm;
            }
            None => {
                ok = false;
                break;
            }
        }
    }
    if !ok {
        return Err(Error::NonConvergence(
            "dense fallback failed to recover eigenvectors".into(),
        ));
    }
    // Perron vectors have one sign; flip to positive.
    let su: f64 = u.iter().sum();
    let sv: f64 = v.iter().sum();
    for i in 0..k {
        solver.u[i] = u[(i, 0)] * su.signum();
        solver.v[i] = v[(i, 0)] * sv.signum();
    }
    solver.warm = true;
    Ok(lambda)
}

/// Largest real eigenvalue from a dense decomposition; the Perron root of
/// a Metzler matrix is real and dominant, so this is well defined.
pub(crate) fn dense_principal_value(m: &DMatrix<f64>) -> Result<f64> {
    let eigs = m.clone().schur().complex_eigenvalues();
    let mut best = f64::NEG_INFINITY;
    for e in eigs.iter() {
        if e.re > best {
            best = e.re;
        }
    }
    if best.is_finite() {
        Ok(best)
    } else {
        Err(Error::NonConvergence("dense eigenvalue solve failed".into()))
    }
}

/// Principal eigenpair of an assembled Hamiltonian matrix.
pub fn principal_eigenvalue(h: &HamiltonianMatrix) -> Result<EigenData> {
    let mut solver = PerronSolver::new(h.modes());
    let value = solver.solve(&h.entries)?;
    solver.eigen_data(value)
}

/// First-order derivatives of the principal eigenvalue in `p` or `alpha`
/// by first-order perturbation theory: for a simple eigenvalue,
/// `d lambda = v . (dH) u` with `v . u = 1`. In `alpha` this gives the
/// componentwise products `v_k u_k`; in `p` the diffusion and drift of
/// each mode enter weighted by the same products.
pub fn eigen_gradient(h: &HamiltonianMatrix, eig: &EigenData, which: GradientVar) -> Vec<f64> {
    let ctx = &h.context;
    let k = ctx.modes;
    match which {
        GradientVar::Occupation => (0..k).map(|i| eig.left[i] * eig.right[i]).collect(),
        GradientVar::Momentum => {
            let d = ctx.dim;
            let mut out = vec![0.0; d];
            let mut ap = vec![0.0; d];
            for mode in 0..k {
                let w = eig.left[mode] * eig.right[mode];
                ctx.apply_diffusion(mode, &h.momentum, &mut ap);
                let f = ctx.drift(mode);
                for i in 0..d {
                    out[i] += w * (ap[i] + f[i]);
                }
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ldp::Hamiltonian;
    use crate::model::builtin_model;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeMap;

    /// Closed form for the dominant eigenvalue of a 2x2 Metzler matrix.
    fn perron_2x2(a: f64, b: f64, c: f64, d: f64) -> f64 {
        0.5 * (a + d) + (0.25 * (a - d).powi(2) + b * c).sqrt()
    }

    #[test]
    fn power_iteration_matches_2x2_closed_form() {
        let cases = [
            [0.3, 1.0, 1.0, -0.4],
            [-2.0, 0.5, 3.0, -2.0],
            [5.0, 0.01, 0.02, 4.9],
            [0.0, 2.0, 2.0, 0.0],
        ];
        let mut solver = PerronSolver::new(2);
        for h in cases {
            solver.reset();
            let lambda = solver.solve(&h).unwrap();
            let exact = perron_2x2(h[0], h[1], h[2], h[3]);
            assert!(
                (lambda - exact).abs() < 1e-10 * (1.0 + exact.abs()),
                "{lambda} vs {exact}"
            );
        }
    }

    #[test]
    fn power_iteration_matches_dense_solver_on_random_metzler() {
        let mut rng = StdRng::seed_from_u64(0x00e1_57a7);
        for trial in 0..60 {
            let k = rng.gen_range(2..=6);
            let mut h = vec![0.0; k * k];
            for i in 0..k {
                for j in 0..k {
                    h[i * k + j] = if i == j {
                        rng.gen_range(-4.0..4.0)
                    } else {
                        rng.gen_range(0.05..3.0)
                    };
                }
            }
            let mut solver = PerronSolver::new(k);
            let lambda = solver.solve(&h).unwrap();
            let dense =
                dense_principal_value(&DMatrix::from_row_slice(k, k, &h)).unwrap();
            assert!(
                (lambda - dense).abs() < 1e-9 * (1.0 + dense.abs()),
                "trial {trial}: {lambda} vs {dense}"
            );
            // residual check of the eigenpair
            let eig = solver.eigen_data(lambda).unwrap();
            for i in 0..k {
                let mut hu = 0.0;
                for j in 0..k {
                    hu += h[i * k + j] * eig.right[j];
                }
                assert!((hu - lambda * eig.right[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn eigenvectors_are_positive_and_normalized() {
        let spec = builtin_model("two-mode-linear", &BTreeMap::new()).unwrap();
        let ham = Hamiltonian::at(&spec, &[0.2, -0.3], 0.1, 0.01).unwrap();
        let h = ham.matrix(&[0.4, -0.7], &[0.2, 0.0]);
        let eig = principal_eigenvalue(&h).unwrap();
        assert!(eig.right.iter().all(|x| *x > 0.0));
        assert!(eig.left.iter().all(|x| *x > 0.0));
        let su: f64 = eig.right.iter().sum();
        let vu: f64 = eig
            .left
            .iter()
            .zip(&eig.right)
            .map(|(a, b)| a * b)
            .sum();
        assert!((su - 1.0).abs() < 1e-12);
        assert!((vu - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let spec = builtin_model("two-mode-linear", &BTreeMap::new()).unwrap();
        let ham = Hamiltonian::at(&spec, &[0.15, 0.4], 0.2, 0.04).unwrap();
        let p = [0.3, -0.5];
        let alpha = [0.1, -0.2];
        let h = ham.matrix(&p, &alpha);
        let eig = principal_eigenvalue(&h).unwrap();
        let gp = eigen_gradient(&h, &eig, GradientVar::Momentum);
        let ga = eigen_gradient(&h, &eig, GradientVar::Occupation);
        let fd = 1e-6;
        for i in 0..2 {
            let mut pp = p;
            pp[i] += fd;
            let up = principal_eigenvalue(&ham.matrix(&pp, &alpha)).unwrap().value;
            pp[i] -= 2.0 * fd;
            let dn = principal_eigenvalue(&ham.matrix(&pp, &alpha)).unwrap().value;
            let est = (up - dn) / (2.0 * fd);
            assert!((gp[i] - est).abs() < 1e-6, "p[{i}]: {} vs {est}", gp[i]);
        }
        for k in 0..2 {
            let mut aa = alpha;
            aa[k] += fd;
            let up = principal_eigenvalue(&ham.matrix(&p, &aa)).unwrap().value;
            aa[k] -= 2.0 * fd;
            let dn = principal_eigenvalue(&ham.matrix(&p, &aa)).unwrap().value;
            let est = (up - dn) / (2.0 * fd);
            assert!((ga[k] - est).abs() < 1e-6, "alpha[{k}]: {} vs {est}", ga[k]);
        }
        // occupation gradient sums to 1 by the normalization v . u = 1
        assert!((ga.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_mode_is_explicit() {
        let spec = builtin_model("ou-k1", &BTreeMap::new()).unwrap();
        let ham = Hamiltonian::at(&spec, &[0.8], 0.5, 0.0).unwrap();
        let p = [1.3];
        let h = ham.matrix(&p, &[0.7]);
        let eig = principal_eigenvalue(&h).unwrap();
        // lambda = p^2/2 + p * (-z) + alpha for unit noise
        let expect = 0.5 * 1.3 * 1.3 + 1.3 * (-0.8) + 0.7;
        assert!((eig.value - expect).abs() < 1e-12);
        assert_eq!(eig.right, vec![1.0]);
        assert_eq!(eig.left, vec![1.0]);
    }
}
