//! Finite-difference solver for the coupled Dirichlet system on masked grids.
//!
//! Each mode `k` carries a scalar field `v_k` satisfying, at interior points,
//!
//! ```text
//! <grad v_k, Ft_k> + (eps/2) tr{at_k Hess v_k}
//!     + (1/eps) sum_j c_kj (v_j - v_k) = 0,
//! ```
//!
//! with `v_k = g_k` on the domain boundary. The slow block of `at_k` is
//! `delta_hat/eps` times the identity, so a positive `delta_hat` is required
//! whenever slow coordinates are present; otherwise the scheme would have no
//! diffusion along those axes and lose its M-matrix structure.
//!
//! Discretization: first-order upwind differences for the advection,
//! second-order centered differences for the diffusion, centered mixed
//! stencils for cross-derivative terms (flagged, since they can break the
//! M-matrix sign pattern), and exact `(1/eps) c_kj` coupling between the mode
//! fields at the same cell. Cells are classified against the level function:
//! interior cells carry unknowns, their non-interior stencil neighbors become
//! boundary cells carrying `g_k` evaluated at the cell center projected onto
//! the level set, and everything else is exterior and untouched.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{box_samples, ModelSpec};
use crate::sim::{batch_exit_mc, SimConfig};

/// Hard cap on the total lattice size.
const MAX_CELLS: usize = 2_000_000;

/// Solver parameters for one Dirichlet solve.
#[derive(Debug, Clone, Serialize)]
pub struct SolveConfig {
    pub eps: f64,
    /// Slow-noise regularization; must be positive when the model has slow
    /// coordinates.
    pub delta_hat: f64,
    /// Grid spacing, identical on every axis.
    pub h: f64,
    /// Relative residual target for the iterative solve.
    pub tol: f64,
    /// Iteration cap for the linear solver.
    pub max_iter: usize,
    /// Damping factor in `(0, 2)` for the preconditioning sweeps.
    pub relaxation: f64,
}

impl SolveConfig {
    /// Defaults for a given `eps`: `delta_hat = eps^2`, a spacing that
    /// resolves typical desk-scale domains, and a residual target tight
    /// enough that the solution error stays well below the maximum-principle
    /// slack.
    pub fn new(eps: f64) -> Self {
        SolveConfig {
            eps,
            delta_hat: eps * eps,
            h: 0.05,
            tol: 1e-12,
            max_iter: 4_000,
            relaxation: 1.0,
        }
    }

    fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::Config("eps must be positive".into()));
        }
        if spec.slow_dim > 0 && !(self.delta_hat > 0.0) {
            return Err(Error::Config(
                "slow coordinates need a positive slow-noise rate for the grid operator".into(),
            ));
        }
        if !(self.delta_hat >= 0.0) {
            return Err(Error::Config("delta_hat must be nonnegative".into()));
        }
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(Error::Config("grid spacing must be positive".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("solver tolerance must be positive".into()));
        }
        if !(self.relaxation > 0.0 && self.relaxation < 2.0) {
            return Err(Error::Config(
                "relaxation factor must lie in (0, 2)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CellClass {
    Exterior,
    Interior,
    Boundary,
}

/// Rectangular lattice over the bounding box with level-set masking.
#[derive(Debug, Clone, Serialize)]
pub struct Grid {
    /// Cells per axis.
    pub dims: Vec<usize>,
    /// Coordinate of the center of cell index 0 on each axis.
    pub origin: Vec<f64>,
    pub h: f64,
    /// Cell classification, flattened with the last axis fastest.
    pub class: Vec<CellClass>,
    /// Flat indices of the interior cells, ascending.
    pub interior: Vec<usize>,
    /// Flat index to interior rank; `usize::MAX` for non-interior cells.
    #[serde(skip)]
    pub rank: Vec<usize>,
    /// For boundary cells: the cell center projected onto the level set,
    /// where the boundary data is evaluated.
    #[serde(skip)]
    pub projection: Vec<Option<Vec<f64>>>,
}

impl Grid {
    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn cells(&self) -> usize {
        self.class.len()
    }

    pub fn cell_center(&self, flat: usize) -> Vec<f64> {
        let mut idx = flat;
        let d = self.dim();
        let mut center = vec![0.0; d];
        for axis in (0..d).rev() {
            let i = idx % self.dims[axis];
            idx /= self.dims[axis];
            center[axis] = self.origin[axis] + i as f64 * self.h;
        }
        center
    }

    fn flat(&self, multi: &[usize]) -> usize {
        let mut f = 0;
        for (axis, &i) in multi.iter().enumerate() {
            f = f * self.dims[axis] + i;
        }
        f
    }

    fn multi(&self, flat: usize) -> Vec<usize> {
        let mut idx = flat;
        let d = self.dim();
        let mut m = vec![0; d];
        for axis in (0..d).rev() {
            m[axis] = idx % self.dims[axis];
            idx /= self.dims[axis];
        }
        m
    }

    /// Neighbor in direction `axis` with step `step` (`-1` or `+1`), or an
    /// error when the lattice edge is breached.
    fn neighbor(&self, flat: usize, axis: usize, step: isize) -> Result<usize> {
        let mut m = self.multi(flat);
        let i = m[axis] as isize + step;
        if i < 0 || i as usize >= self.dims[axis] {
            return Err(Error::Model(
                "difference stencil leaves the lattice; enlarge the bounding box".into(),
            ));
        }
        m[axis] = i as usize;
        Ok(self.flat(&m))
    }
}

/// Project a point onto the level set along the gradient direction with a few
/// Newton steps.
fn project_to_boundary(spec: &ModelSpec, z: &[f64]) -> Result<Vec<f64>> {
    let d = z.len();
    let step = 1e-6 * spec.domain.box_diameter().max(1.0);
    let mut point = z.to_vec();
    for _ in 0..4 {
        let phi = spec.level_at(&point)?;
        let mut grad = vec![0.0; d];
        let mut gg = 0.0;
        for j in 0..d {
            let mut zp = point.clone();
            let mut zm = point.clone();
            zp[j] += step;
            zm[j] -= step;
            grad[j] = (spec.level_at(&zp)? - spec.level_at(&zm)?) / (2.0 * step);
            gg += grad[j] * grad[j];
        }
        if gg <= 1e-24 {
            return Err(Error::Degenerate(
                "vanishing level-set gradient while projecting a boundary cell".into(),
            ));
        }
        for j in 0..d {
            point[j] -= phi * grad[j] / gg;
        }
    }
    Ok(point)
}

/// Detect structurally nonzero off-diagonal diffusion entries by sampling.
fn has_cross_diffusion(spec: &ModelSpec) -> Result<bool> {
    if spec.fast_dim < 2 {
        return Ok(false);
    }
    for z in box_samples(&spec.domain.bounds, 16, 3) {
        for k in 0..spec.modes {
            let a = spec.diffusion_at(k, &z)?;
            for i in 0..spec.fast_dim {
                for j in 0..spec.fast_dim {
                    if i != j && a[(i, j)].abs() > 1e-14 {
                        return Ok(true);
                    }
                }
            }
        }
    }
    Ok(false)
}

/// Build the masked lattice for `spec` with spacing `cfg.h`.
pub fn build_grid(spec: &ModelSpec, cfg: &SolveConfig) -> Result<Grid> {
    cfg.validate(spec)?;
    let d = spec.dim();
    if d > 3 {
        return Err(Error::Dimension(
            "grid solves support at most three total dimensions".into(),
        ));
    }
    let mut dims = Vec::with_capacity(d);
    let mut origin = Vec::with_capacity(d);
    let mut total = 1usize;
    for &(lo, hi) in &spec.domain.bounds {
        let count = ((hi - lo) / cfg.h).floor() as usize;
        if count < 4 {
            return Err(Error::Config(format!(
                "grid spacing {} leaves fewer than 4 cells on an axis",
                cfg.h
            )));
        }
        // Center the lattice within the box.
        let span = (count - 1) as f64 * cfg.h;
        origin.push(0.5 * (lo + hi) - 0.5 * span);
        dims.push(count);
        total = total
            .checked_mul(count)
            .filter(|t| *t <= MAX_CELLS)
            .ok_or_else(|| Error::Config("grid exceeds the cell limit".into()))?;
    }

    let mut grid = Grid {
        dims,
        origin,
        h: cfg.h,
        class: vec![CellClass::Exterior; total],
        interior: Vec::new(),
        rank: vec![usize::MAX; total],
        projection: vec![None; total],
    };
    for flat in 0..total {
        if spec.level_at(&grid.cell_center(flat))? < 0.0 {
            grid.class[flat] = CellClass::Interior;
        }
    }

    // Stencil neighbors of interior cells become boundary cells. Diagonal
    // neighbors participate only when mixed derivatives are present.
    let cross = has_cross_diffusion(spec)?;
    let interiors: Vec<usize> = (0..total)
        .filter(|f| grid.class[*f] == CellClass::Interior)
        .collect();
    for &flat in &interiors {
        for axis in 0..d {
            for step in [-1isize, 1] {
                let nb = grid.neighbor(flat, axis, step)?;
                if grid.class[nb] == CellClass::Exterior {
                    grid.class[nb] = CellClass::Boundary;
                }
            }
        }
        if cross {
            for a in 0..d {
                for b in a + 1..d {
                    for sa in [-1isize, 1] {
                        for sb in [-1isize, 1] {
                            let nb = grid.neighbor(grid.neighbor(flat, a, sa)?, b, sb)?;
                            if grid.class[nb] == CellClass::Exterior {
                                grid.class[nb] = CellClass::Boundary;
                            }
                        }
                    }
                }
            }
        }
    }

    for flat in 0..total {
        match grid.class[flat] {
            CellClass::Interior => {
                grid.rank[flat] = grid.interior.len();
                grid.interior.push(flat);
            }
            CellClass::Boundary => {
                grid.projection[flat] = Some(project_to_boundary(spec, &grid.cell_center(flat))?);
            }
            CellClass::Exterior => {}
        }
    }
    if grid.interior.is_empty() {
        return Err(Error::Config(
            "no interior cells; refine the grid or check the domain".into(),
        ));
    }
    Ok(grid)
}

/// One assembled row: positive diagonal plus off-diagonal entries on other
/// unknowns; boundary contributions are folded into the right-hand side.
#[derive(Debug, Clone)]
pub struct Row {
    pub diag: f64,
    pub entries: Vec<(u32, f64)>,
}

/// The assembled linear system `A u = b` over interior-cell unknowns,
/// ordered cell-major (all modes of a cell adjacent).
#[derive(Debug)]
pub struct AssembledSystem {
    pub rows: Vec<Row>,
    pub rhs: Vec<f64>,
    pub modes: usize,
    /// True when centered mixed stencils were emitted; those can carry
    /// positive off-diagonal entries and void the M-matrix guarantee.
    pub has_cross_terms: bool,
}

impl AssembledSystem {
    pub fn unknowns(&self) -> usize {
        self.rows.len()
    }

    /// Sup-norm of `A u - b`.
    pub fn residual_sup(&self, u: &[f64]) -> f64 {
        let mut worst = 0.0_f64;
        for (r, row) in self.rows.iter().enumerate() {
            let mut acc = row.diag * u[r];
            for &(c, v) in &row.entries {
                acc += v * u[c as usize];
            }
            worst = worst.max((acc - self.rhs[r]).abs());
        }
        worst
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (r, row) in self.rows.iter().enumerate() {
            let mut acc = row.diag * x[r];
            for &(c, v) in &row.entries {
                acc += v * x[c as usize];
            }
            y[r] = acc;
        }
    }
}

/// Preconditioner application `u ~= A^-1 y`: one damped forward plus one
/// backward Gauss-Seidel sweep from zero. Alternating directions keep
/// advection-dominated rows effective whichever way the drift points.
fn sweep_apply(system: &AssembledSystem, omega: f64, y: &[f64], u: &mut [f64]) {
    let n = system.unknowns();
    for x in u.iter_mut() {
        *x = 0.0;
    }
    for pass in 0..2 {
        for step in 0..n {
            let r = if pass == 0 { step } else { n - 1 - step };
            let row = &system.rows[r];
            let mut acc = y[r];
            for &(c, v) in &row.entries {
                acc -= v * u[c as usize];
            }
            u[r] += omega * (acc / row.diag - u[r]);
        }
    }
}

/// BiCGStab on the assembled system, preconditioned by [`sweep_apply`],
/// starting from zero. Returns the solution, the iteration count and the
/// final true sup-norm residual; convergence is always confirmed against
/// the recomputed residual, never the recursive one.
fn krylov_solve(
    system: &AssembledSystem,
    target: f64,
    max_iter: usize,
    omega: f64,
) -> (Vec<f64>, usize, f64) {
    let n = system.unknowns();
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    let sup = |a: &[f64]| -> f64 { a.iter().fold(0.0_f64, |m, x| m.max(x.abs())) };

    let mut x = vec![0.0; n];
    let mut r = system.rhs.clone();
    let mut residual = sup(&r);
    if residual <= target {
        return (x, 0, residual);
    }

    let mut rhat = r.clone();
    let mut p = r.clone();
    let mut v = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut ph = vec![0.0; n];
    let mut sh = vec![0.0; n];
    let mut rho = dot(&rhat, &r);
    let mut iterations = 0;
    let mut last_checked = residual;
    let mut stalls = 0;

    // Recompute the true residual into `r` and restart the recurrences on
    // the current iterate; used for drift control and after breakdowns.
    macro_rules! refresh {
        () => {{
            system.matvec(&x, &mut t);
            for i in 0..n {
                r[i] = system.rhs[i] - t[i];
            }
            residual = sup(&r);
            rhat.copy_from_slice(&r);
            p.copy_from_slice(&r);
            rho = dot(&rhat, &r);
        }};
    }

    while iterations < max_iter && residual > target {
        iterations += 1;
        sweep_apply(system, omega, &p, &mut ph);
        system.matvec(&ph, &mut v);
        let denom = dot(&rhat, &v);
        if !denom.is_finite() || denom.abs() < 1e-280 {
            refresh!();
            continue;
        }
        let alpha = rho / denom;
        for i in 0..n {
            x[i] += alpha * ph[i];
            s[i] = r[i] - alpha * v[i];
        }
        sweep_apply(system, omega, &s, &mut sh);
        system.matvec(&sh, &mut t);
        let tt = dot(&t, &t);
        if !(tt > 0.0) || !tt.is_finite() {
            refresh!();
            continue;
        }
        let w = dot(&t, &s) / tt;
        if !w.is_finite() || w == 0.0 {
            refresh!();
            continue;
        }
        for i in 0..n {
            x[i] += w * sh[i];
            r[i] = s[i] - w * t[i];
        }
        let rho_next = dot(&rhat, &r);
        if sup(&r) <= target || iterations % 32 == 0 || !rho_next.is_finite() {
            refresh!();
            if residual <= target {
                break;
            }
            if iterations % 32 == 0 {
                // No meaningful progress across a whole refresh window three
                // times in a row: stop instead of burning the iteration cap.
                if residual > 0.9 * last_checked {
                    stalls += 1;
                    if stalls >= 3 {
                        break;
                    }
                } else {
                    stalls = 0;
                }
                last_checked = residual;
            }
            continue;
        }
        let beta = (rho_next / rho) * (alpha / w);
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - w * v[i]);
        }
        rho = rho_next;
    }

    system.matvec(&x, &mut t);
    let mut worst = 0.0_f64;
    for i in 0..n {
        worst = worst.max((system.rhs[i] - t[i]).abs());
    }
    (x, iterations, worst)
}

/// Assemble the difference operator for `spec` on `grid`.
pub fn assemble_system(spec: &ModelSpec, grid: &Grid, cfg: &SolveConfig) -> Result<AssembledSystem> {
    cfg.validate(spec)?;
    let d = spec.dim();
    let n = spec.slow_dim;
    let k_modes = spec.modes;
    let h = grid.h;
    let cross = has_cross_diffusion(spec)?;
    let unknowns = grid.interior.len() * k_modes;
    let mut rows = Vec::with_capacity(unknowns);
    let mut rhs = vec![0.0; unknowns];

    // Boundary data per (cell, mode), evaluated lazily at the projected
    // centers.
    let boundary_value = |flat: usize, mode: usize| -> Result<f64> {
        let point = grid.projection[flat]
            .as_ref()
            .expect("boundary cell without projection");
        spec.boundary_at(mode, point)
    };

    for &flat in &grid.interior {
        let z = grid.cell_center(flat);
        for mode in 0..k_modes {
            let row_index = grid.rank[flat] * k_modes + mode;
            let mut diag = 0.0;
            let mut entries: Vec<(u32, f64)> = Vec::with_capacity(2 * d + k_modes);
            let mut rhs_acc = 0.0;
            let mut offsum = 0.0;

            // Adds the coefficient of a spatial neighbor, folding boundary
            // cells into the right-hand side.
            let couple =
                |nb: usize, coeff: f64, rhs_acc: &mut f64, entries: &mut Vec<(u32, f64)>, offsum: &mut f64|
                 -> Result<()> {
                    if coeff == 0.0 {
                        return Ok(());
                    }
                    *offsum += coeff.abs();
                    match grid.class[nb] {
                        CellClass::Interior => {
                            entries.push(((grid.rank[nb] * k_modes + mode) as u32, coeff));
                            Ok(())
                        }
                        CellClass::Boundary => {
                            *rhs_acc -= coeff * boundary_value(nb, mode)?;
                            Ok(())
                        }
                        CellClass::Exterior => Err(Error::Model(
                            "difference stencil reached an exterior cell".into(),
                        )),
                    }
                };

            let drift = spec.stacked_drift_at(mode, &z)?;
            let a = spec.diffusion_at(mode, &z)?;

            // Full-state diffusion coefficient along each axis: slow axes get
            // the regularization block, fast axes the mode diffusion.
            let axis_diff = |axis: usize| -> f64 {
                if axis < n {
                    cfg.delta_hat / cfg.eps
                } else {
                    a[(axis - n, axis - n)]
                }
            };

            for axis in 0..d {
                let w = drift[axis];
                let dcoef = 0.5 * cfg.eps * axis_diff(axis) / (h * h);
                // Upwind advection for the exit-value equation: the value at
                // a cell is carried by the trajectory leaving it, so the
                // drift couples to the neighbor the flow moves toward.
                let (back_adv, fwd_adv) = if w > 0.0 {
                    (0.0, w / h)
                } else {
                    (-w / h, 0.0)
                };
                diag += back_adv + fwd_adv + 2.0 * dcoef;
                let back = grid.neighbor(flat, axis, -1)?;
                let fwd = grid.neighbor(flat, axis, 1)?;
                couple(back, -(back_adv + dcoef), &mut rhs_acc, &mut entries, &mut offsum)?;
                couple(fwd, -(fwd_adv + dcoef), &mut rhs_acc, &mut entries, &mut offsum)?;
            }

            if cross {
                for fa in 0..spec.fast_dim {
                    for fb in fa + 1..spec.fast_dim {
                        let coef = cfg.eps * a[(fa, fb)] / (4.0 * h * h);
                        if coef == 0.0 {
                            continue;
                        }
                        let (axa, axb) = (n + fa, n + fb);
                        for (sa, sb, sign) in
                            [(1, 1, -1.0), (-1, -1, -1.0), (1, -1, 1.0), (-1, 1, 1.0)]
                        {
                            let nb = grid.neighbor(grid.neighbor(flat, axa, sa)?, axb, sb)?;
                            couple(nb, sign * coef, &mut rhs_acc, &mut entries, &mut offsum)?;
                        }
                    }
                }
            }

            // Mode coupling at the same cell.
            for other in 0..k_modes {
                if other == mode {
                    continue;
                }
                let rate = spec.rate_at(mode, other, &z)? / cfg.eps;
                diag += rate;
                offsum += rate;
                entries.push(((grid.rank[flat] * k_modes + other) as u32, -rate));
            }

            if !cross {
                // Without mixed stencils the row must be weakly diagonally
                // dominant by construction; a violation is an assembly bug.
                debug_assert!(
                    diag + 1e-9 * (1.0 + diag) >= offsum,
                    "lost diagonal dominance: diag {diag}, off {offsum}"
                );
                if diag + 1e-9 * (1.0 + diag) < offsum {
                    return Err(Error::Model(
                        "assembled row lost diagonal dominance".into(),
                    ));
                }
            }
            if diag <= 0.0 {
                return Err(Error::Degenerate(
                    "nonpositive diagonal in the assembled operator".into(),
                ));
            }
            rows.push(Row { diag, entries });
            rhs[row_index] = rhs_acc;
        }
    }

    Ok(AssembledSystem {
        rows,
        rhs,
        modes: k_modes,
        has_cross_terms: cross,
    })
}

/// A solved field: one value per lattice cell and mode, with boundary cells
/// holding the injected boundary data and exterior cells `NaN`.
#[derive(Debug, Clone, Serialize)]
pub struct PDEField {
    pub grid: Grid,
    pub eps: f64,
    pub delta_hat: f64,
    /// Per mode, per flat cell index.
    pub values: Vec<Vec<f64>>,
    /// Final sup-norm residual of the linear system.
    pub residual: f64,
    /// Linear-solver iterations used.
    pub iterations: usize,
}

impl PDEField {
    /// Multilinear interpolation of mode `mode` at `z`. Every lattice corner
    /// of the surrounding cell must carry a value (interior or boundary).
    pub fn value_at(&self, mode: usize, z: &[f64]) -> Result<f64> {
        let d = self.grid.dim();
        if z.len() != d || mode >= self.values.len() {
            return Err(Error::Dimension("probe does not match the field".into()));
        }
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for axis in 0..d {
            let s = (z[axis] - self.grid.origin[axis]) / self.grid.h;
            let i = s.floor();
            if i < 0.0 || i as usize + 1 >= self.grid.dims[axis] {
                return Err(Error::Domain(
                    "probe outside the interpolable grid region".into(),
                ));
            }
            base[axis] = i as usize;
            frac[axis] = s - i;
        }
        let mut value = 0.0;
        for corner in 0..(1usize << d) {
            let mut weight = 1.0;
            let mut multi = base.clone();
            for axis in 0..d {
                if corner & (1 << axis) != 0 {
                    multi[axis] += 1;
                    weight *= frac[axis];
                } else {
                    weight *= 1.0 - frac[axis];
                }
            }
            let v = self.values[mode][self.grid.flat(&multi)];
            if !v.is_finite() {
                return Err(Error::Domain(
                    "probe touches exterior cells; move it inside the domain".into(),
                ));
            }
            value += weight * v;
        }
        Ok(value)
    }

    /// CSV dump of the interior and boundary cells:
    /// `z1,...,zd,class,v1,...,vK`.
    pub fn to_csv(&self) -> String {
        let d = self.grid.dim();
        let modes = self.values.len();
        let mut out = String::new();
        for i in 1..=d {
            if i > 1 {
                out.push(',');
            }
            out.push_str(&format!("z{i}"));
        }
        out.push_str(",class");
        for k in 1..=modes {
            out.push_str(&format!(",v{k}"));
        }
        out.push('\n');
        for flat in 0..self.grid.cells() {
            let class = match self.grid.class[flat] {
                CellClass::Interior => "interior",
                CellClass::Boundary => "boundary",
                CellClass::Exterior => continue,
            };
            let center = self.grid.cell_center(flat);
            for (i, c) in center.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&format!("{c:.16e}"));
            }
            out.push_str(&format!(",{class}"));
            for k in 0..modes {
                out.push_str(&format!(",{:.16e}", self.values[k][flat]));
            }
            out.push('\n');
        }
        out
    }
}

/// Solve the Dirichlet system with sweep-preconditioned BiCGStab. The
/// discrete maximum principle is asserted on the result: values must stay
/// within the range of the boundary data up to `1e-8`.
pub fn solve_dirichlet(spec: &ModelSpec, cfg: &SolveConfig) -> Result<PDEField> {
    let grid = build_grid(spec, cfg)?;
    let system = assemble_system(spec, &grid, cfg)?;
    let k_modes = spec.modes;

    // Scale for the residual target: the right-hand side carries the
    // boundary data times the stencil weights.
    let rhs_scale = system
        .rhs
        .iter()
        .fold(0.0_f64, |a, b| a.max(b.abs()))
        .max(1.0);
    let target = cfg.tol * rhs_scale;

    let (u, iterations, residual) = krylov_solve(&system, target, cfg.max_iter, cfg.relaxation);
    if residual > target {
        return Err(Error::NonConvergence(format!(
            "linear solve stalled at residual {residual:.3e} after {iterations} iterations"
        )));
    }

    // Scatter the solution onto the lattice and inject the boundary data.
    let mut values = vec![vec![f64::NAN; grid.cells()]; k_modes];
    for (rank, &flat) in grid.interior.iter().enumerate() {
        for mode in 0..k_modes {
            values[mode][flat] = u[rank * k_modes + mode];
        }
    }
    let mut g_min = f64::INFINITY;
    let mut g_max = f64::NEG_INFINITY;
    for flat in 0..grid.cells() {
        if grid.class[flat] == CellClass::Boundary {
            let point = grid.projection[flat].as_ref().unwrap();
            for (mode, field) in values.iter_mut().enumerate() {
                let g = spec.boundary_at(mode, point)?;
                field[flat] = g;
                g_min = g_min.min(g);
                g_max = g_max.max(g);
            }
        }
    }

    // Discrete maximum principle.
    let mut v_min = f64::INFINITY;
    let mut v_max = f64::NEG_INFINITY;
    for &x in u.iter() {
        v_min = v_min.min(x);
        v_max = v_max.max(x);
    }
    let slack = 1e-8 * (1.0 + g_max.abs().max(g_min.abs()));
    if v_min < g_min - slack || v_max > g_max + slack {
        return Err(Error::Validation(format!(
            "maximum principle violated: field range [{v_min:.12e}, {v_max:.12e}] vs \
             boundary range [{g_min:.12e}, {g_max:.12e}]"
        )));
    }

    Ok(PDEField {
        grid,
        eps: cfg.eps,
        delta_hat: cfg.delta_hat,
        values,
        residual,
        iterations,
    })
}

/// Monte Carlo estimate of the field by the stochastic representation: the
/// mean of the boundary data at the exit position and exit mode, simulated
/// with the same `eps` and `delta_hat` as the grid solve.
#[derive(Debug, Clone, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
    pub trials: usize,
    pub censored: usize,
}

pub fn mc_representation(
    spec: &ModelSpec,
    cfg: &SolveConfig,
    z: &[f64],
    mode: usize,
    trials: u64,
    seed: u64,
) -> Result<McEstimate> {
    cfg.validate(spec)?;
    if spec.level_at(z)? >= 0.0 {
        return Err(Error::Domain(
            "representation probe must lie inside the domain".into(),
        ));
    }
    let mut sim = SimConfig::new(cfg.eps);
    sim.delta_hat = cfg.delta_hat;
    sim.dt = cfg.eps / 50.0;
    sim.t_max = 2_000.0;
    sim.seed = seed;
    sim.trials = trials;
    let stats = batch_exit_mc(spec, &sim, z, mode)?;
    if !stats.valid {
        return Err(Error::Degenerate(
            "every representation trial was censored; extend the horizon".into(),
        ));
    }
    let mut payoffs = Vec::with_capacity(stats.trials());
    for r in stats.exited() {
        payoffs.push(spec.boundary_at(r.mode, &r.position)?);
    }
    let n = payoffs.len();
    let mean = payoffs.iter().sum::<f64>() / n as f64;
    let se = if n > 1 {
        let var = payoffs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        (var / n as f64).sqrt()
    } else {
        f64::NAN
    };
    Ok(McEstimate {
        mean,
        se,
        trials: stats.trials(),
        censored: stats.censored,
    })
}

/// One row of the shrinking-`eps` sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub eps: f64,
    pub delta_hat: f64,
    /// Field value per mode at the probe.
    pub values: Vec<f64>,
    /// Absolute deviation from the expected limit, when one was supplied.
    pub deviations: Option<Vec<f64>>,
    /// Spread across modes at the probe.
    pub spread: f64,
    pub residual: f64,
    pub iterations: usize,
}

/// Table of probe values along a decreasing `eps` list.
#[derive(Debug, Clone, Serialize)]
pub struct SweepTable {
    pub probe: Vec<f64>,
    pub expected: Option<f64>,
    pub rows: Vec<SweepRow>,
}

/// Solve the system along a strictly decreasing `eps` list with
/// `delta_hat = eps^2` (so the regularization vanishes faster than `eps`),
/// recording the per-mode field values at `z_probe` and, when an expected
/// limit is given, the deviations from it.
pub fn limit_sweep(
    spec: &ModelSpec,
    cfg_base: &SolveConfig,
    eps_list: &[f64],
    z_probe: &[f64],
    expected: Option<f64>,
) -> Result<SweepTable> {
    if eps_list.is_empty() {
        return Err(Error::Config("eps list must not be empty".into()));
    }
    for pair in eps_list.windows(2) {
        if !(pair[1] < pair[0]) {
            return Err(Error::Config("eps list must be strictly decreasing".into()));
        }
    }
    let mut rows = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let mut cfg = cfg_base.clone();
        cfg.eps = eps;
        cfg.delta_hat = eps * eps;
        let field = solve_dirichlet(spec, &cfg)?;
        let mut values = Vec::with_capacity(spec.modes);
        for mode in 0..spec.modes {
            values.push(field.value_at(mode, z_probe)?);
        }
        let vmax = values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let vmin = values.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        let deviations =
            expected.map(|e| values.iter().map(|v| (v - e).abs()).collect::<Vec<f64>>());
        rows.push(SweepRow {
            eps,
            delta_hat: cfg.delta_hat,
            values,
            deviations,
            spread: vmax - vmin,
            residual: field.residual,
            iterations: field.iterations,
        });
    }
    Ok(SweepTable {
        probe: z_probe.to_vec(),
        expected,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_model;
    use std::collections::BTreeMap;

    fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        for (k, v) in pairs {
            m.insert((*k).to_string(), *v);
        }
        m
    }

    /// 1-D, fast-only, two-mode model with adjustable drift/boundary
    /// expressions, on the interval `|z1| < 1`.
    fn interval_model(f1: &str, f2: &str, g1: &str, g2: &str) -> ModelSpec {
        ModelSpec::from_toml_str(&format!(
            "[dims]\nn = 0\nm = 1\nK = 2\n\n[drift]\nF = []\n\n\
             [modes.1]\nf = [\"{f1}\"]\nsigma = [[\"1\"]]\n\n\
             [modes.2]\nf = [\"{f2}\"]\nsigma = [[\"1\"]]\n\n\
             [rates]\nc12 = \"1\"\nc21 = \"1.5\"\n\n\
             [domain]\nphi = \"z1^2 - 1\"\nbox = [[-1.4, 1.4]]\n\n\
             [boundary]\ng = [\"{g1}\", \"{g2}\"]\n"
        ))
        .unwrap()
    }

    #[test]
    fn constant_boundary_data_solves_exactly() {
        let spec = interval_model("-z1 + 0.2", "-z1 - 0.2", "3", "3");
        let mut cfg = SolveConfig::new(0.3);
        cfg.h = 0.05;
        let field = solve_dirichlet(&spec, &cfg).unwrap();
        for mode in 0..2 {
            for &flat in &field.grid.interior {
                let v = field.values[mode][flat];
                assert!(
                    (v - 3.0).abs() < 1e-7,
                    "constant solution violated: {v}"
                );
            }
        }
        // The constant vector is an exact solution of the assembled system.
        let grid = build_grid(&spec, &cfg).unwrap();
        let system = assemble_system(&spec, &grid, &cfg).unwrap();
        let constant = vec![3.0; system.unknowns()];
        assert!(
            system.residual_sup(&constant) < 1e-10,
            "constant field should have zero residual"
        );
    }

    #[test]
    fn pure_diffusion_rows_match_the_textbook_stencil() {
        // K=1, no drift, unit noise: rows away from the boundary must be the
        // (eps/2) second-difference stencil.
        let spec = ModelSpec::from_toml_str(
            "[dims]\nn = 0\nm = 1\nK = 1\n\n[drift]\nF = []\n\n\
             [modes.1]\nf = [\"0\"]\nsigma = [[\"1\"]]\n\n\
             [domain]\nphi = \"z1^2 - 1\"\nbox = [[-1.4, 1.4]]\n\n[boundary]\ng = [\"z1\"]\n",
        )
        .unwrap();
        let mut cfg = SolveConfig::new(0.4);
        cfg.h = 0.1;
        let grid = build_grid(&spec, &cfg).unwrap();
        let system = assemble_system(&spec, &grid, &cfg).unwrap();
        assert!(!system.has_cross_terms);
        let scale = 0.5 * cfg.eps / (cfg.h * cfg.h);
        // A row whose neighbors are both interior.
        let mid_rank = grid.rank[grid.interior[grid.interior.len() / 2]];
        let row = &system.rows[mid_rank];
        assert!((row.diag - 2.0 * scale).abs() < 1e-12);
        assert_eq!(row.entries.len(), 2);
        for &(_, v) in &row.entries {
            assert!((v + scale).abs() < 1e-12);
        }
    }

    #[test]
    fn upwind_follows_the_drift_direction() {
        // Pure advection to the right: the exit value is inherited from the
        // right, so only the forward neighbor may appear in the stencil.
        let spec = ModelSpec::from_toml_str(
            "[dims]\nn = 0\nm = 1\nK = 1\n\n[drift]\nF = []\n\n\
             [modes.1]\nf = [\"2\"]\nsigma = [[\"0\"]]\n\n\
             [domain]\nphi = \"z1^2 - 1\"\nbox = [[-1.4, 1.4]]\n\n[boundary]\ng = [\"z1\"]\n",
        )
        .unwrap();
        let mut cfg = SolveConfig::new(0.4);
        cfg.h = 0.1;
        let grid = build_grid(&spec, &cfg).unwrap();
        let system = assemble_system(&spec, &grid, &cfg).unwrap();
        let mid_flat = grid.interior[grid.interior.len() / 2];
        let row = &system.rows[grid.rank[mid_flat]];
        assert!((row.diag - 2.0 / cfg.h).abs() < 1e-12);
        assert_eq!(row.entries.len(), 1, "upwind row must touch one neighbor");
        let (col, v) = row.entries[0];
        assert!((v + 2.0 / cfg.h).abs() < 1e-12);
        let fwd = grid.neighbor(mid_flat, 0, 1).unwrap();
        assert_eq!(col as usize, grid.rank[fwd], "advection must look downstream");
    }

    #[test]
    fn indicator_boundary_data_stays_in_range() {
        let spec = interval_model("-z1 + 0.3", "-z1 - 0.3", "1", "0");
        let mut cfg = SolveConfig::new(0.25);
        cfg.h = 0.02;
        let field = solve_dirichlet(&spec, &cfg).unwrap();
        for mode in 0..2 {
            for &flat in &field.grid.interior {
                let v = field.values[mode][flat];
                assert!((-1e-8..=1.0 + 1e-8).contains(&v), "out of range: {v}");
            }
        }
        // Modes must differ: mode 1 drifts right toward the g=1 side only in
        // mode-specific fashion, and coupling is finite.
        let a = field.value_at(0, &[0.0]).unwrap();
        let b = field.value_at(1, &[0.0]).unwrap();
        assert!((a - b).abs() > 1e-4, "coupled fields unexpectedly equal");
    }

    #[test]
    fn symmetric_model_produces_symmetric_solution() {
        // Odd drift, even boundary data, symmetric rates: the solution must
        // be even in z1.
        let spec = interval_model("-z1", "-2*z1", "z1^2", "1 - z1^2");
        let mut cfg = SolveConfig::new(0.35);
        cfg.h = 0.04;
        let field = solve_dirichlet(&spec, &cfg).unwrap();
        let grid = &field.grid;
        for mode in 0..2 {
            for &flat in &grid.interior {
                let center = grid.cell_center(flat);
                let mirrored = [-center[0]];
                // Find the mirror cell (exists: the lattice is centered).
                let s = (mirrored[0] - grid.origin[0]) / grid.h;
                let idx = s.round() as usize;
                assert!((s - idx as f64).abs() < 1e-9, "lattice not mirror-symmetric");
                if grid.class[idx] != CellClass::Interior {
                    continue;
                }
                let v = field.values[mode][flat];
                let w = field.values[mode][idx];
                assert!(
                    (v - w).abs() < 1e-6,
                    "asymmetry at {center:?}: {v} vs {w}"
                );
            }
        }
    }

    #[test]
    fn boundary_cells_use_projected_positions() {
        let spec = interval_model("-z1", "-z1", "z1", "z1");
        let mut cfg = SolveConfig::new(0.3);
        cfg.h = 0.07;
        let field = solve_dirichlet(&spec, &cfg).unwrap();
        let grid = &field.grid;
        let mut checked = 0;
        for flat in 0..grid.cells() {
            if grid.class[flat] == CellClass::Boundary {
                let v = field.values[0][flat];
                assert!(
                    (v.abs() - 1.0).abs() < 1e-9,
                    "boundary value {v} not taken at the projected point"
                );
                checked += 1;
            }
        }
        assert_eq!(checked, 2);
    }

    #[test]
    fn two_mode_linear_respects_the_maximum_principle() {
        let spec = builtin_model(
            "two-mode-linear",
            &params(&[("radius", 0.8), ("sigma", 0.7), ("kappa", 0.4)]),
        )
        .unwrap();
        let mut cfg = SolveConfig::new(0.3);
        cfg.h = 0.08;
        let field = solve_dirichlet(&spec, &cfg).unwrap();
        // Boundary data g1 = z1 + 2, g2 = z2 on the disc of radius 0.8
        // around the origin: range roughly [1.2, 2.8] union [-0.8, 0.8].
        for mode in 0..2 {
            for &flat in &field.grid.interior {
                let v = field.values[mode][flat];
                assert!(v > -0.9 && v < 2.9, "field value {v} out of range");
            }
        }
        let grid = build_grid(&spec, &cfg).unwrap();
        let system = assemble_system(&spec, &grid, &cfg).unwrap();
        let rhs_scale = system
            .rhs
            .iter()
            .fold(1.0_f64, |a, b| a.max(b.abs()));
        assert!(field.residual <= cfg.tol * rhs_scale);
    }

    #[test]
    fn representation_matches_the_grid_solve() {
        let spec = interval_model("-z1 + 0.3", "-z1 - 0.3", "1", "0");
        let mut cfg = SolveConfig::new(0.25);
        cfg.h = 0.02;
        let field = solve_dirichlet(&spec, &cfg).unwrap();
        let probe = [0.2];
        let pde = field.value_at(0, &probe).unwrap();
        let mc = mc_representation(&spec, &cfg, &probe, 0, 1500, 71).unwrap();
        assert_eq!(mc.censored, 0);
        let diff = (pde - mc.mean).abs();
        assert!(
            diff <= 4.0 * mc.se + 0.02,
            "PDE {pde} vs MC {} +- {} (diff {diff})",
            mc.mean,
            mc.se
        );
    }

    #[test]
    fn grid_refinement_shows_first_order_trend() {
        let spec = interval_model("-z1 + 0.3", "-z1 - 0.3", "(z1 + 1)/2", "z1^2");
        let probe = [0.15];
        let mut values = Vec::new();
        for h in [0.08, 0.04, 0.02] {
            let mut cfg = SolveConfig::new(0.3);
            cfg.h = h;
            let field = solve_dirichlet(&spec, &cfg).unwrap();
            values.push(field.value_at(0, &probe).unwrap());
        }
        let change1 = (values[1] - values[0]).abs();
        let change2 = (values[2] - values[1]).abs();
        assert!(
            change2 < 0.7 * change1 + 1e-9,
            "no first-order trend: changes {change1:.3e} then {change2:.3e}"
        );
    }

    #[test]
    fn sweep_handles_constants_and_validates_input() {
        let spec = interval_model("-z1 + 0.2", "-z1 - 0.2", "2", "2");
        let cfg = SolveConfig::new(0.4);
        let mut cfg = cfg;
        cfg.h = 0.05;
        let table =
            limit_sweep(&spec, &cfg, &[0.4, 0.2, 0.1], &[0.0], Some(2.0)).unwrap();
        assert_eq!(table.rows.len(), 3);
        for row in &table.rows {
            assert!((row.delta_hat - row.eps * row.eps).abs() < 1e-15);
            for dev in row.deviations.as_ref().unwrap() {
                assert!(*dev < 1e-7, "constant sweep deviated by {dev}");
            }
            assert!(row.spread < 1e-7);
        }
        assert!(limit_sweep(&spec, &cfg, &[0.1, 0.2], &[0.0], None).is_err());
        assert!(limit_sweep(&spec, &cfg, &[], &[0.0], None).is_err());
    }

    #[test]
    fn config_rejects_degenerate_slow_block() {
        let spec = builtin_model("two-mode-linear", &params(&[("radius", 0.8)])).unwrap();
        let mut cfg = SolveConfig::new(0.3);
        cfg.delta_hat = 0.0;
        assert!(matches!(solve_dirichlet(&spec, &cfg), Err(Error::Config(_))));
        let mut cfg = SolveConfig::new(0.3);
        cfg.h = 5.0;
        assert!(solve_dirichlet(&spec, &cfg).is_err());
    }
}
