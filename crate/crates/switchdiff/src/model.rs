//! Model specification for a switching diffusion.
//!
//! A model has `n` slow coordinates driven by a mode-independent drift `F`,
//! `m` fast coordinates driven by per-mode drifts `f_k` and noise matrices
//! `sigma_k`, and a mode variable on `{1..K}` switching with state-dependent
//! intensities `c_kj(z) / eps`. The full state is `z = (x, y) in R^d`,
//! `d = n + m`. A bounded open domain `G` is described by a smooth level
//! set `phi` (negative inside, zero on the boundary) together with a
//! bounding box, and per-mode boundary data `g_k` is defined on `phi = 0`.
//!
//! All scalar fields are [`ExprField`] expressions over `z1..zd`; model
//! fields may not reference `t`. Time-dependent switching intensities for
//! reference measures and tilted simulation live in [`RateSchedule`],
//! whose entries are expressions over `t` alone.

use crate::error::{Error, Result};
use crate::expr::ExprField;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Hard cap on the number of modes; keeps generator matrices small and
/// dense everywhere.
pub const MAX_MODES: usize = 16;

/// Hard cap on the state dimension.
pub const MAX_DIM: usize = 16;

/// Bounded domain description: level set plus bounding box.
#[derive(Debug, Clone)]
pub struct DomainSpec {
    /// `phi(z) < 0` inside the domain, `phi = 0` on the boundary.
    pub level_set: ExprField,
    /// Axis-aligned bounding box `[lo, hi]` per coordinate, enclosing `G`.
    pub bounds: Vec<(f64, f64)>,
}

impl DomainSpec {
    pub fn box_center(&self) -> Vec<f64> {
        self.bounds.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect()
    }

    pub fn box_diameter(&self) -> f64 {
        self.bounds
            .iter()
            .map(|(lo, hi)| (hi - lo).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn in_box(&self, z: &[f64]) -> bool {
        z.iter()
            .zip(&self.bounds)
            .all(|(zi, (lo, hi))| *zi >= *lo && *zi <= *hi)
    }
}

/// Full specification of a switching diffusion with domain and boundary data.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub slow_dim: usize,
    pub fast_dim: usize,
    pub modes: usize,
    /// Slow drift `F`, length `slow_dim`, shared by all modes.
    pub slow_drift: Vec<ExprField>,
    /// Fast drifts `f_k`, one vector of length `fast_dim` per mode.
    pub fast_drift: Vec<Vec<ExprField>>,
    /// Noise matrices `sigma_k`, row-major `fast_dim x fast_dim` per mode.
    pub noise: Vec<Vec<ExprField>>,
    /// Switching intensity fields `c_kj`; `None` on the diagonal.
    pub rates: Vec<Vec<Option<ExprField>>>,
    pub domain: DomainSpec,
    /// Boundary data `g_k`, one scalar field per mode.
    pub boundary: Vec<ExprField>,
}

impl ModelSpec {
    /// Total state dimension `n + m`.
    pub fn dim(&self) -> usize {
        self.slow_dim + self.fast_dim
    }

    /// Structural consistency; called by every constructor.
    fn check_structure(&self) -> Result<()> {
        let d = self.dim();
        if self.modes == 0 {
            return Err(Error::Model("model needs at least one mode".into()));
        }
        if self.modes > MAX_MODES {
            return Err(Error::Model(format!(
                "{} modes exceeds the supported maximum of {MAX_MODES}",
                self.modes
            )));
        }
        if self.fast_dim == 0 {
            return Err(Error::Model("model needs at least one fast coordinate".into()));
        }
        if d > MAX_DIM {
            return Err(Error::Model(format!(
                "state dimension {d} exceeds the supported maximum of {MAX_DIM}"
            )));
        }
        if self.slow_drift.len() != self.slow_dim {
            return Err(Error::Dimension(format!(
                "drift.F has {} entries, expected n = {}",
                self.slow_drift.len(),
                self.slow_dim
            )));
        }
        if self.fast_drift.len() != self.modes || self.noise.len() != self.modes {
            return Err(Error::Dimension(
                "fast drift / noise must have one entry per mode".into(),
            ));
        }
        for (k, f) in self.fast_drift.iter().enumerate() {
            if f.len() != self.fast_dim {
                return Err(Error::Dimension(format!(
                    "modes.{}.f has {} entries, expected m = {}",
                    k + 1,
                    f.len(),
                    self.fast_dim
                )));
            }
        }
        for (k, s) in self.noise.iter().enumerate() {
            if s.len() != self.fast_dim * self.fast_dim {
                return Err(Error::Dimension(format!(
                    "modes.{}.sigma must be {m} x {m}",
                    k + 1,
                    m = self.fast_dim
                )));
            }
        }
        if self.rates.len() != self.modes
            || self.rates.iter().any(|row| row.len() != self.modes)
        {
            return Err(Error::Dimension("rates table must be K x K".into()));
        }
        for k in 0..self.modes {
            for j in 0..self.modes {
                let entry = &self.rates[k][j];
                if k == j && entry.is_some() {
                    return Err(Error::Model(format!(
                        "rate c{}{} is diagonal and must be omitted",
                        k + 1,
                        j + 1
                    )));
                }
                if k != j && entry.is_none() {
                    return Err(Error::Model(format!(
                        "missing rate c{}{}",
                        k + 1,
                        j + 1
                    )));
                }
            }
        }
        if self.boundary.len() != self.modes {
            return Err(Error::Dimension(format!(
                "boundary.g has {} entries, expected K = {}",
                self.boundary.len(),
                self.modes
            )));
        }
        if self.domain.bounds.len() != d {
            return Err(Error::Dimension(format!(
                "domain.box has {} intervals, expected d = {d}",
                self.domain.bounds.len()
            )));
        }
        for (i, (lo, hi)) in self.domain.bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Model(format!(
                    "domain.box[{i}] = [{lo}, {hi}] is not a proper interval"
                )));
            }
        }
        // Model fields are autonomous; `t` is reserved for rate schedules.
        let mut time_users: Vec<String> = Vec::new();
        let mut check = |field: &ExprField, name: String| {
            if field.uses_time() {
                time_users.push(name);
            }
        };
        for (i, f) in self.slow_drift.iter().enumerate() {
            check(f, format!("drift.F[{i}]"));
        }
        for (k, fs) in self.fast_drift.iter().enumerate() {
            for (i, f) in fs.iter().enumerate() {
                check(f, format!("modes.{}.f[{i}]", k + 1));
            }
        }
        for (k, ss) in self.noise.iter().enumerate() {
            for (i, s) in ss.iter().enumerate() {
                check(s, format!("modes.{}.sigma[{i}]", k + 1));
            }
        }
        for (k, row) in self.rates.iter().enumerate() {
            for (j, r) in row.iter().enumerate() {
                if let Some(r) = r {
                    check(r, format!("rates.c{}{}", k + 1, j + 1));
                }
            }
        }
        check(&self.domain.level_set, "domain.phi".into());
        for (k, g) in self.boundary.iter().enumerate() {
            check(g, format!("boundary.g[{k}]"));
        }
        if !time_users.is_empty() {
            return Err(Error::Model(format!(
                "model fields may not depend on t: {}",
                time_users.join(", ")
            )));
        }
        Ok(())
    }

    // -- field evaluation ---------------------------------------------------

    pub fn slow_drift_at(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.slow_drift
            .iter()
            .map(|f| f.eval(z, 0.0).map_err(Error::from))
            .collect()
    }

    pub fn fast_drift_at(&self, mode: usize, z: &[f64]) -> Result<Vec<f64>> {
        self.fast_drift[mode]
            .iter()
            .map(|f| f.eval(z, 0.0).map_err(Error::from))
            .collect()
    }

    /// Stacked drift `(F(z), f_k(z))` of the full state under mode `k`.
    pub fn stacked_drift_at(&self, mode: usize, z: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.dim());
        for f in &self.slow_drift {
            out.push(f.eval(z, 0.0)?);
        }
        for f in &self.fast_drift[mode] {
            out.push(f.eval(z, 0.0)?);
        }
        Ok(out)
    }

    /// Evaluate the slow drift into a caller buffer (hot-loop variant).
    pub fn slow_drift_into(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        for (o, f) in out.iter_mut().zip(&self.slow_drift) {
            *o = f.eval(z, 0.0)?;
        }
        Ok(())
    }

    /// Evaluate a mode's fast drift into a caller buffer.
    pub fn fast_drift_into(&self, mode: usize, z: &[f64], out: &mut [f64]) -> Result<()> {
        for (o, f) in out.iter_mut().zip(&self.fast_drift[mode]) {
            *o = f.eval(z, 0.0)?;
        }
        Ok(())
    }

    /// Evaluate a mode's noise matrix into a row-major `m x m` buffer.
    pub fn noise_into(&self, mode: usize, z: &[f64], out: &mut [f64]) -> Result<()> {
        for (o, f) in out.iter_mut().zip(&self.noise[mode]) {
            *o = f.eval(z, 0.0)?;
        }
        Ok(())
    }

    /// Noise matrix `sigma_k(z)` as a dense `m x m` matrix.
    pub fn noise_at(&self, mode: usize, z: &[f64]) -> Result<DMatrix<f64>> {
        let m = self.fast_dim;
        let mut out = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                out[(i, j)] = self.noise[mode][i * m + j].eval(z, 0.0)?;
            }
        }
        Ok(out)
    }

    /// Fast-block diffusion `a_k = sigma_k sigma_k^T`.
    pub fn diffusion_at(&self, mode: usize, z: &[f64]) -> Result<DMatrix<f64>> {
        let s = self.noise_at(mode, z)?;
        Ok(&s * s.transpose())
    }

    /// Switching intensity `c_kj(z)` for `k != j`.
    pub fn rate_at(&self, from: usize, to: usize, z: &[f64]) -> Result<f64> {
        match &self.rates[from][to] {
            Some(f) => Ok(f.eval(z, 0.0)?),
            None => Err(Error::Model(format!(
                "rate c{}{} is not defined",
                from + 1,
                to + 1
            ))),
        }
    }

    /// Total leaving intensity `c_k(z) = sum_{j != k} c_kj(z)`.
    pub fn leaving_rate_at(&self, from: usize, z: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for to in 0..self.modes {
            if to != from {
                total += self.rate_at(from, to, z)?;
            }
        }
        Ok(total)
    }

    pub fn level_at(&self, z: &[f64]) -> Result<f64> {
        Ok(self.domain.level_set.eval(z, 0.0)?)
    }

    /// Strictly inside the domain (`phi < 0`).
    pub fn inside(&self, z: &[f64]) -> Result<bool> {
        Ok(self.level_at(z)? < 0.0)
    }

    pub fn boundary_at(&self, mode: usize, z: &[f64]) -> Result<f64> {
        Ok(self.boundary[mode].eval(z, 0.0)?)
    }

    /// Outward normal direction `grad phi / |grad phi|` by central differences.
    pub fn boundary_normal(&self, z: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        let h = 1e-6 * (1.0 + self.domain.box_diameter());
        let mut grad = vec![0.0; d];
        let mut zp = z.to_vec();
        for i in 0..d {
            zp[i] = z[i] + h;
            let hi = self.level_at(&zp)?;
            zp[i] = z[i] - h;
            let lo = self.level_at(&zp)?;
            zp[i] = z[i];
            grad[i] = (hi - lo) / (2.0 * h);
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm <= 1e-14 {
            return Err(Error::Degenerate(format!(
                "level-set gradient vanishes near {z:?}"
            )));
        }
        for g in &mut grad {
            *g /= norm;
        }
        Ok(grad)
    }
}

// ---------------------------------------------------------------------------
// TOML configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct RawConfig {
    dims: RawDims,
    drift: RawDrift,
    modes: BTreeMap<String, RawMode>,
    #[serde(default)]
    rates: BTreeMap<String, String>,
    domain: RawDomain,
    boundary: RawBoundary,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawDims {
    n: usize,
    m: usize,
    #[serde(rename = "K")]
    k: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawDrift {
    #[serde(rename = "F")]
    f: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawMode {
    f: Vec<String>,
    sigma: Vec<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawDomain {
    phi: String,
    #[serde(rename = "box")]
    bounds: Vec<[f64; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawBoundary {
    g: Vec<String>,
}

fn parse_field(src: &str, dim: usize, what: &str) -> Result<ExprField> {
    ExprField::parse(src, dim).map_err(|e| Error::Config(format!("{what}: {e}")))
}

/// Parse a rates key of the form `c12` (single-digit modes) or `c3_12`.
fn parse_rate_key(key: &str, modes: usize) -> Result<(usize, usize)> {
    let body = key.strip_prefix('c').ok_or_else(|| {
        Error::Config(format!("rate key `{key}` must look like c12 or c1_2"))
    })?;
    let (from, to) = if let Some((a, b)) = body.split_once('_') {
        (a.parse::<usize>(), b.parse::<usize>())
    } else if body.len() == 2 {
        (body[..1].parse::<usize>(), body[1..].parse::<usize>())
    } else {
        return Err(Error::Config(format!(
            "rate key `{key}` is ambiguous; use c<i>_<j> for two-digit modes"
        )));
    };
    match (from, to) {
        (Ok(i), Ok(j)) if i >= 1 && j >= 1 && i <= modes && j <= modes && i != j => {
            Ok((i - 1, j - 1))
        }
        _ => Err(Error::Config(format!(
            "rate key `{key}` does not name an off-diagonal pair within 1..{modes}"
        ))),
    }
}

impl ModelSpec {
    pub fn from_toml_str(text: &str) -> Result<ModelSpec> {
        let raw: RawConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("model config: {e}")))?;
        let n = raw.dims.n;
        let m = raw.dims.m;
        let modes = raw.dims.k;
        let d = n + m;

        let slow_drift = raw
            .drift
            .f
            .iter()
            .enumerate()
            .map(|(i, s)| parse_field(s, d, &format!("drift.F[{i}]")))
            .collect::<Result<Vec<_>>>()?;

        let mut fast_drift = Vec::with_capacity(modes);
        let mut noise = Vec::with_capacity(modes);
        for k in 1..=modes {
            let raw_mode = raw.modes.get(&k.to_string()).ok_or_else(|| {
                Error::Config(format!("missing section [modes.{k}]"))
            })?;
            let f = raw_mode
                .f
                .iter()
                .enumerate()
                .map(|(i, s)| parse_field(s, d, &format!("modes.{k}.f[{i}]")))
                .collect::<Result<Vec<_>>>()?;
            if raw_mode.sigma.len() != m || raw_mode.sigma.iter().any(|r| r.len() != m) {
                return Err(Error::Config(format!(
                    "modes.{k}.sigma must be an {m} x {m} array of expressions"
                )));
            }
            let mut s_flat = Vec::with_capacity(m * m);
            for (i, row) in raw_mode.sigma.iter().enumerate() {
                for (j, s) in row.iter().enumerate() {
                    s_flat.push(parse_field(s, d, &format!("modes.{k}.sigma[{i}][{j}]"))?);
                }
            }
            fast_drift.push(f);
            noise.push(s_flat);
        }
        for key in raw.modes.keys() {
            let ok = key
                .parse::<usize>()
                .map(|v| v >= 1 && v <= modes)
                .unwrap_or(false);
            if !ok {
                return Err(Error::Config(format!(
                    "[modes.{key}] does not match K = {modes}"
                )));
            }
        }

        let mut rates: Vec<Vec<Option<ExprField>>> = vec![vec![None; modes]; modes];
        for (key, src) in &raw.rates {
            let (i, j) = parse_rate_key(key, modes)?;
            if rates[i][j].is_some() {
                return Err(Error::Config(format!("rate `{key}` given twice")));
            }
            rates[i][j] = Some(parse_field(src, d, &format!("rates.{key}"))?);
        }

        let domain = DomainSpec {
            level_set: parse_field(&raw.domain.phi, d, "domain.phi")?,
            bounds: raw.domain.bounds.iter().map(|b| (b[0], b[1])).collect(),
        };
        let boundary = raw
            .boundary
            .g
            .iter()
            .enumerate()
            .map(|(i, s)| parse_field(s, d, &format!("boundary.g[{i}]")))
            .collect::<Result<Vec<_>>>()?;

        let spec = ModelSpec {
            slow_dim: n,
            fast_dim: m,
            modes,
            slow_drift,
            fast_drift,
            noise,
            rates,
            domain,
            boundary,
        };
        spec.check_structure()?;
        Ok(spec)
    }

    pub fn from_toml_file(path: &Path) -> Result<ModelSpec> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        ModelSpec::from_toml_str(&text)
    }

    /// Serialize back to the TOML configuration format; expressions are
    /// printed in canonical form and reparse to identical fields.
    pub fn to_toml_string(&self) -> Result<String> {
        let m = self.fast_dim;
        let raw = RawConfig {
            dims: RawDims {
                n: self.slow_dim,
                m,
                k: self.modes,
            },
            drift: RawDrift {
                f: self.slow_drift.iter().map(|f| f.to_string()).collect(),
            },
            modes: (0..self.modes)
                .map(|k| {
                    let sigma = (0..m)
                        .map(|i| {
                            (0..m)
                                .map(|j| self.noise[k][i * m + j].to_string())
                                .collect()
                        })
                        .collect();
                    (
                        (k + 1).to_string(),
                        RawMode {
                            f: self.fast_drift[k].iter().map(|f| f.to_string()).collect(),
                            sigma,
                        },
                    )
                })
                .collect(),
            rates: {
                let mut out = BTreeMap::new();
                for (k, row) in self.rates.iter().enumerate() {
                    for (j, r) in row.iter().enumerate() {
                        if let Some(r) = r {
                            out.insert(format!("c{}_{}", k + 1, j + 1), r.to_string());
                        }
                    }
                }
                out
            },
            domain: RawDomain {
                phi: self.domain.level_set.to_string(),
                bounds: self.domain.bounds.iter().map(|(lo, hi)| [*lo, *hi]).collect(),
            },
            boundary: RawBoundary {
                g: self.boundary.iter().map(|g| g.to_string()).collect(),
            },
        };
        toml::to_string_pretty(&raw).map_err(|e| Error::Config(format!("serialize: {e}")))
    }
}

// ---------------------------------------------------------------------------
// Builtin registry
// ---------------------------------------------------------------------------

pub fn builtin_names() -> &'static [&'static str] {
    &["two-mode-linear", "ou-k1", "const-coef"]
}

struct ParamSet<'a> {
    given: &'a BTreeMap<String, f64>,
    used: Vec<&'a str>,
}

impl<'a> ParamSet<'a> {
    fn new(given: &'a BTreeMap<String, f64>) -> Self {
        ParamSet {
            given,
            used: Vec::new(),
        }
    }

    fn take(&mut self, name: &'static str, default: f64) -> f64 {
        if let Some((key, value)) = self.given.get_key_value(name) {
            self.used.push(key.as_str());
            *value
        } else {
            default
        }
    }

    fn finish(self, model: &str) -> Result<()> {
        let unused: Vec<&str> = self
            .given
            .keys()
            .map(|k| k.as_str())
            .filter(|k| !self.used.contains(k))
            .collect();
        if unused.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown parameter(s) for builtin `{model}`: {}",
                unused.join(", ")
            )))
        }
    }
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Construct a named builtin model. Unknown names and unknown parameters
/// are errors; omitted parameters fall back to the registry defaults.
pub fn builtin_model(name: &str, params: &BTreeMap<String, f64>) -> Result<ModelSpec> {
    let mut p = ParamSet::new(params);
    let text = match name {
        // Two switching modes pulling the fast coordinate toward +1 / -1,
        // slow coordinate integrating the fast one, on a disc.
        "two-mode-linear" => {
            let c12 = p.take("c12", 1.0);
            let c21 = p.take("c21", 1.0);
            let cx = p.take("cx", 0.0);
            let cy = p.take("cy", 0.0);
            let radius = p.take("radius", 1.0);
            let kappa = p.take("kappa", 0.0);
            let sigma = p.take("sigma", 1.0);
            p.finish(name)?;
            let slow = if kappa == 0.0 {
                "z2".to_string()
            } else {
                format!("z2 - {}*z1", num(kappa))
            };
            let mut t = String::new();
            writeln!(t, "[dims]\nn = 1\nm = 1\nK = 2\n").unwrap();
            writeln!(t, "[drift]\nF = [\"{slow}\"]\n").unwrap();
            writeln!(
                t,
                "[modes.1]\nf = [\"-(z2 - 1)\"]\nsigma = [[\"{}\"]]\n",
                num(sigma)
            )
            .unwrap();
            writeln!(
                t,
                "[modes.2]\nf = [\"-(z2 + 1)\"]\nsigma = [[\"{}\"]]\n",
                num(sigma)
            )
            .unwrap();
            writeln!(t, "[rates]\nc12 = \"{}\"\nc21 = \"{}\"\n", num(c12), num(c21)).unwrap();
            writeln!(
                t,
                "[domain]\nphi = \"(z1 - {cx})^2 + (z2 - {cy})^2 - {r2}\"\nbox = [[{xlo}, {xhi}], [{ylo}, {yhi}]]\n",
                cx = num(cx),
                cy = num(cy),
                r2 = num(radius * radius),
                xlo = num(cx - 1.5 * radius),
                xhi = num(cx + 1.5 * radius),
                ylo = num(cy - 1.5 * radius),
                yhi = num(cy + 1.5 * radius),
            )
            .unwrap();
            writeln!(t, "[boundary]\ng = [\"z1 + 2\", \"z2\"]").unwrap();
            t
        }
        // Single-mode Ornstein-Uhlenbeck process on an interval; no slow
        // coordinates, no switching. Useful as a closed-form reference.
        "ou-k1" => {
            let theta = p.take("theta", 1.0);
            let sigma = p.take("sigma", 1.0);
            let radius = p.take("radius", 2.5);
            p.finish(name)?;
            let pull = if theta == 1.0 {
                "-z1".to_string()
            } else {
                format!("-{}*z1", num(theta))
            };
            let mut t = String::new();
            writeln!(t, "[dims]\nn = 0\nm = 1\nK = 1\n").unwrap();
            writeln!(t, "[drift]\nF = []\n").unwrap();
            writeln!(
                t,
                "[modes.1]\nf = [\"{pull}\"]\nsigma = [[\"{}\"]]\n",
                num(sigma)
            )
            .unwrap();
            writeln!(
                t,
                "[domain]\nphi = \"z1^2 - {r2}\"\nbox = [[{lo}, {hi}]]\n",
                r2 = num(radius * radius),
                lo = num(-1.5 * radius),
                hi = num(1.5 * radius),
            )
            .unwrap();
            writeln!(t, "[boundary]\ng = [\"z1\"]").unwrap();
            t
        }
        // Constant coefficients everywhere; every rate-function quantity
        // has a closed form, which the test suite leans on.
        "const-coef" => {
            let b = p.take("b", 0.3);
            let v1 = p.take("v1", 1.0);
            let v2 = p.take("v2", -1.0);
            let c12 = p.take("c12", 1.0);
            let c21 = p.take("c21", 1.0);
            let sigma = p.take("sigma", 1.0);
            let radius = p.take("radius", 2.0);
            p.finish(name)?;
            let mut t = String::new();
            writeln!(t, "[dims]\nn = 1\nm = 1\nK = 2\n").unwrap();
            writeln!(t, "[drift]\nF = [\"{}\"]\n", num(b)).unwrap();
            writeln!(
                t,
                "[modes.1]\nf = [\"{}\"]\nsigma = [[\"{}\"]]\n",
                num(v1),
                num(sigma)
            )
            .unwrap();
            writeln!(
                t,
                "[modes.2]\nf = [\"{}\"]\nsigma = [[\"{}\"]]\n",
                num(v2),
                num(sigma)
            )
            .unwrap();
            writeln!(t, "[rates]\nc12 = \"{}\"\nc21 = \"{}\"\n", num(c12), num(c21)).unwrap();
            writeln!(
                t,
                "[domain]\nphi = \"z1^2 + z2^2 - {r2}\"\nbox = [[{lo}, {hi}], [{lo}, {hi}]]\n",
                r2 = num(radius * radius),
                lo = num(-1.5 * radius),
                hi = num(1.5 * radius),
            )
            .unwrap();
            writeln!(t, "[boundary]\ng = [\"1\", \"0\"]").unwrap();
            t
        }
        other => {
            return Err(Error::Config(format!(
                "unknown builtin model `{other}`; available: {}",
                builtin_names().join(", ")
            )))
        }
    };
    ModelSpec::from_toml_str(&text)
}

// ---------------------------------------------------------------------------
// Low-discrepancy sampling and model validation
// ---------------------------------------------------------------------------

const HALTON_PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Radical-inverse (Halton) sequence element in (0, 1).
pub(crate) fn halton01(index: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    let mut i = index;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Deterministic quasi-random samples in a box; the seed offsets the
/// starting index so different stages see different point sets.
pub fn box_samples(bounds: &[(f64, f64)], count: usize, seed: u64) -> Vec<Vec<f64>> {
    let offset = 1 + seed % 65_536;
    (0..count)
        .map(|i| {
            bounds
                .iter()
                .enumerate()
                .map(|(axis, (lo, hi))| {
                    let u = halton01(offset + i as u64, HALTON_PRIMES[axis % 16]);
                    lo + u * (hi - lo)
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct Witness {
    pub point: Vec<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub witnesses: Vec<Witness>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub dim: usize,
    pub modes: usize,
    pub samples: usize,
    pub seed: u64,
    /// Smallest and largest diffusion eigenvalue seen across samples/modes.
    pub ellipticity_min: f64,
    pub ellipticity_max: f64,
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

const MAX_WITNESSES: usize = 5;

fn push_witness(witnesses: &mut Vec<Witness>, point: &[f64], detail: String) {
    if witnesses.len() < MAX_WITNESSES {
        witnesses.push(Witness {
            point: point.to_vec(),
            detail,
        });
    }
}

/// Sample-based validation of the standing assumptions on the coefficients:
/// switching rates strictly positive, diffusion matrices uniformly
/// elliptic, and the domain contained in its bounding box. Also exercises
/// every field once per sample so evaluation errors surface here rather
/// than mid-simulation.
pub fn validate_model(spec: &ModelSpec, samples: usize, seed: u64) -> Result<ValidationReport> {
    let d = spec.dim();
    let points = box_samples(&spec.domain.bounds, samples, seed);

    let mut rate_witnesses = Vec::new();
    let mut ell_witnesses = Vec::new();
    let mut eval_witnesses = Vec::new();
    let mut ell_min = f64::INFINITY;
    let mut ell_max = f64::NEG_INFINITY;

    for z in &points {
        for k in 0..spec.modes {
            for j in 0..spec.modes {
                if j == k {
                    continue;
                }
                match spec.rate_at(k, j, z) {
                    Ok(c) if c > 0.0 => {}
                    Ok(c) => push_witness(
                        &mut rate_witnesses,
                        z,
                        format!("c{}{} = {c} is not positive", k + 1, j + 1),
                    ),
                    Err(e) => push_witness(
                        &mut eval_witnesses,
                        z,
                        format!("c{}{}: {e}", k + 1, j + 1),
                    ),
                }
            }
            match spec.diffusion_at(k, z) {
                Ok(a) => {
                    let eig = a.symmetric_eigenvalues();
                    let lo = eig.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    ell_min = ell_min.min(lo);
                    ell_max = ell_max.max(hi);
                    if lo <= 0.0 {
                        push_witness(
                            &mut ell_witnesses,
                            z,
                            format!("mode {}: smallest eigenvalue of a = {lo}", k + 1),
                        );
                    }
                }
                Err(e) => push_witness(&mut eval_witnesses, z, format!("sigma: {e}")),
            }
            if let Err(e) = spec.fast_drift_at(k, z) {
                push_witness(&mut eval_witnesses, z, format!("modes.{}.f: {e}", k + 1));
            }
        }
        if let Err(e) = spec.slow_drift_at(z) {
            push_witness(&mut eval_witnesses, z, format!("drift.F: {e}"));
        }
        if let Err(e) = spec.level_at(z) {
            push_witness(&mut eval_witnesses, z, format!("domain.phi: {e}"));
        }
    }

    // Domain containment: points of an enlarged box that fall outside the
    // declared box must not be inside G.
    let mut containment_witnesses = Vec::new();
    let center = spec.domain.box_center();
    let enlarged: Vec<(f64, f64)> = spec
        .domain
        .bounds
        .iter()
        .zip(&center)
        .map(|((lo, hi), c)| (c + (lo - c) * 1.6, c + (hi - c) * 1.6))
        .collect();
    let mut outside_checked = 0_usize;
    for z in box_samples(&enlarged, samples * 2, seed ^ 0x00ff_00ff) {
        if spec.domain.in_box(&z) {
            continue;
        }
        outside_checked += 1;
        match spec.level_at(&z) {
            Ok(phi) if phi < 0.0 => push_witness(
                &mut containment_witnesses,
                &z,
                format!("phi = {phi} < 0 outside the bounding box"),
            ),
            Ok(_) => {}
            Err(e) => push_witness(&mut eval_witnesses, &z, format!("domain.phi: {e}")),
        }
    }

    // Boundary data must evaluate near the boundary; probe on the box edge
    // scaled toward the level set is overkill, evaluating at box samples
    // suffices to catch malformed expressions.
    for z in points.iter().take(16) {
        for k in 0..spec.modes {
            if let Err(e) = spec.boundary_at(k, z) {
                push_witness(&mut eval_witnesses, z, format!("boundary.g[{k}]: {e}"));
            }
        }
    }

    let checks = vec![
        CheckResult {
            name: "rate-positivity".into(),
            passed: rate_witnesses.is_empty(),
            detail: format!("c_kj > 0 at {} sampled points", points.len()),
            witnesses: rate_witnesses,
        },
        CheckResult {
            name: "ellipticity".into(),
            passed: ell_witnesses.is_empty() && ell_min > 0.0,
            detail: format!(
                "diffusion eigenvalues in [{ell_min:.6e}, {ell_max:.6e}] across samples"
            ),
            witnesses: ell_witnesses,
        },
        CheckResult {
            name: "domain-in-box".into(),
            passed: containment_witnesses.is_empty(),
            detail: format!("phi >= 0 at {outside_checked} points outside the bounding box"),
            witnesses: containment_witnesses,
        },
        CheckResult {
            name: "field-evaluation".into(),
            passed: eval_witnesses.is_empty(),
            detail: "all coefficient fields evaluate at sampled points".into(),
            witnesses: eval_witnesses,
        },
    ];

    Ok(ValidationReport {
        dim: d,
        modes: spec.modes,
        samples,
        seed,
        ellipticity_min: ell_min,
        ellipticity_max: ell_max,
        checks,
    })
}

// ---------------------------------------------------------------------------
// Time-dependent reference rates
// ---------------------------------------------------------------------------

/// Switching intensity schedule `c_kj(t)`: expressions over `t` alone.
/// Used as the reference measure for tilted simulation and for the
/// scheduled action functional.
#[derive(Debug, Clone)]
pub struct RateSchedule {
    pub modes: usize,
    entries: Vec<Vec<Option<ExprField>>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawSchedule {
    #[serde(rename = "K")]
    k: usize,
    rates: BTreeMap<String, String>,
}

impl RateSchedule {
    pub fn new(modes: usize, entries: Vec<(usize, usize, ExprField)>) -> Result<RateSchedule> {
        let mut table: Vec<Vec<Option<ExprField>>> = vec![vec![None; modes]; modes];
        for (i, j, f) in entries {
            if i >= modes || j >= modes || i == j {
                return Err(Error::Config(format!(
                    "schedule entry ({}, {}) out of range",
                    i + 1,
                    j + 1
                )));
            }
            table[i][j] = Some(f);
        }
        let sched = RateSchedule {
            modes,
            entries: table,
        };
        sched.check_complete()?;
        Ok(sched)
    }

    fn check_complete(&self) -> Result<()> {
        for i in 0..self.modes {
            for j in 0..self.modes {
                if i != j && self.entries[i][j].is_none() {
                    return Err(Error::Config(format!(
                        "schedule is missing rate c{}{}",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<RateSchedule> {
        let raw: RawSchedule =
            toml::from_str(text).map_err(|e| Error::Config(format!("schedule: {e}")))?;
        let mut entries = Vec::new();
        for (key, src) in &raw.rates {
            let (i, j) = parse_rate_key(key, raw.k)?;
            let field = ExprField::parse(src, 0)
                .map_err(|e| Error::Config(format!("schedule rate {key}: {e}")))?;
            entries.push((i, j, field));
        }
        RateSchedule::new(raw.k, entries)
    }

    pub fn from_toml_file(path: &Path) -> Result<RateSchedule> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        RateSchedule::from_toml_str(&text)
    }

    pub fn rate_at(&self, from: usize, to: usize, t: f64) -> Result<f64> {
        match &self.entries[from][to] {
            Some(f) => {
                let c = f.eval(&[], t)?;
                if c > 0.0 && c.is_finite() {
                    Ok(c)
                } else {
                    Err(Error::Model(format!(
                        "schedule rate c{}{}({t}) = {c} is not positive",
                        from + 1,
                        to + 1
                    )))
                }
            }
            None => Err(Error::Model(format!(
                "schedule rate c{}{} undefined",
                from + 1,
                to + 1
            ))),
        }
    }

    pub fn leaving_rate_at(&self, from: usize, t: f64) -> Result<f64> {
        let mut total = 0.0;
        for to in 0..self.modes {
            if to != from {
                total += self.rate_at(from, to, t)?;
            }
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_params() -> BTreeMap<String, f64> {
        BTreeMap::new()
    }

    #[test]
    fn builtin_two_mode_linear_matches_registry_definition() {
        let spec = builtin_model("two-mode-linear", &default_params()).unwrap();
        assert_eq!((spec.slow_dim, spec.fast_dim, spec.modes), (1, 1, 2));
        for &(x, y) in &[(0.2, -0.4), (-0.7, 0.9), (0.0, 0.0)] {
            let z = [x, y];
            assert_eq!(spec.slow_drift_at(&z).unwrap(), vec![y]);
            assert_eq!(spec.fast_drift_at(0, &z).unwrap(), vec![-(y - 1.0)]);
            assert_eq!(spec.fast_drift_at(1, &z).unwrap(), vec![-(y + 1.0)]);
            assert_eq!(spec.rate_at(0, 1, &z).unwrap(), 1.0);
            assert_eq!(spec.rate_at(1, 0, &z).unwrap(), 1.0);
            assert_eq!(spec.level_at(&z).unwrap(), x * x + y * y - 1.0);
        }
        assert_eq!(spec.noise_at(0, &[0.1, 0.2]).unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn builtin_parameters_shift_the_model() {
        let mut params = BTreeMap::new();
        params.insert("kappa".to_string(), 0.5);
        params.insert("c12".to_string(), 2.0);
        params.insert("cx".to_string(), 0.3);
        let spec = builtin_model("two-mode-linear", &params).unwrap();
        let z = [0.4, -0.2];
        assert_eq!(spec.slow_drift_at(&z).unwrap(), vec![-0.2 - 0.5 * 0.4]);
        assert_eq!(spec.rate_at(0, 1, &z).unwrap(), 2.0);
        let on_shifted = [1.3, 0.0];
        assert!(spec.level_at(&on_shifted).unwrap().abs() < 1e-12);
    }

    #[test]
    fn builtin_ou_k1() {
        let spec = builtin_model("ou-k1", &default_params()).unwrap();
        assert_eq!((spec.slow_dim, spec.fast_dim, spec.modes), (0, 1, 1));
        assert_eq!(spec.fast_drift_at(0, &[0.7]).unwrap(), vec![-0.7]);
        assert!(spec.inside(&[2.4]).unwrap());
        assert!(!spec.inside(&[2.6]).unwrap());
    }

    #[test]
    fn unknown_builtin_and_unknown_params_error() {
        assert!(builtin_model("nosuchmodel", &default_params()).is_err());
        let mut params = BTreeMap::new();
        params.insert("bogus".to_string(), 1.0);
        let err = builtin_model("ou-k1", &params).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn toml_round_trip_preserves_fields() {
        let spec = builtin_model("two-mode-linear", &default_params()).unwrap();
        let text = spec.to_toml_string().unwrap();
        let back = ModelSpec::from_toml_str(&text).unwrap();
        for &(x, y) in &[(0.11, -0.87), (-0.5, 0.5)] {
            let z = [x, y];
            assert_eq!(
                spec.stacked_drift_at(0, &z).unwrap(),
                back.stacked_drift_at(0, &z).unwrap()
            );
            assert_eq!(spec.level_at(&z).unwrap(), back.level_at(&z).unwrap());
            assert_eq!(
                spec.rate_at(1, 0, &z).unwrap(),
                back.rate_at(1, 0, &z).unwrap()
            );
        }
    }

    #[test]
    fn config_errors_name_the_offending_key() {
        let bad = r#"
[dims]
n = 1
m = 1
K = 1

[drift]
F = ["z2 +"]

[modes.1]
f = ["0"]
sigma = [["1"]]

[domain]
phi = "z1^2 + z2^2 - 1"
box = [[-1, 1], [-1, 1]]

[boundary]
g = ["0"]
"#;
        let err = ModelSpec::from_toml_str(bad).unwrap_err();
        assert!(err.to_string().contains("drift.F[0]"), "{err}");
    }

    #[test]
    fn time_dependent_model_fields_are_rejected() {
        let bad = r#"
[dims]
n = 0
m = 1
K = 1

[drift]
F = []

[modes.1]
f = ["-z1 * t"]
sigma = [["1"]]

[domain]
phi = "z1^2 - 1"
box = [[-2, 2]]

[boundary]
g = ["z1"]
"#;
        let err = ModelSpec::from_toml_str(bad).unwrap_err();
        assert!(err.to_string().contains("may not depend on t"), "{err}");
    }

    #[test]
    fn validation_passes_builtins_and_flags_bad_rates() {
        for name in builtin_names() {
            let spec = builtin_model(name, &default_params()).unwrap();
            let report = validate_model(&spec, 200, 7).unwrap();
            assert!(report.passed(), "{name}: {:?}", report.checks);
        }
        // two-mode model with a rate that changes sign inside the box
        let bad = r#"
[dims]
n = 1
m = 1
K = 2

[drift]
F = ["z2"]

[modes.1]
f = ["1"]
sigma = [["1"]]

[modes.2]
f = ["-1"]
sigma = [["1"]]

[rates]
c12 = "z1"
c21 = "1"

[domain]
phi = "z1^2 + z2^2 - 1"
box = [[-1.5, 1.5], [-1.5, 1.5]]

[boundary]
g = ["0", "1"]
"#;
        let spec = ModelSpec::from_toml_str(bad).unwrap();
        let report = validate_model(&spec, 200, 7).unwrap();
        assert!(!report.passed());
        let rate_check = report
            .checks
            .iter()
            .find(|c| c.name == "rate-positivity")
            .unwrap();
        assert!(!rate_check.passed);
        assert!(!rate_check.witnesses.is_empty());
    }

    #[test]
    fn ellipticity_of_unit_noise_is_exactly_one() {
        let spec = builtin_model("two-mode-linear", &default_params()).unwrap();
        let report = validate_model(&spec, 300, 3).unwrap();
        assert!((report.ellipticity_min - 1.0).abs() < 1e-12);
        assert!((report.ellipticity_max - 1.0).abs() < 1e-12);
    }

    #[test]
    fn domain_containment_catches_oversized_domains() {
        // Level set negative well outside the declared box.
        let bad = r#"
[dims]
n = 0
m = 1
K = 1

[drift]
F = []

[modes.1]
f = ["-z1"]
sigma = [["1"]]

[domain]
phi = "z1^2 - 25"
box = [[-2, 2]]

[boundary]
g = ["z1"]
"#;
        let spec = ModelSpec::from_toml_str(bad).unwrap();
        let report = validate_model(&spec, 200, 11).unwrap();
        let check = report
            .checks
            .iter()
            .find(|c| c.name == "domain-in-box")
            .unwrap();
        assert!(!check.passed);
    }

    #[test]
    fn rate_schedule_parses_and_evaluates() {
        let text = r#"
K = 2

[rates]
c12 = "1 + 0.5*sin(t)"
c21 = "2"
"#;
        let sched = RateSchedule::from_toml_str(text).unwrap();
        let t = 0.8_f64;
        assert_eq!(sched.rate_at(0, 1, t).unwrap(), 1.0 + 0.5 * t.sin());
        assert_eq!(sched.rate_at(1, 0, t).unwrap(), 2.0);
        assert_eq!(
            sched.leaving_rate_at(0, t).unwrap(),
            1.0 + 0.5 * t.sin()
        );
        let incomplete = r#"
K = 2

[rates]
c12 = "1"
"#;
        assert!(RateSchedule::from_toml_str(incomplete).is_err());
    }

    #[test]
    fn halton_points_fill_the_box() {
        let bounds = [(0.0, 1.0), (-2.0, 2.0)];
        let pts = box_samples(&bounds, 500, 1);
        assert_eq!(pts.len(), 500);
        for p in &pts {
            assert!(p[0] > 0.0 && p[0] < 1.0);
            assert!(p[1] > -2.0 && p[1] < 2.0);
        }
        // crude equidistribution check on the first axis
        let left = pts.iter().filter(|p| p[0] < 0.5).count();
        assert!((left as f64 - 250.0).abs() < 30.0);
    }
}
