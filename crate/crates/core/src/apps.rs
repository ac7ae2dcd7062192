//! Pipelines on top of a factorization: least-squares inversion, spectral
//! filtering of coordinate functions, and Gaussian random fields.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::butterfly::{bf_apply_adjoint_with, bf_apply_with, norm_estimate, ButterflyFactor};
use crate::error::{Error, Result};
use crate::matrix::C64;
use crate::parallel::{try_map_range, Execution};
use crate::tree::PointCloud;

/// A nonnegative function of the eigenvalue, used both as a filter and as
/// the spectral density of a random field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SpectralDensity {
    /// `σ²(2ν/ℓ² + λ)^{−(ν+1)}`, the Whittle–Matérn form on a surface.
    Matern { nu: f64, lengthscale: f64, variance: f64 },
    /// `offset + amplitude·exp(−(λ − λ₀)²/η²)`.
    GaussBump { l0: f64, eta: f64, amplitude: f64, offset: f64 },
    /// `1` for `λ < cutoff`, `0` otherwise.
    LowPass { cutoff: f64 },
    Constant(f64),
    /// One value per eigenvalue, in order.
    Tabulated(Vec<f64>),
}

impl SpectralDensity {
    /// Values at `eigenvalues`, checked finite and nonnegative.
    pub fn values(&self, eigenvalues: &[f64]) -> Result<Vec<f64>> {
        let vals: Vec<f64> = match self {
            SpectralDensity::Tabulated(t) => {
                if t.len() != eigenvalues.len() {
                    return Err(Error::Shape(format!(
                        "{} tabulated values for {} eigenvalues",
                        t.len(),
                        eigenvalues.len()
                    )));
                }
                t.clone()
            }
            _ => eigenvalues.iter().map(|&l| self.at(l)).collect(),
        };
        if let Some((k, v)) = vals.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Domain(format!("density value {v} at eigenvalue index {k}")));
        }
        Ok(vals)
    }

    fn at(&self, lambda: f64) -> f64 {
        match *self {
            SpectralDensity::Matern { nu, lengthscale, variance } => {
                variance * (2.0 * nu / (lengthscale * lengthscale) + lambda).powf(-(nu + 1.0))
            }
            SpectralDensity::GaussBump { l0, eta, amplitude, offset } => {
                offset + amplitude * (-((lambda - l0) / eta).powi(2)).exp()
            }
            SpectralDensity::LowPass { cutoff } => {
                if lambda < cutoff {
                    1.0
                } else {
                    0.0
                }
            }
            SpectralDensity::Constant(c) => c,
            SpectralDensity::Tabulated(_) => unreachable!("tabulated densities go through values"),
        }
    }
}

/// Parses `matern:nu=3,ell=0.1,var=1`, `bump:l0=5500,eta=5000,amp=6400,offset=1`,
/// `lowpass:cut=1000` or `const:value=1`.
impl FromStr for SpectralDensity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (family, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut params = std::collections::HashMap::new();
        for kv in rest.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("expected key=value, got {kv:?}")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad number {v:?} for {k}")))?;
            params.insert(k.trim().to_string(), v);
        }
        let get = |k: &str, default: Option<f64>| -> Result<f64> {
            params
                .get(k)
                .copied()
                .or(default)
                .ok_or_else(|| Error::InvalidInput(format!("density {family} needs {k}")))
        };
        let known: &[&str] = match family.trim() {
            "matern" => &["nu", "ell", "var"],
            "bump" => &["l0", "eta", "amp", "offset"],
            "lowpass" => &["cut"],
            "const" => &["value"],
            other => return Err(Error::InvalidInput(format!("unknown density family {other:?}"))),
        };
        if let Some(k) = params.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(Error::InvalidInput(format!("unknown parameter {k} for {family}")));
        }
        let d = match family.trim() {
            "matern" => SpectralDensity::Matern {
                nu: get("nu", None)?,
                lengthscale: get("ell", None)?,
                variance: get("var", Some(1.0))?,
            },
            "bump" => SpectralDensity::GaussBump {
                l0: get("l0", None)?,
                eta: get("eta", None)?,
                amplitude: get("amp", Some(1.0))?,
                offset: get("offset", Some(0.0))?,
            },
            "lowpass" => SpectralDensity::LowPass { cutoff: get("cut", None)? },
            _ => SpectralDensity::Constant(get("value", Some(1.0))?),
        };
        if let SpectralDensity::Matern { nu, lengthscale, variance } = d {
            if !(nu > 0.0 && lengthscale > 0.0 && variance >= 0.0) {
                return Err(Error::InvalidInput("matern needs nu > 0, ell > 0, var ≥ 0".into()));
            }
        }
        Ok(d)
    }
}

/// `c_k ↦ F(λ_k) c_k`.
pub fn filter_coefficients(c: &[C64], eigenvalues: &[f64], filter: &SpectralDensity) -> Result<Vec<C64>> {
    if c.len() != eigenvalues.len() {
        return Err(Error::Shape(format!(
            "{} coefficients for {} eigenvalues",
            c.len(),
            eigenvalues.len()
        )));
    }
    let f = filter.values(eigenvalues)?;
    Ok(c.iter().zip(&f).map(|(z, w)| z * *w).collect())
}

#[derive(Clone, Copy, Debug)]
pub struct LsqrOptions {
    /// Stop once `‖Φ^*r‖ ≤ tol·‖Φ‖·‖r‖` or `‖r‖ ≤ tol·‖f‖`.
    pub tol: f64,
    pub max_iter: usize,
    pub execution: Execution,
    /// Seed of the power iteration estimating `‖Φ‖`.
    pub seed: u64,
}

impl Default for LsqrOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 200,
            execution: Execution::default(),
            seed: 0x15c0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LsqrStop {
    ZeroRhs,
    /// `‖r‖ ≤ tol·‖f‖`.
    Residual,
    /// `‖Φ^*r‖ ≤ tol·‖Φ‖·‖r‖`.
    NormalEquations,
    MaxIterations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsqrReport {
    pub iterations: usize,
    pub converged: bool,
    pub stop: LsqrStop,
    pub residual_norm: f64,
    pub normal_residual_norm: f64,
    pub operator_norm: f64,
}

#[derive(Clone, Debug)]
pub struct LsqrResult {
    pub coefficients: Vec<C64>,
    pub report: LsqrReport,
}

/// `argmin_c ‖Φc − f‖` by LSQR on the factorization.
pub fn lsqr_solve(bf: &ButterflyFactor, f: &[C64], opts: &LsqrOptions) -> Result<LsqrResult> {
    if f.len() != bf.rows() {
        return Err(Error::Shape(format!("{} values for {} rows", f.len(), bf.rows())));
    }
    let exec = opts.execution;
    let m = bf.cols();
    let mut x = vec![C64::new(0.0, 0.0); m];
    let anorm = norm_estimate(bf, 10, opts.seed)?;
    let bnorm = norm(f);
    let report = |iterations, stop, residual_norm, normal_residual_norm| LsqrReport {
        iterations,
        converged: stop != LsqrStop::MaxIterations,
        stop,
        residual_norm,
        normal_residual_norm,
        operator_norm: anorm,
    };
    if bnorm == 0.0 {
        return Ok(LsqrResult {
            coefficients: x,
            report: report(0, LsqrStop::ZeroRhs, 0.0, 0.0),
        });
    }

    let mut u: Vec<C64> = f.iter().map(|z| z / bnorm).collect();
    let mut beta = bnorm;
    let mut v = bf_apply_adjoint_with(bf, &u, exec)?;
    let mut alpha = norm(&v);
    if alpha == 0.0 {
        return Ok(LsqrResult {
            coefficients: x,
            report: report(0, LsqrStop::NormalEquations, bnorm, 0.0),
        });
    }
    scale(&mut v, 1.0 / alpha);
    let mut w = v.clone();
    let (mut phibar, mut rhobar) = (beta, alpha);
    let (mut rnorm, mut arnorm) = (bnorm, alpha * beta);

    for it in 1..=opts.max_iter {
        // Bidiagonalization: β u = Φv − αu, α v = Φ^*u − βv.
        let av = bf_apply_with(bf, &v, exec)?;
        for (ui, a) in u.iter_mut().zip(&av) {
            *ui = a - *ui * alpha;
        }
        beta = norm(&u);
        if beta > 0.0 {
            scale(&mut u, 1.0 / beta);
            let atu = bf_apply_adjoint_with(bf, &u, exec)?;
            for (vi, a) in v.iter_mut().zip(&atu) {
                *vi = a - *vi * beta;
            }
            alpha = norm(&v);
            if alpha > 0.0 {
                scale(&mut v, 1.0 / alpha);
            }
        } else {
            alpha = 0.0;
        }

        // Plane rotation eliminating the subdiagonal β.
        let rho = rhobar.hypot(beta);
        let (c, s) = (rhobar / rho, beta / rho);
        let theta = s * alpha;
        rhobar = -c * alpha;
        let phi = c * phibar;
        phibar *= s;

        let (t1, t2) = (phi / rho, -theta / rho);
        for ((xi, wi), vi) in x.iter_mut().zip(w.iter_mut()).zip(&v) {
            *xi += *wi * t1;
            *wi = vi + *wi * t2;
        }

        rnorm = phibar.abs();
        arnorm = (phibar * alpha * c).abs();
        let stop = if rnorm <= opts.tol * bnorm {
            Some(LsqrStop::Residual)
        } else if arnorm <= opts.tol * anorm * rnorm || alpha == 0.0 {
            Some(LsqrStop::NormalEquations)
        } else {
            None
        };
        if let Some(stop) = stop {
            return Ok(LsqrResult {
                coefficients: x,
                report: report(it, stop, rnorm, arnorm),
            });
        }
    }
    Ok(LsqrResult {
        coefficients: x,
        report: report(opts.max_iter, LsqrStop::MaxIterations, rnorm, arnorm),
    })
}

fn norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn scale(v: &mut [C64], s: f64) {
    v.iter_mut().for_each(|z| *z *= s);
}

/// Filtered coordinates of a 3-D point cloud: each coordinate function is
/// inverted by LSQR, filtered, and mapped back. Rows of `coords` follow the
/// factorization's row order. An error if any solve fails to converge.
pub fn filter_geometry(
    bf: &ButterflyFactor,
    coords: &PointCloud,
    eigenvalues: &[f64],
    filter: &SpectralDensity,
    opts: &LsqrOptions,
) -> Result<(PointCloud, Vec<LsqrReport>)> {
    if coords.dim() != 3 || coords.len() != bf.rows() {
        return Err(Error::Shape(format!(
            "expected {} points in 3-D, got {} in {}-D",
            bf.rows(),
            coords.len(),
            coords.dim()
        )));
    }
    let results = try_map_range(Execution::Sequential, 3, |d| {
        let f: Vec<C64> = (0..coords.len())
            .map(|j| C64::new(coords.point(j)[d], 0.0))
            .collect();
        let sol = lsqr_solve(bf, &f, opts)?;
        if !sol.report.converged {
            return Err(Error::NoConvergence {
                node: None,
                residuals: vec![sol.report.residual_norm, sol.report.normal_residual_norm],
            });
        }
        let filtered = filter_coefficients(&sol.coefficients, eigenvalues, filter)?;
        let y = bf_apply_with(bf, &filtered, opts.execution)?;
        Ok((y, sol.report))
    })?;
    let mut out = vec![0.0; 3 * coords.len()];
    let mut reports = Vec::with_capacity(3);
    for (d, (y, rep)) in results.into_iter().enumerate() {
        for (j, z) in y.iter().enumerate() {
            out[3 * j + d] = z.re;
        }
        reports.push(rep);
    }
    Ok((PointCloud::new(3, out)?, reports))
}

/// Karhunen–Loève model `Y = Φ(√S ⊙ z)` with covariance `Φ S Φ^*`.
pub struct GrfModel<'a> {
    bf: &'a ButterflyFactor,
    density: SpectralDensity,
    weights: Vec<f64>,
    execution: Execution,
}

impl<'a> GrfModel<'a> {
    /// Matérn weights are rescaled to sum to the variance, so that on a
    /// basis of unit-modulus functions the pointwise variance is `σ²`
    /// whatever the truncation `m`.
    pub fn new(bf: &'a ButterflyFactor, eigenvalues: &[f64], density: SpectralDensity) -> Result<Self> {
        if eigenvalues.len() != bf.cols() {
            return Err(Error::Shape(format!(
                "{} eigenvalues for {} columns",
                eigenvalues.len(),
                bf.cols()
            )));
        }
        let mut weights = density.values(eigenvalues)?;
        if let SpectralDensity::Matern { variance, .. } = density {
            let total: f64 = weights.iter().sum();
            if total > 0.0 {
                weights.iter_mut().for_each(|w| *w *= variance / total);
            }
        }
        Ok(Self {
            bf,
            density,
            weights,
            execution: Execution::default(),
        })
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.execution = exec;
        self
    }

    pub fn density(&self) -> &SpectralDensity {
        &self.density
    }

    /// `S(λ_k)` after normalization.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn factor(&self) -> &ButterflyFactor {
        self.bf
    }
}

/// Standard normals from ChaCha20 stream `stream` of `seed`, by Box–Muller.
pub fn standard_normals(seed: u64, stream: u64, count: usize) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut out = Vec::with_capacity(count + 1);
    while out.len() < count {
        let u1 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random();
        let r = (-2.0 * u1.ln()).sqrt();
        let t = 2.0 * std::f64::consts::PI * u2;
        out.push(r * t.cos());
        out.push(r * t.sin());
    }
    out.truncate(count);
    out
}

/// One field sample; bitwise reproducible for a given `seed`.
pub fn grf_sample(model: &GrfModel, seed: u64) -> Result<Vec<C64>> {
    grf_sample_stream(model, seed, 0)
}

fn grf_sample_stream(model: &GrfModel, seed: u64, stream: u64) -> Result<Vec<C64>> {
    let z = standard_normals(seed, stream, model.weights.len());
    let c: Vec<C64> = z
        .iter()
        .zip(&model.weights)
        .map(|(z, w)| C64::new(z * w.sqrt(), 0.0))
        .collect();
    bf_apply_with(model.bf, &c, model.execution)
}

/// `count` samples; sample `i` uses stream `i` of `seed`, so the result does
/// not depend on the execution mode.
pub fn grf_samples(model: &GrfModel, seed: u64, count: usize) -> Result<Vec<Vec<C64>>> {
    let inner = GrfModel {
        bf: model.bf,
        density: model.density.clone(),
        weights: model.weights.clone(),
        execution: Execution::Sequential,
    };
    try_map_range(model.execution, count, |i| grf_sample_stream(&inner, seed, i as u64))
}

/// `Φ(S ⊙ Φ^*v)`.
pub fn covariance_matvec(model: &GrfModel, v: &[C64]) -> Result<Vec<C64>> {
    let mut c = bf_apply_adjoint_with(model.bf, v, model.execution)?;
    for (z, w) in c.iter_mut().zip(&model.weights) {
        *z *= *w;
    }
    bf_apply_with(model.bf, &c, model.execution)
}
