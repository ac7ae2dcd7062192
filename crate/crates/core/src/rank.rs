//! Bessel functions, ε-rank bounds for Fourier and Bessel kernels, their
//! empirical counterparts, and the torus memory-scaling sweep.
//!
//! The ε-rank of a kernel is measured in the max norm: the smallest `r` for
//! which some rank-`r` separable approximation is within `ε` entrywise. The
//! empirical oracle truncates an SVD of the sampled kernel and checks the
//! largest entry of the residual.

use std::f64::consts::{E, LN_2, PI};
use std::io::Write;
use std::time::Instant;

use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::butterfly::{stream_into, ButterflyOptions, CountingSink};
use crate::error::{Error, Result};
use crate::matrix::{thin_svd, DenseMatrix, C64};
use crate::parallel::{map_range, try_map_range, Execution};
use crate::torus::{torus_basis, torus_provider};
use crate::tree::{build_frequency_tree, build_quadtree, default_depth, PointCloud};

pub const MAX_ORDER: usize = 200;
pub const MAX_ARG: f64 = 1e4;

fn check_envelope(k: usize, x: f64) -> Result<()> {
    if k > MAX_ORDER || !(0.0..=MAX_ARG).contains(&x) {
        return Err(Error::Domain(format!(
            "J_{k}({x}) is outside 0 ≤ k ≤ {MAX_ORDER}, 0 ≤ x ≤ {MAX_ARG}"
        )));
    }
    Ok(())
}

/// `J_k(x)` for integer `0 ≤ k ≤ 200` and `0 ≤ x ≤ 10⁴`.
pub fn bessel_j(k: usize, x: f64) -> Result<f64> {
    check_envelope(k, x)?;
    Ok(if use_series(k, x) {
        series(k, x)
    } else {
        miller(k, x)[k]
    })
}

/// `[J_0(x), …, J_kmax(x)]`.
pub fn bessel_j_all(kmax: usize, x: f64) -> Result<Vec<f64>> {
    check_envelope(kmax, x)?;
    Ok(j_all(kmax, x))
}

fn j_all(kmax: usize, x: f64) -> Vec<f64> {
    if x == 0.0 {
        let mut v = vec![0.0; kmax + 1];
        v[0] = 1.0;
        return v;
    }
    let mut v = miller(kmax, x);
    v.truncate(kmax + 1);
    for (k, j) in v.iter_mut().enumerate() {
        if use_series(k, x) {
            *j = series(k, x);
        }
    }
    v
}

/// `J_k` with negative orders folded by `J_{−n} = (−1)^n J_n`.
fn signed(table: &[f64], k: i64) -> f64 {
    let n = k.unsigned_abs() as usize;
    if k < 0 && n % 2 == 1 {
        -table[n]
    } else {
        table[n]
    }
}

// The series terms shrink by at least half from the first one on, so the
// alternating sum keeps full relative precision.
fn use_series(k: usize, x: f64) -> bool {
    x * x <= 2.0 * (k as f64 + 1.0)
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

fn series(k: usize, x: f64) -> f64 {
    if x == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    let lead = (k as f64 * (0.5 * x).ln() - ln_factorial(k)).exp();
    let q = 0.25 * x * x;
    let (mut term, mut sum) = (1.0, 1.0);
    for m in 1..200 {
        term *= -q / (m as f64 * (m + k) as f64);
        sum += term;
        if term.abs() <= 1e-17 * sum.abs() {
            break;
        }
    }
    lead * sum
}

/// Miller's downward recurrence from an order far past both `kmax` and `x`,
/// normalized by `J_0² + 2Σ J_n² = 1` with the sign taken from
/// `J_0 + 2Σ J_{2n} = 1`. Returns orders `0..=start`.
fn miller(kmax: usize, x: f64) -> Vec<f64> {
    let m0 = kmax.max(x.ceil() as usize);
    let mut start = m0 + 40 + (50.0 * m0 as f64).sqrt().ceil() as usize;
    start += start % 2;
    let mut f = vec![0.0; start + 2];
    f[start] = 1e-30;
    for n in (1..=start).rev() {
        f[n - 1] = 2.0 * n as f64 / x * f[n] - f[n + 1];
        if f[n - 1].abs() > 1e100 {
            for v in &mut f[n - 1..] {
                *v *= 1e-100;
            }
        }
    }
    f.truncate(start + 1);
    let squares = f[0] * f[0] + 2.0 * f[1..].iter().map(|v| v * v).sum::<f64>();
    let linear = f[0] + 2.0 * f.iter().skip(2).step_by(2).sum::<f64>();
    let scale = squares.sqrt().copysign(linear);
    f.iter_mut().for_each(|v| *v /= scale);
    f
}

/// `½⌈ebR + log 2 + log ε⁻¹⌉²`: ε-rank bound of `e^{iω·x}` for `ω ∈ B_b`, `x ∈ B_R`.
pub fn bound_disk_rank(b: f64, radius: f64, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    if !(b > 0.0 && radius > 0.0) {
        return Err(Error::Domain("disk radii must be positive".into()));
    }
    let c = (E * b * radius + LN_2 - eps.ln()).ceil();
    Ok(0.5 * c * c)
}

/// `⌈5/2 + log ε⁻⁴⌉·⌈(e/2)bR + log ε⁻¹⌉`: ε-rank bound of `e^{iω·x}` for
/// `a ≤ |ω| ≤ b`, `x ∈ B_R`; valid when `(b − a)R < 1`, which the caller
/// asserts.
pub fn bound_annulus_rank(b: f64, radius: f64, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    if !(b >= 0.0 && radius >= 0.0) {
        return Err(Error::Domain("annulus parameters must be nonnegative".into()));
    }
    Ok((2.5 - 4.0 * eps.ln()).ceil() * (0.5 * E * b * radius - eps.ln()).ceil())
}

/// `⌈(2ξ + 2log 4 + log ε⁻²) / log(8ξ/((b − a)R))⌉`: ε-rank bound of
/// `J_k(ρr)` for `a ≤ ρ ≤ b`, `0 ≤ r ≤ R`, any `ξ > (b − a)R/8`.
///
/// A degenerate interval `(b − a)R = 0` gives a kernel of rank one; the
/// closed form degenerates to 0 there and 1 is returned instead.
pub fn bound_bessel_rank(a: f64, b: f64, radius: f64, eps: f64, xi: f64) -> Result<f64> {
    check_eps(eps)?;
    let w = bessel_width(a, b, radius)?;
    if w == 0.0 {
        return Ok(1.0);
    }
    if !(xi > w / 8.0) {
        return Err(Error::Domain(format!("ξ = {xi} must exceed (b − a)R/8 = {}", w / 8.0)));
    }
    Ok(((2.0 * xi + 2.0 * 4f64.ln() - 2.0 * eps.ln()) / (8.0 * xi / w).ln()).ceil())
}

/// Minimum of [`bound_bessel_rank`] over a logarithmic grid of `ξ`, with the
/// minimizing `ξ`.
pub fn bound_bessel_rank_min(a: f64, b: f64, radius: f64, eps: f64) -> Result<(f64, f64)> {
    check_eps(eps)?;
    let w = bessel_width(a, b, radius)?;
    if w == 0.0 {
        return Ok((1.0, f64::NAN));
    }
    let lo = (w / 8.0 * (1.0 + 1e-9)).ln();
    let hi = (1e4f64).max(w).ln();
    let steps = 2000;
    let mut best = (f64::INFINITY, f64::NAN);
    for s in 0..=steps {
        let xi = (lo + (hi - lo) * s as f64 / steps as f64).exp();
        if xi <= w / 8.0 {
            continue;
        }
        let v = bound_bessel_rank(a, b, radius, eps, xi)?;
        if v < best.0 {
            best = (v, xi);
        }
    }
    Ok(best)
}

fn bessel_width(a: f64, b: f64, radius: f64) -> Result<f64> {
    if !(0.0 <= a && a <= b && radius >= 0.0 && b.is_finite() && radius.is_finite()) {
        return Err(Error::Domain(format!(
            "need 0 ≤ a ≤ b and R ≥ 0, got a = {a}, b = {b}, R = {radius}"
        )));
    }
    Ok((b - a) * radius)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Domain(format!("ε must lie in (0, 1), got {eps}")));
    }
    Ok(())
}

/// Smallest `q_max` for which the neglected terms of
/// [`bessel_chebyshev_coeffs`] sum to below `1e−15`.
pub fn chebyshev_q_max(a: f64, b: f64, r: f64) -> usize {
    let half = 0.25 * (b - a) * r / 2.0;
    if half == 0.0 {
        return 1;
    }
    // Each neglected coefficient term is at most 4|J_n(z)| ≤ 4(z/2)^n/n!
    // with n ≥ q; the geometric tail adds at most a factor of two once
    // z/2 < (q + 2)/2.
    let mut q = 1usize;
    loop {
        let n = (q + 1) as f64;
        let ln_term = (8.0f64).ln() + n * half.ln() - ln_factorial(q + 1);
        if half < 0.5 * (q as f64 + 2.0) && ln_term < (1e-15f64).ln() {
            return q;
        }
        q += 1;
    }
}

/// Chebyshev coefficients `c_{k0}, …, c_{kℓ_max}` of `ρ ↦ J_k(ρr)` on
/// `[a, b]`, so that `J_k(ρr) = c_0/2 + Σ_ℓ c_ℓ T_ℓ(2(ρ − a)/(b − a) − 1)`.
///
/// Each coefficient is the sum over `q < q_max` of
/// `2η_p J_{(p+ℓ)/2}(z) J_{(p−ℓ)/2}(z) [J_{k−p}(w) + (−1)^p J_{k+p}(w)]`
/// with `p = 2q` for even `ℓ`, `p = 2q + 1` for odd `ℓ`,
/// `z = (b − a)r/4`, `w = (b + a)r/2`, `η_0 = ½` and `η_p = 1` otherwise.
pub fn bessel_chebyshev_coeffs(
    k: usize,
    a: f64,
    b: f64,
    r: f64,
    ell_max: usize,
    q_max: usize,
) -> Result<Vec<f64>> {
    if !(a.is_finite() && b.is_finite() && r.is_finite() && 0.0 <= a && a <= b && r >= 0.0) {
        return Err(Error::Domain(format!("need 0 ≤ a ≤ b and r ≥ 0, got {a}, {b}, {r}")));
    }
    let need = chebyshev_q_max(a, b, r);
    if q_max < need {
        return Err(Error::Domain(format!(
            "q_max = {q_max} leaves a tail above 1e-15; need at least {need}"
        )));
    }
    let z = 0.25 * (b - a) * r;
    let w = 0.5 * (b + a) * r;
    let p_max = 2 * q_max + 1;
    let jz_order = (p_max + ell_max) / 2 + 1;
    let jw_order = k + p_max;
    check_envelope(jz_order.max(jw_order), z.max(w))?;
    let jz = j_all(jz_order, z);
    let jw = j_all(jw_order, w);
    let coeffs = (0..=ell_max)
        .map(|ell| {
            (0..q_max)
                .map(|q| {
                    let p = 2 * q + ell % 2;
                    let eta = if p == 0 { 0.5 } else { 1.0 };
                    let sign = if p % 2 == 0 { 1.0 } else { -1.0 };
                    let (p, ell, k) = (p as i64, ell as i64, k as i64);
                    2.0 * eta
                        * signed(&jz, (p + ell) / 2)
                        * signed(&jz, (p - ell) / 2)
                        * (signed(&jw, k - p) + sign * signed(&jw, k + p))
                })
                .sum()
        })
        .collect();
    Ok(coeffs)
}

/// `c_0/2 + Σ c_ℓ T_ℓ(t)` at `t = 2(ρ − a)/(b − a) − 1`, by Clenshaw.
pub fn chebyshev_eval(coeffs: &[f64], a: f64, b: f64, rho: f64) -> f64 {
    if coeffs.is_empty() {
        return 0.0;
    }
    let t = if b > a { 2.0 * (rho - a) / (b - a) - 1.0 } else { 0.0 };
    let (mut b1, mut b2) = (0.0, 0.0);
    for &c in coeffs[1..].iter().rev() {
        let b0 = 2.0 * t * b1 - b2 + c;
        b2 = b1;
        b1 = b0;
    }
    t * b1 - b2 + 0.5 * coeffs[0]
}

/// A domain centered at the origin, in frequency or in space. The center
/// does not affect ranks: moving it scales rows or columns by unimodular
/// factors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum KernelDomain {
    Disk { radius: f64 },
    Annulus { inner: f64, outer: f64 },
    Circle { radius: f64 },
}

impl KernelDomain {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            KernelDomain::Disk { radius } | KernelDomain::Circle { radius } => {
                radius.is_finite() && radius >= 0.0
            }
            KernelDomain::Annulus { inner, outer } => {
                inner.is_finite() && outer.is_finite() && 0.0 <= inner && inner <= outer
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid domain {self:?}")))
        }
    }

    fn radial_nodes(&self, n: usize) -> Vec<f64> {
        let (lo, hi) = match *self {
            KernelDomain::Circle { radius } => return vec![radius],
            KernelDomain::Disk { radius } => (0.0, radius),
            KernelDomain::Annulus { inner, outer } => (inner, outer),
        };
        (0..n).map(|j| lo + (hi - lo) * j as f64 / (n - 1) as f64).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum RankKernel {
    /// `e^{iω·x}` from frequencies `ω ∈ freq` to points `x ∈ space`.
    Fourier { freq: KernelDomain, space: KernelDomain },
    /// `J_order(ρr)` for `a ≤ ρ ≤ b` and `0 ≤ r ≤ radius`.
    Bessel { order: usize, a: f64, b: f64, radius: f64 },
}

/// Empirical ε-rank at a base resolution and at twice that resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsRank {
    /// The rank at the refined resolution.
    pub rank: usize,
    pub coarse_rank: usize,
    pub resolution: usize,
    /// Whether doubling the resolution left the rank unchanged.
    pub converged: bool,
    /// Singular values of the refined sample above `ε`, for comparison.
    pub singular_values_above: usize,
}

pub const DEFAULT_RESOLUTION: usize = 128;

/// Max-norm ε-rank of a sampled kernel, with a resolution-doubling check.
///
/// Polar domains are sampled on tensor grids with `resolution` radial and
/// `resolution` angular nodes (circles use one radial node). Both domains
/// share the angular grid, which makes the Fourier kernel block circulant in
/// angle; an FFT splits it into one radial block per angular frequency.
pub fn empirical_eps_rank(kernel: &RankKernel, eps: f64, resolution: usize) -> Result<EpsRank> {
    check_eps(eps)?;
    if resolution < 64 {
        return Err(Error::InvalidInput(format!("resolution {resolution} is below 64")));
    }
    let coarse = sampled_rank(kernel, eps, resolution)?;
    let (fine, above) = sampled_rank_with_count(kernel, eps, 2 * resolution)?;
    Ok(EpsRank {
        rank: fine,
        coarse_rank: coarse,
        resolution: 2 * resolution,
        converged: coarse == fine,
        singular_values_above: above,
    })
}

/// Max-norm ε-rank of the sampled kernel at one resolution.
pub fn sampled_rank(kernel: &RankKernel, eps: f64, resolution: usize) -> Result<usize> {
    Ok(sampled_rank_with_count(kernel, eps, resolution)?.0)
}

fn sampled_rank_with_count(kernel: &RankKernel, eps: f64, resolution: usize) -> Result<(usize, usize)> {
    match *kernel {
        RankKernel::Bessel { order, a, b, radius } => {
            bessel_width(a, b, radius)?;
            let rho: Vec<f64> = (0..resolution)
                .map(|i| a + (b - a) * i as f64 / (resolution - 1) as f64)
                .collect();
            let r: Vec<f64> = (0..resolution)
                .map(|j| radius * j as f64 / (resolution - 1) as f64)
                .collect();
            for &x in [a * radius, b * radius].iter() {
                check_envelope(order, x)?;
            }
            let mut vals = Vec::with_capacity(resolution * resolution);
            for &rj in &r {
                for &ri in &rho {
                    vals.push(C64::new(bessel_j(order, ri * rj)?, 0.0));
                }
            }
            let m = DenseMatrix::from_column_major(resolution, resolution, vals)?;
            let svd = thin_svd(&m)?;
            let above = svd.s.iter().filter(|&&s| s > eps).count();
            Ok((matrix_rank_from_svd(&m, &svd, eps), above))
        }
        RankKernel::Fourier { freq, space } => {
            freq.validate()?;
            space.validate()?;
            let blocks = PolarBlocks::new(&freq.radial_nodes(resolution), &space.radial_nodes(resolution), resolution)?;
            let above = blocks.sigma.iter().filter(|t| t.0 > eps).count();
            Ok((blocks.eps_rank(eps), above))
        }
    }
}

/// Max-norm ε-rank of an arbitrary sampled kernel matrix.
pub fn matrix_eps_rank(a: &DenseMatrix, eps: f64) -> Result<usize> {
    check_eps(eps)?;
    let svd = thin_svd(a)?;
    Ok(matrix_rank_from_svd(a, &svd, eps))
}

fn matrix_rank_from_svd(a: &DenseMatrix, svd: &crate::matrix::ThinSvd, eps: f64) -> usize {
    // No entry exceeds the spectral norm of the residual, so keeping every
    // singular value above ε always suffices.
    let hi = svd.s.iter().filter(|&&s| s > eps).count();
    let err = |r: usize| -> f64 {
        let mut worst = 0.0f64;
        for j in 0..a.cols() {
            for i in 0..a.rows() {
                let mut v = a.get(i, j);
                for s in 0..r {
                    v -= svd.u.get(i, s) * svd.s[s] * svd.v.get(j, s).conj();
                }
                worst = worst.max(v.norm());
            }
        }
        worst
    };
    smallest_passing(0, hi, eps, err)
}

/// Smallest `r ∈ [lo, hi]` with `err(r) ≤ eps`, treating `err` as
/// nonincreasing; falls back to scanning past `hi` when rounding makes the
/// top end fail.
fn smallest_passing(lo: usize, hi: usize, eps: f64, err: impl Fn(usize) -> f64) -> usize {
    let mut hi = hi;
    while err(hi) > eps {
        hi += 1;
    }
    let mut lo = lo.min(hi);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if err(mid) <= eps {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

/// Angular-frequency blocks of `e^{iρr cos(α − θ)}` on polar tensor grids.
struct PolarBlocks {
    rho: Vec<f64>,
    r: Vec<f64>,
    angles: usize,
    /// Singular triplets above the pruning level for blocks `0..=N/2`.
    u: Vec<DenseMatrix>,
    v: Vec<DenseMatrix>,
    s: Vec<Vec<f64>>,
    /// `(σ, angular frequency, index)` of every kept triplet of the full
    /// operator, descending; block `k` and `N − k` share one SVD.
    sigma: Vec<(f64, usize, usize)>,
    /// Largest discarded singular value below which triplets were pruned.
    floor: f64,
}

impl PolarBlocks {
    fn new(rho: &[f64], r: &[f64], angles: usize) -> Result<Self> {
        let (nw, nx) = (rho.len(), r.len());
        let half = angles / 2;
        let mut planner = FftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(angles);
        // ĝ[i][j][k] = Σ_d e^{iρ_i r_j cos(2πd/N)} e^{−2πikd/N}, kept for k ≤ N/2;
        // the kernel is even in d so ĝ is even in k.
        let rows: Vec<Vec<C64>> = map_range(Execution::Parallel, nw, |i| {
            let mut out = vec![C64::new(0.0, 0.0); nx * (half + 1)];
            let mut buf = vec![C64::new(0.0, 0.0); angles];
            for j in 0..nx {
                for (d, b) in buf.iter_mut().enumerate() {
                    *b = C64::from_polar(1.0, rho[i] * r[j] * (2.0 * PI * d as f64 / angles as f64).cos());
                }
                fft.process(&mut buf);
                for k in 0..=half {
                    out[j * (half + 1) + k] = buf[k];
                }
            }
            out
        });
        // Singular values of the full operator are σ(ĝ_k) with unit angular
        // vectors, so no rescaling is needed.
        let svds = try_map_range(Execution::Parallel, half + 1, |k| {
            let block = DenseMatrix::from_fn(nw, nx, |i, j| rows[i][j * (half + 1) + k]);
            thin_svd(&block)
        })?;
        drop(rows);
        let prune = 1e-14 * svds.iter().filter_map(|s| s.s.first().copied()).fold(0.0, f64::max);
        let mut sigma = Vec::new();
        let (mut u, mut v, mut s) = (Vec::new(), Vec::new(), Vec::new());
        let mut floor = 0.0f64;
        for (k, svd) in svds.into_iter().enumerate() {
            let keep = svd.s.iter().filter(|&&x| x > prune).count();
            floor = floor.max(svd.s.get(keep).copied().unwrap_or(0.0));
            let mult = if k == 0 || 2 * k == angles { 1 } else { 2 };
            for (idx, &x) in svd.s.iter().take(keep).enumerate() {
                for _ in 0..mult {
                    sigma.push((x, k, idx));
                }
            }
            u.push(DenseMatrix::from_column_major(nw, keep, svd.u.data()[..nw * keep].to_vec())?);
            v.push(DenseMatrix::from_column_major(nx, keep, svd.v.data()[..nx * keep].to_vec())?);
            s.push(svd.s[..keep].to_vec());
        }
        sigma.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        Ok(Self {
            rho: rho.to_vec(),
            r: r.to_vec(),
            angles,
            u,
            v,
            s,
            sigma,
            floor,
        })
    }

    /// Number of leading triplets kept per angular frequency `0..N` at total rank `r`.
    fn counts(&self, r: usize) -> Vec<usize> {
        let n = self.angles;
        let mut counts = vec![0usize; n];
        let mut seen = vec![0usize; (n / 2) + 1];
        for &(_, k, _) in self.sigma.iter().take(r) {
            // Duplicated triplets go first to k, then to N − k.
            if seen[k] % 2 == 0 || k == 0 || 2 * k == n {
                counts[k] += 1;
            } else {
                counts[n - k] += 1;
            }
            seen[k] += 1;
        }
        counts
    }

    fn max_error(&self, r: usize) -> f64 {
        let n = self.angles;
        let half = n / 2;
        let counts = self.counts(r);
        let mut planner = FftPlanner::<f64>::new();
        let ifft = planner.plan_fft_inverse(n);
        let per_row = map_range(Execution::Parallel, self.rho.len(), |i| {
            let mut buf = vec![C64::new(0.0, 0.0); n];
            let mut worst = 0.0f64;
            for j in 0..self.r.len() {
                for (k, b) in buf.iter_mut().enumerate() {
                    let kk = if k <= half { k } else { n - k };
                    let mut acc = C64::new(0.0, 0.0);
                    for s in 0..counts[k] {
                        acc += self.u[kk].get(i, s) * self.s[kk][s] * self.v[kk].get(j, s).conj();
                    }
                    *b = acc;
                }
                ifft.process(&mut buf);
                for (d, b) in buf.iter().enumerate() {
                    let exact = C64::from_polar(
                        1.0,
                        self.rho[i] * self.r[j] * (2.0 * PI * d as f64 / n as f64).cos(),
                    );
                    worst = worst.max((exact - b / n as f64).norm());
                }
            }
            worst
        });
        per_row.into_iter().fold(self.floor, f64::max)
    }

    fn eps_rank(&self, eps: f64) -> usize {
        let hi = self.sigma.iter().filter(|t| t.0 > eps).count();
        // Some entry of the residual is at least σ_max/√(#entries).
        let size = (self.rho.len() * self.r.len()) as f64 * (self.angles * self.angles) as f64;
        let lo = self.sigma.iter().filter(|t| t.0 > eps * size.sqrt()).count();
        smallest_passing(lo, hi, eps, |r| self.max_error(r))
    }
}

/// Bound and empirical rank side by side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankBoundReport {
    pub kernel: String,
    pub a: f64,
    pub b: f64,
    pub radius: f64,
    pub eps: f64,
    /// `ξ` used by the Bessel-kernel bound.
    pub xi: Option<f64>,
    pub bound: f64,
    pub empirical: EpsRank,
    pub pass: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundKind {
    /// `ω ∈ B_b`, `x ∈ B_R`; `a` is ignored.
    Disk,
    /// `a ≤ |ω| ≤ b`, `x ∈ B_R`.
    Annulus,
    /// `J_k(ρr)`, `a ≤ ρ ≤ b`, `0 ≤ r ≤ R`, bound minimized over `ξ`.
    Bessel { order: usize },
}

pub fn rank_bound_report(
    kind: BoundKind,
    a: f64,
    b: f64,
    radius: f64,
    eps: f64,
    resolution: usize,
) -> Result<RankBoundReport> {
    let space = KernelDomain::Disk { radius };
    let (name, kernel, bound, xi) = match kind {
        BoundKind::Disk => (
            "disk".to_string(),
            RankKernel::Fourier {
                freq: KernelDomain::Disk { radius: b },
                space,
            },
            bound_disk_rank(b, radius, eps)?,
            None,
        ),
        BoundKind::Annulus => (
            "annulus".to_string(),
            RankKernel::Fourier {
                freq: KernelDomain::Annulus { inner: a, outer: b },
                space,
            },
            bound_annulus_rank(b, radius, eps)?,
            None,
        ),
        BoundKind::Bessel { order } => {
            let (bound, xi) = bound_bessel_rank_min(a, b, radius, eps)?;
            (
                format!("bessel{order}"),
                RankKernel::Bessel { order, a, b, radius },
                bound,
                Some(xi),
            )
        }
    };
    let empirical = empirical_eps_rank(&kernel, eps, resolution)?;
    let pass = empirical.rank as f64 <= bound;
    Ok(RankBoundReport {
        kernel: name,
        a,
        b,
        radius,
        eps,
        xi,
        bound,
        empirical,
        pass,
    })
}

/// One torus factorization in a memory-scaling sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub m: usize,
    pub depth: usize,
    pub stored_entries: usize,
    pub max_rank: usize,
    pub peak_bytes: usize,
    pub seconds: f64,
}

/// `⌈n / ratio⌉`.
pub fn m_ratio(n: usize, ratio: usize) -> usize {
    n.div_ceil(ratio)
}

/// Streams a torus factorization for every grid size in `sizes` and records
/// the stored entries. Each `n` must be a perfect square; `m_rule` maps `n`
/// to the number of eigenfunctions.
pub fn complexity_sweep(
    sizes: &[usize],
    m_rule: impl Fn(usize) -> usize,
    eps: f64,
    exec: Execution,
) -> Result<Vec<SweepRow>> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput("sweep sizes must be strictly ascending".into()));
    }
    sizes
        .iter()
        .map(|&n| {
            let side = (n as f64).sqrt().round() as usize;
            if side * side != n || n == 0 {
                return Err(Error::InvalidInput(format!("{n} is not a square grid size")));
            }
            let m = m_rule(n);
            let start = Instant::now();
            let grid = PointCloud::torus_grid(side);
            let basis = torus_basis(m);
            let depth = default_depth(n, 4, m, 4);
            let space = build_quadtree(&grid, depth)?;
            let freq = build_frequency_tree(basis.eigenvalues(), 4, depth)?;
            let mut provider = torus_provider(&basis, &grid)?.with_execution(exec);
            let opts = ButterflyOptions::new(eps).with_execution(exec).with_spill(true);
            let mut sink = CountingSink::new(depth);
            let stats = stream_into(&mut provider, &space, &freq, &opts, &mut sink)?;
            Ok(SweepRow {
                n,
                m,
                depth,
                stored_entries: stats.stored_entries,
                max_rank: stats.ranks.iter().flatten().copied().max().unwrap_or(0),
                peak_bytes: stats.peak_bytes,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::InvalidInput("slope fit needs two or more positive points".into()));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidInput("slope fit needs distinct x values".into()));
    }
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Ok(sxy / sxx)
}

/// Slope of stored entries against `n`.
pub fn sweep_slope(rows: &[SweepRow]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.n as f64, r.stored_entries as f64))
        .collect();
    loglog_slope(&pts)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut w: W) -> Result<()> {
    writeln!(w, "n,m,depth,stored_entries,max_rank,peak_bytes,seconds")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{:.3}",
            r.n, r.m, r.depth, r.stored_entries, r.max_rank, r.peak_bytes, r.seconds
        )?;
    }
    Ok(())
}
