//! Rectangle probabilities and equicoordinate quantiles of the multivariate
//! normal and multivariate t distributions.
//!
//! Probabilities use the separation-of-variables transform of Genz with the
//! usual variable prioritisation, integrated by a randomized rank-1 lattice
//! (Richtmyer generators, baker's periodisation, antithetic pairs). The
//! sample size is doubled until three standard errors over the random
//! shifts fall below the target. The multivariate t case adds one coordinate
//! for the chi scale variable.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::{erfc, erfc_inv};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-8;
const EIGEN_FLOOR: f64 = 1e-10;
const SHIFTS: usize = 12;
const INITIAL_POINTS: usize = 32;
const ERROR_FACTOR: f64 = 3.0;

/// Symmetric, unit-diagonal, positive semi-definite matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn new(dim: usize, mut entries: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidCorrelation("dimension must be at least 1".into()));
        }
        if entries.len() != dim * dim {
            return Err(Error::InvalidCorrelation(format!(
                "{} entries for dimension {dim}",
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCorrelation("non-finite entry".into()));
        }
        for i in 0..dim {
            if (entries[i * dim + i] - 1.0).abs() > SYMMETRY_TOL {
                return Err(Error::InvalidCorrelation(format!(
                    "diagonal entry {i} is {}",
                    entries[i * dim + i]
                )));
            }
            entries[i * dim + i] = 1.0;
            for j in 0..i {
                let (u, l) = (entries[j * dim + i], entries[i * dim + j]);
                if (u - l).abs() > SYMMETRY_TOL {
                    return Err(Error::InvalidCorrelation(format!(
                        "entries ({i},{j}) and ({j},{i}) differ"
                    )));
                }
                let v = 0.5 * (u + l);
                if v.abs() > 1.0 + SYMMETRY_TOL {
                    return Err(Error::InvalidCorrelation(format!(
                        "entry ({i},{j}) = {v} outside [-1, 1]"
                    )));
                }
                let v = v.clamp(-1.0, 1.0);
                entries[j * dim + i] = v;
                entries[i * dim + j] = v;
            }
        }
        let m = Self { dim, entries };
        let min_eig = m.min_eigenvalue();
        if min_eig < -PSD_TOL {
            return Err(Error::NotPsd {
                min_eigenvalue: min_eig,
            });
        }
        Ok(m)
    }

    pub fn identity(dim: usize) -> Self {
        let mut entries = vec![0.0; dim * dim];
        for i in 0..dim {
            entries[i * dim + i] = 1.0;
        }
        Self { dim, entries }
    }

    /// All off-diagonal entries equal to `rho`.
    pub fn equicorrelated(dim: usize, rho: f64) -> Result<Self> {
        let mut entries = vec![rho; dim * dim];
        for i in 0..dim {
            entries[i * dim + i] = 1.0;
        }
        Self::new(dim, entries)
    }

    /// `diag(S)^{-1/2} S diag(S)^{-1/2}` of a covariance matrix `S`.
    pub fn from_covariance(dim: usize, cov: &[f64]) -> Result<Self> {
        if cov.len() != dim * dim {
            return Err(Error::InvalidCorrelation(format!(
                "{} entries for dimension {dim}",
                cov.len()
            )));
        }
        let sd: Vec<f64> = (0..dim).map(|i| cov[i * dim + i].sqrt()).collect();
        if let Some(i) = sd.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidCorrelation(format!(
                "variance {i} is {}",
                cov[i * dim + i]
            )));
        }
        let mut entries = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                entries[i * dim + j] = if i == j {
                    1.0
                } else {
                    let v = 0.5 * (cov[i * dim + j] + cov[j * dim + i]) / (sd[i] * sd[j]);
                    v.clamp(-1.0, 1.0)
                };
            }
        }
        Self::new(dim, entries)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }

    pub fn submatrix(&self, keep: &[usize]) -> Self {
        let d = keep.len();
        let mut entries = Vec::with_capacity(d * d);
        for &i in keep {
            for &j in keep {
                entries.push(self.get(i, j));
            }
        }
        Self { dim: d, entries }
    }

    /// `D C D` for the diagonal sign matrix `D = diag(signs)`.
    pub fn sign_flipped(&self, signs: &[bool]) -> Self {
        let mut out = self.clone();
        for i in 0..self.dim {
            for j in 0..self.dim {
                if signs[i] != signs[j] {
                    out.entries[i * self.dim + j] = -self.get(i, j);
                }
            }
        }
        out
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigen().eigenvalues.min()
    }

    fn eigen(&self) -> SymmetricEigen<f64, nalgebra::Dyn> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.entries).symmetric_eigen()
    }

    /// Eigenvalues below the floor are raised to it and the result rescaled
    /// to unit diagonal, so exactly collinear statistics stay factorable.
    fn regularized(&self) -> Vec<f64> {
        let eig = self.eigen();
        if eig.eigenvalues.min() >= EIGEN_FLOOR {
            return self.entries.clone();
        }
        let clipped = eig.eigenvalues.map(|v| v.max(EIGEN_FLOOR));
        let m = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        let d = self.dim;
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = m[(i, j)] / (m[(i, i)] * m[(j, j)]).sqrt();
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSettings {
    pub target_abs_error: f64,
    /// Cap on integrand evaluations (counting antithetic pairs once).
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for QuadratureSettings {
    fn default() -> Self {
        Self {
            target_abs_error: 5e-5,
            max_samples: 1 << 18,
            seed: 20_210_701,
        }
    }
}

impl QuadratureSettings {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_target(mut self, target_abs_error: f64) -> Self {
        self.target_abs_error = target_abs_error;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.target_abs_error > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "target_abs_error must be positive, got {}",
                self.target_abs_error
            )));
        }
        Ok(())
    }
}

/// Probability estimate with its error bound (three standard errors over
/// the random shifts; zero for closed-form cases).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectProb {
    pub value: f64,
    pub error: f64,
    pub samples: usize,
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Upper tail `1 - Phi(x)` without cancellation.
pub fn std_normal_sf(x: f64) -> f64 {
    0.5 * erfc(x * std::f64::consts::FRAC_1_SQRT_2)
}

pub fn std_normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn student(df: u32) -> StudentsT {
    StudentsT::new(0.0, 1.0, df as f64).expect("positive degrees of freedom")
}

/// Marginal CDF of the reference distribution: normal, or Student t with `df`.
pub fn marginal_cdf(x: f64, df: Option<u32>) -> f64 {
    match df {
        None => std_normal_cdf(x),
        Some(nu) => {
            if x == f64::INFINITY {
                1.0
            } else if x == f64::NEG_INFINITY {
                0.0
            } else {
                student(nu).cdf(x)
            }
        }
    }
}

/// Marginal upper tail `P(X > x)`.
pub fn marginal_sf(x: f64, df: Option<u32>) -> f64 {
    match df {
        None => std_normal_sf(x),
        Some(_) => marginal_cdf(-x, df),
    }
}

pub fn marginal_quantile(p: f64, df: Option<u32>) -> f64 {
    match df {
        None => std_normal_quantile(p),
        Some(nu) => {
            if p <= 0.0 {
                f64::NEG_INFINITY
            } else if p >= 1.0 {
                f64::INFINITY
            } else {
                student(nu).inverse_cdf(p)
            }
        }
    }
}

/// Quantile of `sqrt(chi2_nu / nu)`.
#[cfg(test)]
fn chi_scale(u: f64, nu: u32) -> f64 {
    (chi2_quantile(u, nu) / nu as f64).sqrt()
}

/// Quantile of the chi-square distribution with `nu` degrees of freedom.
fn chi2_quantile(u: f64, nu: u32) -> f64 {
    let nu_f = nu as f64;
    let a = 0.5 * nu_f;
    let u = u.clamp(1e-15, 1.0 - 1e-15);
    // Wilson-Hilferty start, then safeguarded Newton on P(a, x/2) = u.
    let h = 2.0 / (9.0 * nu_f);
    let z = std_normal_quantile(u);
    let mut x = nu_f * (1.0 - h + z * h.sqrt()).powi(3);
    let ln_gamma_a = ln_gamma(a);
    if !(x > 0.0) || nu < 3 {
        let small = 2.0 * ((u.ln() + a.ln() + ln_gamma_a) / a).exp();
        if !(x > 0.0) || small < x {
            x = small;
        }
    }
    let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
    for _ in 0..60 {
        let f = gamma_lr(a, 0.5 * x) - u;
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let dens = ((a - 1.0) * (0.5 * x).ln() - 0.5 * x - ln_gamma_a).exp() * 0.5;
        let mut next = x - f / dens;
        if !next.is_finite() || next <= lo || next >= hi {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * x };
        }
        let done = (next - x).abs() <= 1e-13 * x;
        x = next;
        if done {
            break;
        }
    }
    x
}

/// Cubic Hermite table of `ln chi2_quantile(Phi(z), nu)` on a normal-score
/// grid, so the integrand avoids incomplete gamma inversions.
struct ChiTable {
    ln_nu: f64,
    ln_x: Vec<f64>,
    slope: Vec<f64>,
}

const CHI_Z_MAX: f64 = 8.5;
const CHI_NODES: usize = 2049;

impl ChiTable {
    fn step() -> f64 {
        2.0 * CHI_Z_MAX / (CHI_NODES - 1) as f64
    }

    fn build(nu: u32) -> Self {
        let a = 0.5 * nu as f64;
        let ln_gamma_a = ln_gamma(a);
        let mut ln_x = Vec::with_capacity(CHI_NODES);
        let mut slope = Vec::with_capacity(CHI_NODES);
        for k in 0..CHI_NODES {
            let z = -CHI_Z_MAX + k as f64 * Self::step();
            let u = if z > 0.0 { 1.0 - std_normal_sf(z) } else { std_normal_cdf(z) };
            let x = chi2_quantile(u, nu);
            // d ln x / dz = phi(z) / (f(x) x) with f the chi-square density
            let ln_f = (a - 1.0) * (0.5 * x).ln() - 0.5 * x - ln_gamma_a - std::f64::consts::LN_2;
            let ln_phi = -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln();
            ln_x.push(x.ln());
            slope.push((ln_phi - ln_f - x.ln()).exp());
        }
        ChiTable {
            ln_nu: (nu as f64).ln(),
            ln_x,
            slope,
        }
    }

    fn scale(&self, u: f64) -> f64 {
        let h = Self::step();
        let z = std_normal_quantile(u).clamp(-CHI_Z_MAX, CHI_Z_MAX);
        let pos = (z + CHI_Z_MAX) / h;
        let i = (pos.floor() as usize).min(CHI_NODES - 2);
        let t = pos - i as f64;
        let (t2, t3) = (t * t, t * t * t);
        let v = (2.0 * t3 - 3.0 * t2 + 1.0) * self.ln_x[i]
            + (t3 - 2.0 * t2 + t) * h * self.slope[i]
            + (-2.0 * t3 + 3.0 * t2) * self.ln_x[i + 1]
            + (t3 - t2) * h * self.slope[i + 1];
        (0.5 * (v - self.ln_nu)).exp()
    }

    fn cached(nu: u32) -> Arc<ChiTable> {
        static CACHE: OnceLock<Mutex<HashMap<u32, Arc<ChiTable>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        if let Some(t) = cache.lock().expect("chi table cache").get(&nu) {
            return Arc::clone(t);
        }
        let table = Arc::new(ChiTable::build(nu));
        cache
            .lock()
            .expect("chi table cache")
            .entry(nu)
            .or_insert(table)
            .clone()
    }
}

const PRIMES: [f64; 40] = [
    2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0, 23.0, 29.0, 31.0, 37.0, 41.0, 43.0, 47.0, 53.0,
    59.0, 61.0, 67.0, 71.0, 73.0, 79.0, 83.0, 89.0, 97.0, 101.0, 103.0, 107.0, 109.0, 113.0,
    127.0, 131.0, 137.0, 139.0, 149.0, 151.0, 157.0, 163.0, 167.0, 173.0,
];

/// Reordered bounds and Cholesky factor ready for integration.
struct Kernel {
    dim: usize,
    chol: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    df: Option<u32>,
    chi: Option<Arc<ChiTable>>,
}

impl Kernel {
    fn new(cov: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>, df: Option<u32>) -> Self {
        let d = lower.len();
        let mut cov = cov;
        let mut a = lower;
        let mut b = upper;
        let mut l = vec![0.0; d * d];
        let mut y = vec![0.0; d];
        for i in 0..d {
            // Prioritise the variable with the smallest conditional probability.
            let mut best = i;
            let mut best_p = f64::INFINITY;
            for j in i..d {
                let mut s = 0.0;
                let mut var = cov[j * d + j];
                for k in 0..i {
                    s += l[j * d + k] * y[k];
                    var -= l[j * d + k] * l[j * d + k];
                }
                let sd = var.max(0.0).sqrt();
                let p = if sd > 0.0 {
                    std_normal_cdf((b[j] - s) / sd) - std_normal_cdf((a[j] - s) / sd)
                } else {
                    1.0
                };
                if p < best_p {
                    best_p = p;
                    best = j;
                }
            }
            if best != i {
                a.swap(i, best);
                b.swap(i, best);
                for k in 0..d {
                    cov.swap(i * d + k, best * d + k);
                }
                for k in 0..d {
                    cov.swap(k * d + i, k * d + best);
                }
                for k in 0..i {
                    l.swap(i * d + k, best * d + k);
                }
            }
            let mut diag = cov[i * d + i];
            for k in 0..i {
                diag -= l[i * d + k] * l[i * d + k];
            }
            let diag = diag.max(0.0).sqrt().max(1e-300);
            l[i * d + i] = diag;
            for j in (i + 1)..d {
                let mut v = cov[j * d + i];
                for k in 0..i {
                    v -= l[j * d + k] * l[i * d + k];
                }
                l[j * d + i] = v / diag;
            }
            let mut s = 0.0;
            for k in 0..i {
                s += l[i * d + k] * y[k];
            }
            let lo = (a[i] - s) / diag;
            let hi = (b[i] - s) / diag;
            let mass = std_normal_cdf(hi) - std_normal_cdf(lo);
            y[i] = if mass > 1e-300 {
                (std_normal_pdf(lo) - std_normal_pdf(hi)) / mass
            } else if lo.is_finite() {
                lo
            } else if hi.is_finite() {
                hi
            } else {
                0.0
            };
        }
        Self {
            dim: d,
            chol: l,
            lower: a,
            upper: b,
            df,
            chi: df.map(ChiTable::cached),
        }
    }

    fn qmc_dim(&self) -> usize {
        match self.df {
            None => self.dim - 1,
            Some(_) => self.dim,
        }
    }

    fn eval(&self, w: &[f64], y: &mut [f64]) -> f64 {
        let d = self.dim;
        let scale = match &self.chi {
            None => 1.0,
            Some(table) => table.scale(w[d - 1]),
        };
        let mut prod = 1.0;
        for i in 0..d {
            let mut s = 0.0;
            for k in 0..i {
                s += self.chol[i * d + k] * y[k];
            }
            let diag = self.chol[i * d + i];
            let lo = std_normal_cdf((self.lower[i] * scale - s) / diag);
            let hi = std_normal_cdf((self.upper[i] * scale - s) / diag);
            let mass = hi - lo;
            if mass <= 0.0 {
                return 0.0;
            }
            prod *= mass;
            if i + 1 < d {
                let q = (lo + w[i] * mass).clamp(1e-300, 1.0 - 1e-16);
                y[i] = std_normal_quantile(q);
            }
        }
        prod
    }
}

fn baker(x: f64) -> f64 {
    1.0 - (2.0 * x - 1.0).abs()
}

fn validate_bounds(corr: &CorrelationMatrix, lower: &[f64], upper: &[f64]) -> Result<()> {
    if lower.len() != corr.dim() || upper.len() != corr.dim() {
        return Err(Error::InvalidArgument(format!(
            "bounds of length {}/{} for dimension {}",
            lower.len(),
            upper.len(),
            corr.dim()
        )));
    }
    for (i, (a, b)) in lower.iter().zip(upper).enumerate() {
        if a.is_nan() || b.is_nan() || a >= b {
            return Err(Error::InvalidArgument(format!(
                "coordinate {i}: need lower < upper, got [{a}, {b}]"
            )));
        }
    }
    Ok(())
}

/// `P(lower <= X <= upper)` for `X ~ N(0, corr)` or, with `df`, the
/// multivariate t with that correlation. Deterministic for a fixed seed.
pub fn mv_rect_prob(
    corr: &CorrelationMatrix,
    lower: &[f64],
    upper: &[f64],
    df: Option<u32>,
    settings: &QuadratureSettings,
) -> Result<RectProb> {
    settings.validate()?;
    validate_bounds(corr, lower, upper)?;
    if df == Some(0) {
        return Err(Error::InvalidArgument("degrees of freedom must be positive".into()));
    }
    match prepare(corr, lower, upper, df) {
        Prepared::Exact(value) => Ok(RectProb {
            value,
            error: 0.0,
            samples: 0,
        }),
        Prepared::Kernel(kernel) => integrate(&kernel, settings),
    }
}

enum Prepared {
    Exact(f64),
    Kernel(Kernel),
}

/// Drops unbounded coordinates; one remaining coordinate is closed form.
fn prepare(corr: &CorrelationMatrix, lower: &[f64], upper: &[f64], df: Option<u32>) -> Prepared {
    let active: Vec<usize> = (0..corr.dim())
        .filter(|&i| lower[i].is_finite() || upper[i].is_finite())
        .collect();
    match active.len() {
        0 => return Prepared::Exact(1.0),
        1 => {
            let i = active[0];
            let value = match df {
                None if lower[i] > 0.0 => std_normal_sf(lower[i]) - std_normal_sf(upper[i]),
                _ => marginal_cdf(upper[i], df) - marginal_cdf(lower[i], df),
            };
            return Prepared::Exact(value);
        }
        _ => {}
    }
    let sub = if active.len() == corr.dim() {
        corr.clone()
    } else {
        corr.submatrix(&active)
    };
    Prepared::Kernel(Kernel::new(
        sub.regularized(),
        active.iter().map(|&i| lower[i]).collect(),
        active.iter().map(|&i| upper[i]).collect(),
        df,
    ))
}

fn integrate(kernel: &Kernel, settings: &QuadratureSettings) -> Result<RectProb> {
    integrate_until(kernel, settings, |_, _| false)
}

/// Integrates until the error target is met or `settled(value, error)` holds.
fn integrate_until(
    kernel: &Kernel,
    settings: &QuadratureSettings,
    settled: impl Fn(f64, f64) -> bool,
) -> Result<RectProb> {
    let m = kernel.qmc_dim();
    let gen: Vec<f64> = PRIMES
        .iter()
        .cycle()
        .take(m)
        .enumerate()
        .map(|(k, p)| {
            // beyond the table, reuse primes with an offset to keep generators distinct
            let p = p + (k / PRIMES.len()) as f64 * 1000.0;
            p.sqrt().fract()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let shifts: Vec<Vec<f64>> = (0..SHIFTS)
        .map(|_| (0..m).map(|_| rng.random::<f64>()).collect())
        .collect();

    let mut sums = [0.0_f64; SHIFTS];
    let mut w = vec![0.0; m];
    let mut wa = vec![0.0; m];
    let mut y = vec![0.0; kernel.dim];
    let mut done = 0usize;
    let mut target_n = INITIAL_POINTS;
    loop {
        for (s, shift) in shifts.iter().enumerate() {
            for k in done..target_n {
                let kf = (k + 1) as f64;
                for j in 0..m {
                    let x = baker((kf * gen[j] + shift[j]).fract());
                    w[j] = x;
                    wa[j] = 1.0 - x;
                }
                sums[s] += 0.5 * (kernel.eval(&w, &mut y) + kernel.eval(&wa, &mut y));
            }
        }
        done = target_n;
        let means: Vec<f64> = sums.iter().map(|s| s / done as f64).collect();
        let value = means.iter().sum::<f64>() / SHIFTS as f64;
        let var = means.iter().map(|v| (v - value).powi(2)).sum::<f64>()
            / (SHIFTS * (SHIFTS - 1)) as f64;
        let error = ERROR_FACTOR * var.sqrt();
        let samples = done * SHIFTS;
        if error <= settings.target_abs_error || settled(value, error) {
            return Ok(RectProb {
                value: value.clamp(0.0, 1.0),
                error,
                samples,
            });
        }
        if samples * 2 > settings.max_samples {
            return Err(Error::AccuracyNotReached {
                value: value.clamp(0.0, 1.0),
                error,
                target: settings.target_abs_error,
            });
        }
        target_n *= 2;
    }
}

/// Like [`mv_rect_prob`] but accepts a result that missed the accuracy
/// target, returning the best estimate.
pub fn mv_rect_prob_best_effort(
    corr: &CorrelationMatrix,
    lower: &[f64],
    upper: &[f64],
    df: Option<u32>,
    settings: &QuadratureSettings,
) -> Result<RectProb> {
    match mv_rect_prob(corr, lower, upper, df, settings) {
        Err(Error::AccuracyNotReached { value, error, .. }) => Ok(RectProb {
            value,
            error,
            samples: settings.max_samples,
        }),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tail {
    /// `P(-c <= X_r <= c for all r) = 1 - alpha`
    TwoSided,
    /// `P(X_r <= c for all r) = 1 - alpha`
    OneSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantile {
    pub value: f64,
    /// Quadrature error of the probability at the returned point.
    pub error: f64,
}

const QUANTILE_TOL: f64 = 1e-5;

/// Probability that every coordinate lies within the equicoordinate bound `c`.
pub fn equicoordinate_prob(
    corr: &CorrelationMatrix,
    c: f64,
    tail: Tail,
    df: Option<u32>,
    settings: &QuadratureSettings,
) -> Result<RectProb> {
    let d = corr.dim();
    let upper = vec![c; d];
    let lower = match tail {
        Tail::TwoSided => vec![-c; d],
        Tail::OneSided => vec![f64::NEG_INFINITY; d],
    };
    mv_rect_prob_best_effort(corr, &lower, &upper, df, settings)
}

/// Whether `1 - P(all coordinates within c) < alpha`. Integration stops as
/// soon as the error bound separates the probability from `1 - alpha`, which
/// makes clear-cut decisions much cheaper than a full-accuracy evaluation.
pub fn exceedance_below(
    corr: &CorrelationMatrix,
    c: f64,
    tail: Tail,
    df: Option<u32>,
    alpha: f64,
    settings: &QuadratureSettings,
) -> Result<bool> {
    settings.validate()?;
    if df == Some(0) {
        return Err(Error::InvalidArgument("degrees of freedom must be positive".into()));
    }
    if tail == Tail::TwoSided && c <= 0.0 {
        return Ok(false);
    }
    let d = corr.dim();
    let upper = vec![c; d];
    let lower = match tail {
        Tail::TwoSided => vec![-c; d],
        Tail::OneSided => vec![f64::NEG_INFINITY; d],
    };
    let target = 1.0 - alpha;
    let value = match prepare(corr, &lower, &upper, df) {
        Prepared::Exact(v) => v,
        Prepared::Kernel(kernel) => {
            match integrate_until(&kernel, settings, |v, e| (v - target).abs() > e) {
                Ok(p) => p.value,
                Err(Error::AccuracyNotReached { value, .. }) => value,
                Err(e) => return Err(e),
            }
        }
    };
    Ok(value > target)
}

/// Common critical value `c` with `P(all coordinates within c) = 1 - alpha`.
///
/// The root lies between the unadjusted and Bonferroni quantiles. It is
/// first located at a coarse accuracy, then refined at full accuracy inside
/// a narrow bracket around the coarse root.
pub fn equicoordinate_quantile(
    corr: &CorrelationMatrix,
    alpha: f64,
    tail: Tail,
    df: Option<u32>,
    settings: &QuadratureSettings,
) -> Result<Quantile> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must be in (0, 1), got {alpha}")));
    }
    settings.validate()?;
    let r = corr.dim() as f64;
    let (lo, hi) = match tail {
        Tail::TwoSided => (
            marginal_quantile(1.0 - alpha / 2.0, df),
            marginal_quantile(1.0 - alpha / (2.0 * r), df),
        ),
        Tail::OneSided => (
            marginal_quantile(1.0 - alpha, df),
            marginal_quantile(1.0 - alpha / r, df),
        ),
    };
    if corr.dim() == 1 {
        return Ok(Quantile {
            value: lo,
            error: 0.0,
        });
    }
    let target = 1.0 - alpha;
    let eval = |c: f64, s: &QuadratureSettings| -> Result<(f64, f64)> {
        let p = equicoordinate_prob(corr, c, tail, df, s)?;
        Ok((p.value - target, p.error))
    };

    let coarse = settings.with_target(settings.target_abs_error.max(COARSE_TARGET));
    let (mut lo_f, mut hi_f) = (lo, hi);
    if coarse.target_abs_error > settings.target_abs_error {
        let b = Bracket::new(lo, hi, &|c| eval(c, &coarse))?;
        if let Some(b) = b {
            let root = b.solve(&|c| eval(c, &coarse), COARSE_TARGET)?;
            let slope = root.slope.max(1e-3);
            let h = (3.0 * root.error.max(COARSE_TARGET) / slope).max(QUANTILE_TOL);
            lo_f = (root.value - h).max(lo);
            hi_f = (root.value + h).min(hi);
        }
    }
    // Widen toward the analytic bounds until the full-accuracy signs differ.
    let mut bracket = None;
    for _ in 0..4 {
        if let Some(b) = Bracket::new(lo_f, hi_f, &|c| eval(c, settings))? {
            bracket = Some(b);
            break;
        }
        let w = hi_f - lo_f;
        lo_f = (lo_f - w).max(lo);
        hi_f = (hi_f + w).min(hi);
    }
    let bracket = match bracket {
        Some(b) => b,
        None => {
            // the root sits on an analytic bound (perfect or zero dependence)
            let (f_lo, e_lo) = eval(lo, settings)?;
            if f_lo >= 0.0 {
                return Ok(Quantile { value: lo, error: e_lo });
            }
            let (f_hi, e_hi) = eval(hi, settings)?;
            if f_hi <= 0.0 {
                return Ok(Quantile { value: hi, error: e_hi });
            }
            Bracket { lo, hi, f_lo, f_hi, error: e_lo.max(e_hi) }
        }
    };
    let root = bracket.solve(&|c| eval(c, settings), QUANTILE_TOL)?;
    Ok(Quantile {
        value: root.value,
        error: root.error,
    })
}

/// Coarse accuracy used to locate the critical value before refinement.
const COARSE_TARGET: f64 = 1e-3;

struct Bracket {
    lo: f64,
    hi: f64,
    f_lo: f64,
    f_hi: f64,
    error: f64,
}

struct Root {
    value: f64,
    error: f64,
    /// Slope of `P(c)` across the final bracket.
    slope: f64,
}

impl Bracket {
    /// `None` when `f` does not change sign across `[lo, hi]`.
    fn new(lo: f64, hi: f64, f: &dyn Fn(f64) -> Result<(f64, f64)>) -> Result<Option<Self>> {
        let (f_lo, e_lo) = f(lo)?;
        if f_lo >= 0.0 {
            return Ok(None);
        }
        let (f_hi, e_hi) = f(hi)?;
        if f_hi <= 0.0 {
            return Ok(None);
        }
        Ok(Some(Bracket {
            lo,
            hi,
            f_lo,
            f_hi,
            error: e_lo.max(e_hi),
        }))
    }

    /// Illinois regula falsi; common random numbers keep `f` smooth and
    /// monotone in `c`.
    fn solve(mut self, f: &dyn Fn(f64) -> Result<(f64, f64)>, tol: f64) -> Result<Root> {
        let mut side = 0i8;
        let mut c = 0.5 * (self.lo + self.hi);
        let mut error = self.error;
        let mut slope = (self.f_hi - self.f_lo) / (self.hi - self.lo);
        let mut last = None;
        for _ in 0..100 {
            let next = (self.lo * self.f_hi - self.hi * self.f_lo) / (self.f_hi - self.f_lo);
            let next = if next.is_finite() && next > self.lo && next < self.hi {
                next
            } else {
                0.5 * (self.lo + self.hi)
            };
            let step = (next - c).abs();
            c = next;
            let (fc, e) = f(c)?;
            error = e;
            if let Some((c0, f0)) = last {
                if c != c0 {
                    slope = (fc - f0) / (c - c0);
                }
            }
            last = Some((c, fc));
            if fc == 0.0 {
                break;
            }
            if fc < 0.0 {
                self.lo = c;
                self.f_lo = fc;
                if side == -1 {
                    self.f_hi *= 0.5;
                }
                side = -1;
            } else {
                self.hi = c;
                self.f_hi = fc;
                if side == 1 {
                    self.f_lo *= 0.5;
                }
                side = 1;
            }
            if self.hi - self.lo <= tol || step <= 0.25 * tol {
                break;
            }
        }
        Ok(Root { value: c, error, slope })
    }
}
