//! Binomial sampling of group members and the mapping between the true and
//! the observed group-size distributions.
//!
//! Sizes are 1-based throughout: entry `i` of a size vector refers to size
//! `i + 1`. When every member of a true group of size `m` is observed
//! independently with probability `rho`, the observed size is
//! `Binomial(m, rho)`; groups with nobody observed drop out, so the observable
//! law is the binomial mixture conditioned on at least one member.

use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, Row};
use crate::rng::{ReplicationKey, StreamRole};

/// Smallest admissible sampling probability.
pub const RHO_MIN: f64 = 1e-6;

/// Negative entries above this are treated as round-off in a recovered `q`.
const NEGATIVE_TOLERANCE: f64 = 1e-8;

/// `C(n, k)` as a float; exact for the small sizes used here.
pub fn binomial_coefficient(n: u64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `P[Binomial(m, rho) = n]`.
#[inline]
pub fn thinning_probability(m: u64, n: u64, rho: f64) -> f64 {
    if n > m {
        return 0.0;
    }
    binomial_coefficient(m, n) * rho.powi(n as i32) * (1.0 - rho).powi((m - n) as i32)
}

/// Derivative of [`thinning_probability`] with respect to `rho`.
pub fn thinning_probability_drho(m: u64, n: u64, rho: f64) -> f64 {
    if n > m {
        return 0.0;
    }
    let c = binomial_coefficient(m, n);
    let (n_i, k_i) = (n as i32, (m - n) as i32);
    let a = if n == 0 { 0.0 } else { n as f64 * rho.powi(n_i - 1) * (1.0 - rho).powi(k_i) };
    let b = if m == n { 0.0 } else { (m - n) as f64 * rho.powi(n_i) * (1.0 - rho).powi(k_i - 1) };
    c * (a - b)
}

/// Distribution of the true group size over `1..=nbar`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSizeDistribution {
    q: Vec<f64>,
}

impl GroupSizeDistribution {
    /// `q[i]` is the probability of size `i + 1`. Requires `q[0] = 0`, a
    /// positive last entry and a total of one.
    pub fn new(q: Vec<f64>) -> Result<Self> {
        if q.len() < 2 {
            return Err(Error::param("size distribution needs support up to at least 2"));
        }
        if q[0] != 0.0 {
            return Err(Error::param(format!("P[size = 1] must be 0, got {}", q[0])));
        }
        if q.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::param("size probabilities must be finite and non-negative"));
        }
        if !(q[q.len() - 1] > 0.0) {
            return Err(Error::param("largest support point must have positive mass"));
        }
        let total: f64 = q.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::param(format!("size probabilities sum to {total}, not 1")));
        }
        Ok(Self { q })
    }

    /// `size - 2 ~ Binomial(nbar - 2, omega)`.
    pub fn binomial(nbar: u64, omega: f64) -> Result<Self> {
        if nbar < 2 {
            return Err(Error::param("nbar must be at least 2"));
        }
        if !(omega > 0.0 && omega <= 1.0) && nbar > 2 {
            return Err(Error::param(format!("omega must lie in (0, 1], got {omega}")));
        }
        Self::new(binomial_size_pmf(nbar, omega))
    }

    pub fn nbar(&self) -> u64 {
        self.q.len() as u64
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.q
    }

    /// Probability of true size `m`.
    pub fn prob(&self, m: u64) -> f64 {
        if m == 0 {
            return 0.0;
        }
        self.q.get(m as usize - 1).copied().unwrap_or(0.0)
    }

    pub fn mean(&self) -> f64 {
        self.q.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum()
    }

    /// Support points with positive mass.
    pub fn support(&self) -> Vec<u64> {
        (1..=self.nbar()).filter(|&m| self.prob(m) > 0.0).collect()
    }
}

/// Size pmf over `1..=nbar` with `size - 2 ~ Binomial(nbar - 2, omega)`; no validation.
pub fn binomial_size_pmf(nbar: u64, omega: f64) -> Vec<f64> {
    let trials = nbar.saturating_sub(2);
    (1..=nbar)
        .map(|m| if m < 2 { 0.0 } else { thinning_probability(trials, m - 2, omega) })
        .collect()
}

/// Per-individual inclusion probabilities `rho + U(-jitter, jitter)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingDesign {
    pub rho: f64,
    pub jitter: f64,
}

impl SamplingDesign {
    pub fn new(rho: f64, jitter: f64) -> Result<Self> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::param(format!("rho must lie in (0, 1], got {rho}")));
        }
        if !(jitter >= 0.0) {
            return Err(Error::param(format!("jitter must be non-negative, got {jitter}")));
        }
        if jitter > 0.0 && !(rho - jitter > 0.0 && rho + jitter <= 1.0) {
            return Err(Error::param(format!(
                "rho +/- jitter must stay inside (0, 1], got {rho} +/- {jitter}"
            )));
        }
        Ok(Self { rho, jitter })
    }

    pub fn complete() -> Self {
        Self { rho: 1.0, jitter: 0.0 }
    }
}

/// Keeps each row of `full` independently with probability `rho + U(-jitter, jitter)`.
///
/// The specified group of each kept row is its group in `full`; groups with
/// no kept member disappear. True group sizes are dropped unless
/// `keep_true_size` is set.
pub fn sample_observed(full: &Dataset, design: &SamplingDesign, seed: u64, keep_true_size: bool) -> Dataset {
    let mut rng = ReplicationKey::from_seed(seed).stream(StreamRole::Sampling);
    sample_observed_with(full, design, &mut rng, keep_true_size)
}

/// [`sample_observed`] with a caller-provided stream.
pub fn sample_observed_with<R: Rng>(full: &Dataset, design: &SamplingDesign, rng: &mut R, keep_true_size: bool) -> Dataset {
    let mut rows: Vec<Row> = Vec::with_capacity(full.len());
    for r in full.rows() {
        let keep = if design.rho >= 1.0 && design.jitter == 0.0 {
            true
        } else {
            let p = if design.jitter > 0.0 {
                design.rho + rng.random_range(-design.jitter..design.jitter)
            } else {
                design.rho
            };
            rng.random::<f64>() < p
        };
        if keep {
            let mut row = r.clone();
            if !keep_true_size {
                row.true_size = None;
            }
            rows.push(row);
        }
    }
    Dataset::new(rows).expect("a subset of a valid dataset is valid")
}

/// Upper-triangular matrix with `A[i][j] = P[Binomial(j, rho) = i]` (1-based).
pub fn mixing_matrix(nbar: u64, rho: f64) -> Result<DMatrix<f64>> {
    if nbar < 1 {
        return Err(Error::param("nbar must be positive"));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::param(format!("rho must lie in (0, 1], got {rho}")));
    }
    let n = nbar as usize;
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if i <= j {
            thinning_probability(j as u64 + 1, i as u64 + 1, rho)
        } else {
            0.0
        }
    }))
}

/// `T(n) = n (n + 1) / 2`; `det A(rho) = rho^T(nbar)`.
pub fn triangular_number(n: u64) -> u64 {
    n * (n + 1) / 2
}

/// Unnormalized observed-size masses `sum_m q_m P[Binomial(m, rho) = n]` for `n = 1..=nbar`.
fn thinned_masses(q: &[f64], rho: f64) -> Vec<f64> {
    let nbar = q.len() as u64;
    (1..=nbar)
        .map(|n| (n..=nbar).map(|m| q[m as usize - 1] * thinning_probability(m, n, rho)).sum())
        .collect()
}

/// Observed-size pmf for a raw probability vector `q`; the normalizer is the
/// probability that at least one member is observed.
pub(crate) fn observed_pmf_raw(q: &[f64], rho: f64) -> Result<Vec<f64>> {
    let masses = thinned_masses(q, rho);
    let total: f64 = masses.iter().sum();
    if !(total > 0.0) {
        return Err(Error::numerical("probability of observing a group is zero"));
    }
    Ok(masses.into_iter().map(|a| a / total).collect())
}

/// Distribution of the observed size `n_g` given `n_g >= 1`, over `1..=nbar`.
pub fn observed_size_pmf(d: &GroupSizeDistribution, rho: f64) -> Result<Vec<f64>> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::param(format!("rho must lie in (0, 1], got {rho}")));
    }
    observed_pmf_raw(d.probabilities(), rho)
}

/// Posterior weights over true sizes `n_obs..=nbar` for a raw `q`.
pub(crate) fn posterior_raw(q: &[f64], rho: f64, n_obs: u64) -> Result<Vec<f64>> {
    let nbar = q.len() as u64;
    let w: Vec<f64> = (n_obs..=nbar)
        .map(|m| q[m as usize - 1] * thinning_probability(m, n_obs, rho))
        .collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::data(format!(
            "observed size {n_obs} has zero probability under the size distribution"
        )));
    }
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// `P[n_g0 = m | n_g = n_obs]` for `m = n_obs..=nbar` (first entry is `m = n_obs`).
pub fn posterior_true_size(d: &GroupSizeDistribution, rho: f64, n_obs: u64) -> Result<Vec<f64>> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::param(format!("rho must lie in (0, 1], got {rho}")));
    }
    if n_obs < 1 || n_obs > d.nbar() {
        return Err(Error::param(format!("observed size {n_obs} outside 1..={}", d.nbar())));
    }
    posterior_raw(d.probabilities(), rho, n_obs)
}

/// Eigenvector `A(rho)^{-1} p` of `B(rho)` for eigenvalue one (unnormalized).
pub fn eigenvector(p: &[f64], rho: f64) -> Result<DVector<f64>> {
    let a = mixing_matrix(p.len() as u64, rho)?;
    a.solve_upper_triangular(&DVector::from_column_slice(p))
        .ok_or_else(|| Error::numerical("mixing matrix is singular"))
}

/// `B(rho) = A(rho)^{-1} p 1' A(rho)`, the rank-one matrix whose unit
/// eigenvector is the true size distribution.
pub fn eigensystem_matrix(p: &[f64], rho: f64) -> Result<DMatrix<f64>> {
    let a = mixing_matrix(p.len() as u64, rho)?;
    let v = eigenvector(p, rho)?;
    let row = DMatrix::from_element(1, p.len(), 1.0) * &a;
    Ok(v * row)
}

/// Eigenvalue moduli of [`eigensystem_matrix`], largest first.
pub fn eigensystem_spectrum(p: &[f64], rho: f64) -> Result<Vec<f64>> {
    let b = eigensystem_matrix(p, rho)?;
    let eig: Vec<Complex<f64>> = b.complex_eigenvalues().iter().copied().collect();
    let mut moduli: Vec<f64> = eig.iter().map(|z| z.norm()).collect();
    moduli.sort_by(|a, b| b.total_cmp(a));
    Ok(moduli)
}

/// `q(rho)`: the eigenvector normalized to sum to one. Entry 0 is `q_1(rho)`,
/// which vanishes at the true sampling probability.
pub fn candidate_distribution(p: &[f64], rho: f64) -> Result<Vec<f64>> {
    let v = eigenvector(p, rho)?;
    let total = v.sum();
    if total == 0.0 {
        return Err(Error::numerical("eigenvector sums to zero"));
    }
    Ok(v.iter().map(|x| x / total).collect())
}

/// Sign-equivalent of the first eigenvector entry, `rho * (A^{-1} p)_1`,
/// written as a polynomial in `t = (1 - rho) / rho` so it stays finite for
/// small `rho`.
fn singleton_polynomial(p: &[f64], rho: f64) -> f64 {
    let t = (1.0 - rho) / rho;
    // sum_j j p_j (-t)^(j-1), Horner from the top.
    p.iter()
        .enumerate()
        .rev()
        .fold(0.0, |acc, (i, &pj)| acc * (-t) + (i + 1) as f64 * pj)
}

/// Result of recovering `(rho, q)` from an observed-size pmf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deconvolution {
    pub rho: f64,
    pub q: GroupSizeDistribution,
}

/// Recovers the sampling probability and the true size distribution from the
/// observed-size pmf `p` over `1..=nbar`.
///
/// `nbar` is the largest size with positive observed mass (trailing zeros are
/// dropped). `rho` is the largest value in `(0, 1]` at which `q_1(rho) = 0`;
/// above it the candidate `q` puts positive mass on singletons.
pub fn deconvolve_exact(p: &[f64]) -> Result<Deconvolution> {
    let last = p
        .iter()
        .rposition(|&v| v > 0.0)
        .ok_or_else(|| Error::param("observed size pmf has no positive mass"))?;
    let p = &p[..=last];
    let (rho, q) = deconvolve_raw(p)?;
    if !(q[q.len() - 1] > 0.0) {
        return Err(Error::numerical("recovered distribution has no mass at the largest size"));
    }
    Ok(Deconvolution {
        rho,
        q: GroupSizeDistribution::new(q)?,
    })
}

/// Core of [`deconvolve_exact`]; tolerates trailing zeros in `p`, in which
/// case the recovered `q` has zero mass on those sizes.
pub(crate) fn deconvolve_raw(p: &[f64]) -> Result<(f64, Vec<f64>)> {
    if p.is_empty() || p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::param("observed size pmf must be finite and non-negative"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::param(format!("observed size pmf sums to {total}, not 1")));
    }
    let rho = find_sampling_rate(p)?;
    let mut q = candidate_distribution(p, rho)?;
    q[0] = 0.0;
    for v in q.iter_mut() {
        if *v < 0.0 {
            if *v < -NEGATIVE_TOLERANCE {
                return Err(Error::numerical(format!(
                    "recovered size distribution has a negative entry ({v:.3e}); input is not a thinned size law"
                )));
            }
            *v = 0.0;
        }
    }
    let s: f64 = q.iter().sum();
    if !(s > 0.0) {
        return Err(Error::numerical("recovered size distribution is empty"));
    }
    q.iter_mut().for_each(|v| *v /= s);
    Ok((rho, q))
}

const SCAN_POINTS: usize = 4000;
const ROOT_TOL: f64 = 1e-12;

/// Largest `rho` in `[RHO_MIN, 1]` where the singleton entry of the eigenvector vanishes.
pub(crate) fn find_sampling_rate(p: &[f64]) -> Result<f64> {
    if p[0] == 0.0 {
        return Ok(1.0);
    }
    let f = |rho: f64| singleton_polynomial(p, rho);
    let scale: f64 = p.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v).sum();
    // Positive just below 1 (it equals p_1 at rho = 1); walk down to the first sign change.
    let grid = |k: usize| 1.0 - (1.0 - RHO_MIN) * k as f64 / SCAN_POINTS as f64;
    let mut hi = 1.0;
    let mut f_hi = f(hi);
    let mut best = (f64::INFINITY, 1.0);
    for k in 1..=SCAN_POINTS {
        let lo = grid(k);
        let f_lo = f(lo);
        if f_lo == 0.0 {
            return Ok(lo);
        }
        if f_lo.signum() != f_hi.signum() {
            return Ok(bisect(&f, lo, hi, f_lo));
        }
        let rel = f_lo.abs() / (scale * ((1.0 - lo) / lo).max(1.0).powi(p.len() as i32 - 1));
        if rel < best.0 {
            best = (rel, lo);
        }
        hi = lo;
        f_hi = f_lo;
    }
    // A tangential root (q_2 = 0) never changes sign; accept a near-zero local minimum.
    let (rel, at) = best;
    if rel < 1e-6 {
        let step = (1.0 - RHO_MIN) / SCAN_POINTS as f64;
        let rho = golden_min(|r| f(r).abs(), (at - step).max(RHO_MIN), (at + step).min(1.0));
        let value = f(rho).abs() / scale;
        if value <= 1e-9 {
            return Ok(rho);
        }
    }
    Err(Error::numerical(
        "no sampling probability in (0, 1] makes singleton groups impossible; the input is not a thinned size law",
    ))
}

fn bisect(f: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, f_lo: f64) -> f64 {
    let s_lo = f_lo.signum();
    while hi - lo > ROOT_TOL {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if fm.signum() == s_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    while (b - a).abs() > ROOT_TOL {
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - g * (b - a);
        d = a + g * (b - a);
    }
    0.5 * (a + b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn random_q(nbar: usize, raw: &[f64]) -> Vec<f64> {
        let mut q = vec![0.0; nbar];
        for m in 2..=nbar {
            q[m - 1] = raw[m - 2] + 0.02;
        }
        let s: f64 = q.iter().sum();
        q.iter_mut().for_each(|v| *v /= s);
        q
    }

    #[test]
    fn mixing_matrix_examples() {
        let a = mixing_matrix(2, 0.5).unwrap();
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.0, 0.25]));
        assert_eq!(mixing_matrix(5, 1.0).unwrap(), DMatrix::identity(5, 5));
        assert_relative_eq!(mixing_matrix(3, 0.5).unwrap().determinant(), 0.015625, epsilon = 1e-15);
        assert!(mixing_matrix(3, 0.0).is_err());
    }

    #[test]
    fn mixing_matrix_columns_sum_to_nonzero_mass() {
        for &rho in &[0.1, 0.37, 0.9] {
            let a = mixing_matrix(7, rho).unwrap();
            for j in 0..7 {
                let col: f64 = a.column(j).sum();
                assert_relative_eq!(col, 1.0 - (1.0 - rho).powi(j as i32 + 1), epsilon = 1e-14);
            }
            assert_relative_eq!(a.determinant(), rho.powi(triangular_number(7) as i32), max_relative = 1e-10);
        }
    }

    #[test]
    fn observed_pmf_examples() {
        let d = GroupSizeDistribution::new(vec![0.0, 1.0]).unwrap();
        let p = observed_size_pmf(&d, 0.5).unwrap();
        assert_relative_eq!(p[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(p[1], 1.0 / 3.0, epsilon = 1e-15);

        let d = GroupSizeDistribution::new(vec![0.0, 0.5625, 0.375, 0.0625]).unwrap();
        assert_eq!(observed_size_pmf(&d, 1.0).unwrap(), d.probabilities());

        // exhaustive double sum over (m, n), normalized by the n >= 1 mass
        let rho: f64 = 0.3;
        let q = d.probabilities();
        let mut brute = vec![0.0; 4];
        let mut zero = 0.0;
        for m in 1..=4u64 {
            for n in 0..=m {
                let c = (1..=m).product::<u64>() as f64
                    / ((1..=n).product::<u64>() * (1..=m - n).product::<u64>()) as f64;
                let mass = q[m as usize - 1] * c * rho.powi(n as i32) * (1.0 - rho).powi((m - n) as i32);
                if n == 0 {
                    zero += mass;
                } else {
                    brute[n as usize - 1] += mass;
                }
            }
        }
        let p = observed_size_pmf(&d, rho).unwrap();
        for (a, b) in p.iter().zip(&brute) {
            assert_relative_eq!(*a, b / (1.0 - zero), epsilon = 1e-14);
        }
        assert_relative_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn posterior_examples() {
        let d = GroupSizeDistribution::new(vec![0.0, 0.5, 0.5]).unwrap();
        let post = posterior_true_size(&d, 0.5, 2).unwrap();
        assert_relative_eq!(post[0], 0.4, epsilon = 1e-15);
        assert_relative_eq!(post[1], 0.6, epsilon = 1e-15);
        assert_eq!(posterior_true_size(&d, 1.0, 2).unwrap(), vec![1.0, 0.0]);
        assert_eq!(posterior_true_size(&d, 0.3, 3).unwrap(), vec![1.0]);
        assert!(posterior_true_size(&d, 0.3, 4).is_err());
        let point = GroupSizeDistribution::new(vec![0.0, 0.0, 1.0]).unwrap();
        assert!(posterior_true_size(&point, 1.0, 2).is_err());
    }

    #[test]
    fn deconvolution_examples() {
        let d = deconvolve_exact(&[2.0 / 3.0, 1.0 / 3.0]).unwrap();
        assert_relative_eq!(d.rho, 0.5, epsilon = 1e-11);
        assert_relative_eq!(d.q.prob(2), 1.0, epsilon = 1e-11);

        let d = deconvolve_exact(&[0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(d.rho, 1.0);
        assert_eq!(d.q.probabilities(), &[0.0, 0.0, 0.0, 1.0]);

        // trailing zeros do not change the support bound
        let d = deconvolve_exact(&[2.0 / 3.0, 1.0 / 3.0, 0.0]).unwrap();
        assert_eq!(d.q.nbar(), 2);
    }

    #[test]
    fn deconvolution_handles_tangential_root() {
        // q point mass at 3: q_2 = 0 so the singleton entry touches zero without crossing
        let q = GroupSizeDistribution::new(vec![0.0, 0.0, 1.0]).unwrap();
        let p = observed_size_pmf(&q, 0.6).unwrap();
        let d = deconvolve_exact(&p).unwrap();
        assert!((d.rho - 0.6).abs() < 1e-6);
    }

    #[test]
    fn deconvolution_rejects_non_model_input() {
        // all mass on singletons cannot come from groups of size >= 2 with the support bound 2
        assert!(deconvolve_exact(&[0.9, 0.1, 0.0]).is_ok());
        assert!(deconvolve_exact(&[1.0]).is_err());
        assert!(deconvolve_exact(&[0.5, 0.2]).is_err());
    }

    #[test]
    fn binomial_size_law() {
        let d = GroupSizeDistribution::binomial(4, 0.25).unwrap();
        let q = d.probabilities();
        assert_relative_eq!(q[0], 0.0);
        assert_relative_eq!(q[1], 0.5625, epsilon = 1e-15);
        assert_relative_eq!(q[2], 0.375, epsilon = 1e-15);
        assert_relative_eq!(q[3], 0.0625, epsilon = 1e-15);
        assert_relative_eq!(d.mean(), 2.5, epsilon = 1e-15);
    }

    #[test]
    fn sampling_design_validation() {
        assert!(SamplingDesign::new(0.5, 0.1).is_ok());
        assert!(SamplingDesign::new(0.05, 0.1).is_err());
        assert!(SamplingDesign::new(0.95, 0.1).is_err());
        assert!(SamplingDesign::new(0.0, 0.0).is_err());
    }

    #[test]
    fn thinning_derivative_matches_differences() {
        for (m, n) in [(4u64, 1u64), (4, 4), (3, 2), (6, 0)] {
            for &rho in &[0.2, 0.55, 0.9] {
                let h = 1e-6;
                let fd = (thinning_probability(m, n, rho + h) - thinning_probability(m, n, rho - h)) / (2.0 * h);
                assert_relative_eq!(thinning_probability_drho(m, n, rho), fd, epsilon = 1e-7);
            }
        }
    }

    proptest! {
        #[test]
        fn deconvolution_round_trip(nbar in 2usize..=8, raw in proptest::collection::vec(0.0..1.0f64, 7), rho in 0.3..1.0f64) {
            let q = random_q(nbar, &raw);
            let d = GroupSizeDistribution::new(q.clone()).unwrap();
            let p = observed_size_pmf(&d, rho).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let rec = deconvolve_exact(&p).unwrap();
            prop_assert!((rec.rho - rho).abs() < 1e-8, "rho {} vs {}", rec.rho, rho);
            for (a, b) in rec.q.probabilities().iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-8);
            }
        }

        #[test]
        fn posterior_sums_to_one(nbar in 2usize..=8, raw in proptest::collection::vec(0.0..1.0f64, 7), rho in 0.05..1.0f64, n_obs in 1u64..=8) {
            let d = GroupSizeDistribution::new(random_q(nbar, &raw)).unwrap();
            prop_assume!(n_obs <= d.nbar());
            let post = posterior_true_size(&d, rho, n_obs).unwrap();
            prop_assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
