//! Likelihood of the observed group sizes and its maximizer.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::optim::{fd_jacobian, minimize, Bounds, Evaluation, Options};
use crate::sampling::{
    binomial_size_pmf, candidate_distribution, find_sampling_rate, thinning_probability,
    thinning_probability_drho, GroupSizeDistribution, RHO_MIN,
};

/// Observed group-size histogram; entry `n - 1` refers to size `n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SizeData {
    pub counts: Vec<u64>,
    /// Number of groups of each observed size known to be complete. When
    /// present, every group is classified as complete or incomplete.
    pub complete: Option<Vec<u64>>,
}

impl SizeData {
    pub fn new(counts: Vec<u64>) -> Self {
        Self { counts, complete: None }
    }

    pub fn groups(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn count(&self, n: usize) -> f64 {
        self.counts.get(n - 1).copied().unwrap_or(0) as f64
    }

    fn complete_count(&self, n: usize) -> f64 {
        self.complete
            .as_ref()
            .and_then(|c| c.get(n - 1).copied())
            .unwrap_or(0) as f64
    }
}

/// Log-likelihood with derivatives in `rho` and the raw probabilities `q`.
pub(crate) struct LogLik {
    pub value: f64,
    pub d_rho: f64,
    pub d_q: Vec<f64>,
}

pub(crate) fn loglik_raw(data: &SizeData, rho: f64, q: &[f64]) -> LogLik {
    let nbar = q.len();
    let infeasible = || LogLik {
        value: f64::NEG_INFINITY,
        d_rho: f64::NAN,
        d_q: vec![f64::NAN; nbar],
    };
    if data.counts.len() > nbar && data.counts[nbar..].iter().any(|&c| c > 0) {
        return infeasible();
    }
    let split = data.complete.is_some();
    let mut value = 0.0;
    let mut d_rho = 0.0;
    let mut d_q = vec![0.0; nbar];
    for n in 1..=nbar {
        let total = data.count(n);
        let comp = if split { data.complete_count(n) } else { 0.0 };
        let inc = total - comp;
        // Sizes strictly above n (or including n when completeness is not tracked).
        let first = if split { n + 1 } else { n };
        if inc > 0.0 {
            let mut v = 0.0;
            let mut dv = 0.0;
            for m in first..=nbar {
                v += q[m - 1] * thinning_probability(m as u64, n as u64, rho);
                dv += q[m - 1] * thinning_probability_drho(m as u64, n as u64, rho);
            }
            if !(v > 0.0) {
                return infeasible();
            }
            value += inc * v.ln();
            d_rho += inc * dv / v;
            for m in first..=nbar {
                d_q[m - 1] += inc * thinning_probability(m as u64, n as u64, rho) / v;
            }
        }
        if comp > 0.0 {
            let w = q[n - 1] * rho.powi(n as i32);
            if !(w > 0.0) {
                return infeasible();
            }
            value += comp * w.ln();
            d_rho += comp * n as f64 / rho;
            d_q[n - 1] += comp / q[n - 1];
        }
    }
    let groups = data.groups() as f64;
    let mut s = 0.0;
    let mut ds = 0.0;
    for m in 1..=nbar {
        s += q[m - 1] * (1.0 - (1.0 - rho).powi(m as i32));
        ds += q[m - 1] * m as f64 * (1.0 - rho).powi(m as i32 - 1);
    }
    if !(s > 0.0) {
        return infeasible();
    }
    value -= groups * s.ln();
    d_rho -= groups * ds / s;
    for (m, d) in d_q.iter_mut().enumerate() {
        *d -= groups * (1.0 - (1.0 - rho).powi(m as i32 + 1)) / s;
    }
    LogLik { value, d_rho, d_q }
}

/// `sum_n count(n) log P[n_g = n | n_g >= 1]`; `-inf` when an observed size
/// has zero probability.
pub fn size_loglik(counts: &[u64], rho: f64, q: &GroupSizeDistribution) -> f64 {
    loglik_raw(&SizeData::new(counts.to_vec()), rho, q.probabilities()).value
}

/// How the size distribution is parameterized in the likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeModel {
    /// Stick-breaking fractions `s_2..s_{nbar-1}` onto the simplex over `2..=nbar`.
    Nonparametric { nbar: u64 },
    /// `size - 2 ~ Binomial(nbar - 2, omega)`.
    Binomial { nbar: u64 },
}

impl SizeModel {
    pub fn nbar(&self) -> u64 {
        match *self {
            SizeModel::Nonparametric { nbar } | SizeModel::Binomial { nbar } => nbar,
        }
    }

    /// Number of parameters including `rho`.
    pub fn dim(&self) -> usize {
        match *self {
            SizeModel::Nonparametric { nbar } => nbar as usize - 1,
            SizeModel::Binomial { .. } => 2,
        }
    }

    fn bounds(&self) -> Bounds {
        let mut lo = vec![0.0; self.dim()];
        let hi = vec![1.0; self.dim()];
        lo[0] = RHO_MIN;
        Bounds::new(lo, hi)
    }

    /// Raw `q` and its Jacobian with respect to the non-`rho` parameters.
    pub(crate) fn q_and_jacobian(&self, theta: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let nbar = self.nbar() as usize;
        match *self {
            SizeModel::Nonparametric { .. } => {
                let s = &theta[1..];
                let mut q = vec![0.0; nbar];
                let mut jac = DMatrix::zeros(nbar, s.len());
                // q_j = s_j prod_{i<j} (1 - s_i) for j < nbar; q_nbar = prod_i (1 - s_i)
                for j in 2..=nbar {
                    let idx = j - 2;
                    let own = if idx < s.len() { s[idx] } else { 1.0 };
                    let prior: Vec<f64> = s[..idx.min(s.len())].iter().map(|v| 1.0 - v).collect();
                    q[j - 1] = own * prior.iter().product::<f64>();
                    if idx < s.len() {
                        jac[(j - 1, idx)] = prior.iter().product::<f64>();
                    }
                    for i in 0..prior.len() {
                        let others: f64 = prior.iter().enumerate().filter(|&(l, _)| l != i).map(|(_, v)| v).product();
                        jac[(j - 1, i)] = -own * others;
                    }
                }
                (q, jac)
            }
            SizeModel::Binomial { nbar } => {
                let omega = theta[1];
                let q = binomial_size_pmf(nbar, omega);
                let jac = DMatrix::from_fn(nbar as usize, 1, |m, _| {
                    let m = m as u64 + 1;
                    if m < 2 {
                        0.0
                    } else {
                        thinning_probability_drho(nbar - 2, m - 2, omega)
                    }
                });
                (q, jac)
            }
        }
    }

    /// Parameters reproducing `(rho, q)` as closely as the model allows.
    pub(crate) fn encode(&self, rho: f64, q: &[f64]) -> Vec<f64> {
        let nbar = self.nbar() as usize;
        let mut theta = vec![rho.clamp(RHO_MIN, 1.0)];
        match *self {
            SizeModel::Nonparametric { .. } => {
                let mut rem = 1.0;
                for j in 2..nbar {
                    let qj = q.get(j - 1).copied().unwrap_or(0.0);
                    let s = if rem > 0.0 { (qj / rem).clamp(0.0, 1.0) } else { 0.0 };
                    theta.push(s);
                    rem -= qj;
                }
            }
            SizeModel::Binomial { nbar } => {
                let mean: f64 = q.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v).sum();
                let omega = if nbar > 2 { (mean - 2.0) / (nbar - 2) as f64 } else { 0.5 };
                theta.push(omega.clamp(0.01, 0.99));
            }
        }
        theta
    }
}

/// Negative mean log-likelihood with analytic gradient and a
/// finite-difference Hessian, in model parameters.
fn objective(model: &SizeModel, data: &SizeData, theta: &DVector<f64>, bounds: &Bounds) -> Result<Evaluation> {
    let value = neg_loglik(model, data, theta.as_slice()).0;
    let gradient = neg_gradient(model, data, theta)?;
    let mut hessian = fd_jacobian(|t| neg_gradient(model, data, t), theta, bounds)?;
    hessian = (&hessian + hessian.transpose()) * 0.5;
    if hessian.iter().any(|v| !v.is_finite()) {
        let scale = gradient.amax().max(1.0);
        hessian = DMatrix::identity(theta.len(), theta.len()) * scale;
    }
    Ok(Evaluation { value, gradient, hessian })
}

fn neg_loglik(model: &SizeModel, data: &SizeData, theta: &[f64]) -> (f64, LogLik, DMatrix<f64>) {
    let (q, jac) = model.q_and_jacobian(theta);
    let ll = loglik_raw(data, theta[0], &q);
    let g = data.groups() as f64;
    (-ll.value / g, ll, jac)
}

fn neg_gradient(model: &SizeModel, data: &SizeData, theta: &DVector<f64>) -> Result<DVector<f64>> {
    let (_, ll, jac) = neg_loglik(model, data, theta.as_slice());
    let g = data.groups() as f64;
    let mut grad = DVector::zeros(theta.len());
    grad[0] = -ll.d_rho / g;
    let dq = DVector::from_vec(ll.d_q);
    grad.rows_mut(1, theta.len() - 1).copy_from(&(-jac.tr_mul(&dq) / g));
    Ok(grad)
}

#[derive(Debug, Clone)]
pub struct SizeFit {
    pub rho: f64,
    pub q: Vec<f64>,
    /// Parameters in the model's own coordinates (`rho` first).
    pub theta: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub starts_used: usize,
}

/// Lenient start: the largest root of the singleton entry, with the
/// candidate distribution clipped to the simplex.
fn deconvolution_start(p: &[f64]) -> Option<(f64, Vec<f64>)> {
    let rho = find_sampling_rate(p).ok()?;
    let mut q = candidate_distribution(p, rho).ok()?;
    q[0] = 0.0;
    q.iter_mut().for_each(|v| *v = v.max(0.0));
    let s: f64 = q.iter().sum();
    (s > 0.0 && s.is_finite()).then(|| (rho, q.into_iter().map(|v| v / s).collect()))
}

/// Maximizes the size likelihood over the box.
///
/// Starts from the exact deconvolution of the empirical size distribution
/// (the maximizer itself whenever it is a valid distribution) and from two
/// generic points; other starts replace it only on a clear improvement.
pub fn fit_sizes(model: &SizeModel, data: &SizeData) -> Result<SizeFit> {
    let nbar = model.nbar() as usize;
    if nbar < 2 {
        return Err(Error::data("all observed groups are singletons; group sizes carry no information"));
    }
    let g = data.groups();
    if g == 0 {
        return Err(Error::data("no groups observed"));
    }
    let p: Vec<f64> = (1..=nbar).map(|n| data.count(n) / g as f64).collect();
    let uniform: Vec<f64> = (1..=nbar).map(|m| if m < 2 { 0.0 } else { 1.0 / (nbar - 1) as f64 }).collect();
    let mut starts: Vec<Vec<f64>> = Vec::new();
    if let Some((rho, q)) = deconvolution_start(&p) {
        starts.push(model.encode(rho, &q));
    }
    starts.push(model.encode(0.9, &uniform));
    starts.push(model.encode(0.5, &uniform));

    let bounds = model.bounds();
    let opts = Options::default();
    let mut best: Option<crate::optim::Minimum> = None;
    let mut iterations = 0;
    let mut used = 0;
    for start in starts {
        let x0 = DVector::from_vec(start);
        if !neg_loglik(model, data, x0.as_slice()).0.is_finite() {
            continue;
        }
        let m = minimize(|t| objective(model, data, t, &bounds), x0, &bounds, &opts)?;
        iterations += m.iterations;
        used += 1;
        let better = match &best {
            None => true,
            Some(b) => m.value < b.value - 1e-10 * (1.0 + b.value.abs()),
        };
        if better {
            best = Some(m);
        }
    }
    let best = best.ok_or_else(|| Error::numerical("size likelihood is infeasible at every start"))?;
    let theta: Vec<f64> = best.x.iter().copied().collect();
    let (q, _) = model.q_and_jacobian(&theta);
    Ok(SizeFit {
        rho: theta[0],
        q,
        loglik: -best.value * g as f64,
        converged: best.converged,
        iterations,
        starts_used: used,
        theta,
    })
}

/// Score divided by the number of groups, in the coordinates
/// `(rho, q_2, ..., q_{nbar-1})` with `q_nbar = 1 - sum` for the
/// nonparametric model and `(rho, omega)` for the binomial one.
pub fn size_score(model: &SizeModel, data: &SizeData, fit: &SizeFit) -> Vec<f64> {
    let ll = loglik_raw(data, fit.rho, &fit.q);
    let g = data.groups() as f64;
    let mut out = vec![ll.d_rho / g];
    match *model {
        SizeModel::Nonparametric { nbar } => {
            let last = ll.d_q[nbar as usize - 1];
            for j in 2..nbar as usize {
                out.push((ll.d_q[j - 1] - last) / g);
            }
        }
        SizeModel::Binomial { .. } => {
            let (_, jac) = model.q_and_jacobian(&fit.theta);
            out.push(jac.column(0).dot(&DVector::from_vec(ll.d_q)) / g);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::observed_size_pmf;
    use approx::assert_relative_eq;

    #[test]
    fn loglik_examples() {
        let q = GroupSizeDistribution::new(vec![0.0, 0.0, 1.0]).unwrap();
        assert_eq!(size_loglik(&[0, 0, 25], 1.0, &q), 0.0);
        assert_eq!(size_loglik(&[1, 0, 25], 1.0, &q), f64::NEG_INFINITY);
        assert_eq!(size_loglik(&[0, 0, 0, 2], 0.5, &q), f64::NEG_INFINITY);

        let d = GroupSizeDistribution::new(vec![0.0, 0.5625, 0.375, 0.0625]).unwrap();
        let p = observed_size_pmf(&d, 0.3).unwrap();
        let counts = [7u64, 3, 2, 1];
        let direct: f64 = counts.iter().zip(&p).map(|(&c, &pn)| c as f64 * pn.ln()).sum();
        assert_relative_eq!(size_loglik(&counts, 0.3, &d), direct, epsilon = 1e-12);
    }

    #[test]
    fn empirical_distribution_maximizes_at_full_sampling() {
        let counts = [0u64, 6, 3, 1];
        let best = GroupSizeDistribution::new(vec![0.0, 0.6, 0.3, 0.1]).unwrap();
        let top = size_loglik(&counts, 1.0, &best);
        for a in 1..9 {
            for b in 1..(10 - a) {
                let c = 10 - a - b;
                let q = GroupSizeDistribution::new(vec![0.0, a as f64 / 10.0, b as f64 / 10.0, c as f64 / 10.0]).unwrap();
                assert!(size_loglik(&counts, 1.0, &q) <= top + 1e-12);
            }
        }
    }

    #[test]
    fn gradient_matches_differences() {
        let data = SizeData { counts: vec![5, 9, 4, 2], complete: Some(vec![0, 3, 1, 2]) };
        let q = [0.0, 0.4, 0.35, 0.25];
        let ll = loglik_raw(&data, 0.7, &q);
        let h = 1e-6;
        let fd_rho = (loglik_raw(&data, 0.7 + h, &q).value - loglik_raw(&data, 0.7 - h, &q).value) / (2.0 * h);
        assert_relative_eq!(ll.d_rho, fd_rho, epsilon = 1e-6);
        for m in 1..4 {
            let mut a = q;
            let mut b = q;
            a[m] += h;
            b[m] -= h;
            let fd = (loglik_raw(&data, 0.7, &a).value - loglik_raw(&data, 0.7, &b).value) / (2.0 * h);
            assert_relative_eq!(ll.d_q[m], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn stick_breaking_round_trip_and_jacobian() {
        let model = SizeModel::Nonparametric { nbar: 5 };
        let q = [0.0, 0.1, 0.4, 0.2, 0.3];
        let theta = model.encode(0.6, &q);
        let (back, jac) = model.q_and_jacobian(&theta);
        for (a, b) in back.iter().zip(&q) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
        for i in 0..3 {
            let h = 1e-7;
            let mut a = theta.clone();
            let mut b = theta.clone();
            a[i + 1] += h;
            b[i + 1] -= h;
            let (qa, _) = model.q_and_jacobian(&a);
            let (qb, _) = model.q_and_jacobian(&b);
            for m in 0..5 {
                assert_relative_eq!(jac[(m, i)], (qa[m] - qb[m]) / (2.0 * h), epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn mle_recovers_population_distribution() {
        // counts proportional to the observed pmf of (q, rho) are fitted exactly
        let d = GroupSizeDistribution::new(vec![0.0, 0.5625, 0.375, 0.0625]).unwrap();
        let p = observed_size_pmf(&d, 0.5).unwrap();
        let counts: Vec<u64> = p.iter().map(|v| (v * 1e9).round() as u64).collect();
        let data = SizeData::new(counts);
        for model in [SizeModel::Nonparametric { nbar: 4 }, SizeModel::Binomial { nbar: 4 }] {
            let fit = fit_sizes(&model, &data).unwrap();
            assert!((fit.rho - 0.5).abs() < 1e-6, "{model:?} {}", fit.rho);
            for (a, b) in fit.q.iter().zip(d.probabilities()) {
                assert!((a - b).abs() < 1e-6);
            }
            assert!(size_score(&model, &data, &fit).iter().all(|s| s.abs() < 1e-8));
        }
    }

    #[test]
    fn mle_at_full_sampling_is_exact() {
        let data = SizeData::new(vec![0, 56, 37, 7]);
        let fit = fit_sizes(&SizeModel::Nonparametric { nbar: 4 }, &data).unwrap();
        assert_eq!(fit.rho, 1.0);
        for (a, b) in fit.q.iter().zip(&[0.0, 0.56, 0.37, 0.07]) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn two_point_counts_give_half() {
        let data = SizeData::new(vec![2000, 1000]);
        let fit = fit_sizes(&SizeModel::Nonparametric { nbar: 2 }, &data).unwrap();
        assert_relative_eq!(fit.rho, 0.5, epsilon = 1e-9);
        assert_relative_eq!(fit.q[1], 1.0, epsilon = 1e-15);
    }
}
