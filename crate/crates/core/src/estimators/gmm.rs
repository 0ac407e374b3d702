//! Joint estimation of the sampling probability, the true-size distribution
//! and the peer effects when group sizes are not observed.
//!
//! The stacked moments are the size-likelihood score and the least-squares
//! normal equations with slope `E[pi(n_g0) | n_g]`. The size block does not
//! involve the peer effects, so the just-identified system is solved in two
//! blocks: the size likelihood is maximized over the box (its score vanishes
//! at an interior optimum), then the normal equations are solved given the
//! implied posterior weights.

use super::cells::{build_cells, demean, Layout, Prediction};
use super::nls;
use super::size::{fit_sizes, size_score, SizeData, SizeModel};
use super::{EstimationResult, MomentSpec, MomentTag};
use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::sampling::posterior_raw;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GmmOptions {
    /// Upper bound of the true-size support; defaults to the largest observed size.
    pub nbar: Option<u64>,
    pub impose_beta_zero: bool,
    /// Per observed size, the number of groups known to be complete.
    pub complete: Option<Vec<u64>>,
}

impl GmmOptions {
    pub fn from_spec(spec: &MomentSpec) -> Self {
        Self {
            nbar: spec.nbar,
            impose_beta_zero: spec.impose_beta_zero,
            complete: None,
        }
    }
}

/// Nonparametric size distribution over `2..=nbar`.
pub fn gmm_unknown_fit(data: &Dataset, opts: &GmmOptions) -> Result<EstimationResult> {
    fit(data, opts, false)
}

/// Size distribution restricted to `size - 2 ~ Binomial(nbar - 2, omega)`.
pub fn gmm_unknown_parametric_fit(data: &Dataset, opts: &GmmOptions) -> Result<EstimationResult> {
    fit(data, opts, true)
}

fn fit(data: &Dataset, opts: &GmmOptions, parametric: bool) -> Result<EstimationResult> {
    if data.is_empty() {
        return Err(Error::data("dataset has no rows"));
    }
    let tag = if parametric { MomentTag::UnknownParametric } else { MomentTag::Unknown };
    let counts = data.size_counts();
    let max_obs = counts.len() as u64;
    let nbar = opts.nbar.unwrap_or(max_obs);
    if nbar < max_obs {
        return Err(Error::param(format!(
            "nbar = {nbar} is below the largest observed group size {max_obs}"
        )));
    }
    if nbar < 2 {
        return Err(Error::data("all observed groups are singletons; group sizes carry no information"));
    }
    let mut warnings = Vec::new();
    if nbar < 4 {
        warnings.push(format!(
            "true-size support 2..={nbar} has fewer than three points; peer effects are not identified"
        ));
    }
    let mut padded = counts.clone();
    padded.resize(nbar as usize, 0);
    let complete = opts.complete.clone().map(|mut c| {
        c.resize(nbar as usize, 0);
        c
    });
    let size_data = SizeData { counts: padded, complete };
    let model = if parametric {
        SizeModel::Binomial { nbar }
    } else {
        SizeModel::Nonparametric { nbar }
    };
    let sizes_fit = fit_sizes(&model, &size_data)?;
    if !sizes_fit.converged {
        warnings.push("size likelihood maximization did not converge".to_string());
    }

    let mut posteriors: Vec<Option<Prediction>> = vec![None; nbar as usize + 1];
    for n in 1..=max_obs {
        if counts[n as usize - 1] == 0 {
            continue;
        }
        let w = posterior_raw(&sizes_fit.q, sizes_fit.rho, n)?;
        let mix: Vec<(u64, f64)> = w
            .iter()
            .enumerate()
            .map(|(i, &p)| (n + i as u64, p))
            .filter(|&(m, p)| p > 0.0 && m >= 2)
            .collect();
        posteriors[n as usize] = Some(Prediction::Mixture(mix));
    }

    let rows = data.rows();
    let g1: Vec<u64> = rows.iter().map(|r| r.group).collect();
    let sizes = data.group_sizes();
    let keys: Vec<u64> = g1.iter().map(|g| sizes[g]).collect();
    let d = demean(data, &g1)?;
    let cells = build_cells(&d, &keys, |&n| posteriors[n as usize].clone().expect("observed size"))?;
    let layout = Layout {
        k: data.k(),
        beta_free: !opts.impose_beta_zero,
        has_psi: false,
    };
    let nls_fit = nls::fit(&cells, &layout, data.len())?;

    let mut moments = size_score(&model, &size_data, &sizes_fit);
    moments.extend(nls_fit.moments.iter());
    let params = model.dim() + layout.len();
    assert_eq!(moments.len(), params, "stacked moment system must be just identified");
    if !nls_fit.converged {
        warnings.push(format!(
            "optimizer did not converge (projected gradient {:.3e})",
            nls_fit.projected_gradient
        ));
    }
    let k = layout.k;
    Ok(EstimationResult {
        tag,
        gamma: nls_fit.params.rows(0, k).iter().copied().collect(),
        delta: nls_fit.params.rows(k, k).iter().copied().collect(),
        beta: layout.beta(&nls_fit.params),
        beta_imposed: opts.impose_beta_zero,
        psi: None,
        rho: Some(sizes_fit.rho),
        q: Some(sizes_fit.q.clone()),
        omega: parametric.then(|| sizes_fit.theta[1]),
        objective: nls_fit.ssr,
        converged: sizes_fit.converged && nls_fit.converged,
        iterations: sizes_fit.iterations + nls_fit.iterations,
        starts_used: sizes_fit.starts_used + nls_fit.starts_used,
        moments,
        rows: data.len(),
        warnings,
    })
}
