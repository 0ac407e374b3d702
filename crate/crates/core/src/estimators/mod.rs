//! NLS and GMM estimators of `(gamma, delta, beta)` under correctly specified,
//! sampled and uncertain groups.
//!
//! Every estimator fits the demeaned outcome `ybar_i` on the demeaned
//! covariates `xbar_i` times a slope that depends on group sizes:
//!
//! | tag | demeaned by | slope |
//! |---|---|---|
//! | `Missspecified`, `Room` | group | `pi(n_g)` |
//! | `Known`, `UncertainKnownPsiCase` | group | `pi(n_g0)` |
//! | `Unknown`, `UnknownParametric` | group | `E[pi(n_g0) \| n_g]` |
//! | `Floor` | second group | `pi(n_g2)` |
//! | `Uncertain` | group | `psi pi(n_g1) + (1 - psi) pi(n_g2)` |

pub mod cells;
mod gmm;
mod nls;
pub mod size;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;
use cells::{build_cells, demean, Layout, Prediction};

pub use gmm::{gmm_unknown_fit, gmm_unknown_parametric_fit, GmmOptions};
pub use size::{fit_sizes, size_loglik, size_score, SizeData, SizeFit, SizeModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentTag {
    Missspecified,
    Known,
    Unknown,
    UnknownParametric,
    Room,
    Floor,
    UncertainKnownPsiCase,
    Uncertain,
}

impl MomentTag {
    pub const ALL: [MomentTag; 8] = [
        MomentTag::Missspecified,
        MomentTag::Known,
        MomentTag::Unknown,
        MomentTag::UnknownParametric,
        MomentTag::Room,
        MomentTag::Floor,
        MomentTag::UncertainKnownPsiCase,
        MomentTag::Uncertain,
    ];

    /// Column label used in reports.
    pub fn label(&self) -> &'static str {
        match self {
            MomentTag::Missspecified => "Miss-specified",
            MomentTag::Known => "Known",
            MomentTag::Unknown => "Unknown",
            MomentTag::UnknownParametric => "Unknown-P",
            MomentTag::Room => "Room",
            MomentTag::Floor => "Floor",
            MomentTag::UncertainKnownPsiCase => "Known",
            MomentTag::Uncertain => "Uncertain",
        }
    }
}

/// Which estimator to run and which restrictions to impose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSpec {
    pub tag: MomentTag,
    /// Fix `beta = 0` (contextual effects only).
    pub impose_beta_zero: bool,
    /// Upper bound of the true-size support for the unknown-size estimators;
    /// defaults to the largest observed size.
    pub nbar: Option<u64>,
}

impl MomentSpec {
    pub fn new(tag: MomentTag, impose_beta_zero: bool) -> Self {
        Self { tag, impose_beta_zero, nbar: None }
    }

    pub fn with_nbar(mut self, nbar: u64) -> Self {
        self.nbar = Some(nbar);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub tag: MomentTag,
    pub gamma: Vec<f64>,
    pub delta: Vec<f64>,
    pub beta: f64,
    pub beta_imposed: bool,
    pub psi: Option<f64>,
    pub rho: Option<f64>,
    /// Estimated true-size distribution over `1..=nbar`.
    pub q: Option<Vec<f64>>,
    pub omega: Option<f64>,
    /// Sum of squared residuals of the outcome equation.
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub starts_used: usize,
    /// Moment conditions at the estimate (size scores first, then the
    /// least-squares normal equations).
    pub moments: Vec<f64>,
    pub rows: usize,
    pub warnings: Vec<String>,
}

impl EstimationResult {
    /// Named estimates in a fixed order.
    pub fn estimates(&self) -> Vec<(String, f64)> {
        let k = self.gamma.len();
        let name = |base: &str, i: usize| if k == 1 { base.to_string() } else { format!("{base}_{}", i + 1) };
        let mut out: Vec<(String, f64)> = Vec::new();
        out.extend(self.gamma.iter().enumerate().map(|(i, &v)| (name("gamma", i), v)));
        out.extend(self.delta.iter().enumerate().map(|(i, &v)| (name("delta", i), v)));
        out.push(("beta".into(), self.beta));
        if let Some(v) = self.psi {
            out.push(("psi".into(), v));
        }
        if let Some(v) = self.rho {
            out.push(("rho".into(), v));
        }
        if let Some(q) = &self.q {
            out.extend(q.iter().enumerate().skip(1).map(|(i, &v)| (format!("q_{}", i + 1), v)));
        }
        if let Some(v) = self.omega {
            out.push(("omega".into(), v));
        }
        out
    }
}

/// Runs the estimator selected by `spec`.
pub fn estimate(data: &Dataset, spec: &MomentSpec) -> Result<EstimationResult> {
    match spec.tag {
        MomentTag::Unknown => gmm_unknown_fit(data, &GmmOptions::from_spec(spec)),
        MomentTag::UnknownParametric => gmm_unknown_parametric_fit(data, &GmmOptions::from_spec(spec)),
        _ => nls_fit(data, spec),
    }
}

/// Least-squares estimators (all tags except the unknown-size ones).
pub fn nls_fit(data: &Dataset, spec: &MomentSpec) -> Result<EstimationResult> {
    if data.is_empty() {
        return Err(Error::data("dataset has no rows"));
    }
    let rows = data.rows();
    let g1: Vec<u64> = rows.iter().map(|r| r.group).collect();
    let sizes = data.group_sizes();
    let layout = Layout {
        k: data.k(),
        beta_free: !spec.impose_beta_zero,
        has_psi: spec.tag == MomentTag::Uncertain,
    };
    let need_group2 = || -> Result<Vec<u64>> {
        if !data.has_group2() {
            return Err(Error::data(format!(
                "estimator '{}' needs the second (larger) group label in group2_id",
                spec.tag.label()
            )));
        }
        Ok(rows.iter().map(|r| r.group2.unwrap()).collect())
    };
    let cells = match spec.tag {
        MomentTag::Missspecified | MomentTag::Room => {
            let d = demean(data, &g1)?;
            let keys: Vec<u64> = g1.iter().map(|g| sizes[g]).collect();
            build_cells(&d, &keys, |&n| Prediction::size(n))?
        }
        MomentTag::Known | MomentTag::UncertainKnownPsiCase => {
            if !data.has_true_size() {
                return Err(Error::data(
                    "estimator 'known' requires known group sizes: every row needs true_group_size",
                ));
            }
            let keys: Vec<u64> = rows.iter().map(|r| r.true_size.unwrap()).collect();
            for (r, &n) in rows.iter().zip(&keys) {
                if sizes[&r.group] > n {
                    return Err(Error::data(format!(
                        "group {} has {} observed members but true size {n}",
                        r.group, sizes[&r.group]
                    )));
                }
            }
            let d = demean(data, &g1)?;
            build_cells(&d, &keys, |&n| Prediction::size(n))?
        }
        MomentTag::Floor => {
            let g2 = need_group2()?;
            let sizes2 = data.group2_sizes();
            let d = demean(data, &g2)?;
            let keys: Vec<u64> = g2.iter().map(|g| sizes2[g]).collect();
            build_cells(&d, &keys, |&n| Prediction::size(n))?
        }
        MomentTag::Uncertain => {
            let g2 = need_group2()?;
            let sizes2 = data.group2_sizes();
            let d = demean(data, &g1)?;
            let keys: Vec<(u64, u64)> = g1.iter().zip(&g2).map(|(a, b)| (sizes[a], sizes2[b])).collect();
            build_cells(&d, &keys, |&(small, large)| Prediction::Uncertain { small, large })?
        }
        MomentTag::Unknown | MomentTag::UnknownParametric => {
            return Err(Error::param("unknown-size estimators are fitted by GMM; use `estimate`"));
        }
    };
    let fit = nls::fit(&cells, &layout, data.len())?;
    let k = layout.k;
    let mut warnings = Vec::new();
    let distinct: BTreeMap<String, ()> = cells.iter().map(|c| (format!("{:?}", c.prediction), ())).collect();
    if layout.beta_free && distinct.len() < 3 {
        warnings.push(format!(
            "only {} distinct size configurations with covariate variation; the endogenous effect is not identified",
            distinct.len()
        ));
    }
    if !fit.converged {
        warnings.push(format!("optimizer did not converge (projected gradient {:.3e})", fit.projected_gradient));
    }
    Ok(EstimationResult {
        tag: spec.tag,
        gamma: fit.params.rows(0, k).iter().copied().collect(),
        delta: fit.params.rows(k, k).iter().copied().collect(),
        beta: layout.beta(&fit.params),
        beta_imposed: spec.impose_beta_zero,
        psi: layout.psi_index().map(|i| fit.params[i]),
        rho: None,
        q: None,
        omega: None,
        objective: fit.ssr,
        converged: fit.converged,
        iterations: fit.iterations,
        starts_used: fit.starts_used,
        moments: fit.moments.iter().copied().collect(),
        rows: data.len(),
        warnings,
    })
}

/// Uncertain-group NLS estimating `(gamma, delta, beta, psi)`.
pub fn nls_uncertain_fit(data: &Dataset, impose_beta_zero: bool) -> Result<EstimationResult> {
    nls_fit(data, &MomentSpec::new(MomentTag::Uncertain, impose_beta_zero))
}
