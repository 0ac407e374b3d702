//! Replication harness for the Monte-Carlo tables.
//!
//! Each replication draws one dataset from streams keyed by
//! `(master seed, design point, replication)` and runs every estimator on it.
//! Results are gathered in replication order, so a report does not depend on
//! the execution mode or the number of threads.

pub mod designs;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimationResult, MomentSpec, MomentTag};
use crate::model::Dataset;
use crate::rng::ReplicationKey;
pub use designs::{gen_group_uncertainty, gen_missing_data, Truth};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    MissingData,
    GroupUncertainty,
    GroupUncertaintyFe,
}

impl Variant {
    pub fn table(&self) -> u8 {
        match self {
            Variant::MissingData => 1,
            Variant::GroupUncertainty => 2,
            Variant::GroupUncertaintyFe => 3,
        }
    }

    pub fn from_table(t: u8) -> Result<Self> {
        match t {
            1 => Ok(Variant::MissingData),
            2 => Ok(Variant::GroupUncertainty),
            3 => Ok(Variant::GroupUncertaintyFe),
            _ => Err(Error::param(format!("table must be 1, 2 or 3, got {t}"))),
        }
    }

    /// Symbol of the design parameter varied across rows.
    pub fn point_name(&self) -> &'static str {
        match self {
            Variant::MissingData => "rho",
            _ => "psi",
        }
    }

    pub fn default_grid(&self) -> Vec<f64> {
        match self {
            Variant::MissingData => vec![1.0, 0.9, 0.7, 0.5, 0.3],
            _ => vec![0.2, 0.4, 0.6, 0.8],
        }
    }

    pub fn default_estimators(&self) -> Vec<MomentTag> {
        match self {
            Variant::MissingData => vec![
                MomentTag::Missspecified,
                MomentTag::Known,
                MomentTag::Unknown,
                MomentTag::UnknownParametric,
            ],
            _ => vec![
                MomentTag::Room,
                MomentTag::Floor,
                MomentTag::UncertainKnownPsiCase,
                MomentTag::Uncertain,
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Specification {
    /// `beta = 0` imposed.
    ContextualOnly,
    Endogenous,
}

impl Specification {
    pub fn impose_beta_zero(&self) -> bool {
        matches!(self, Specification::ContextualOnly)
    }

    fn title(&self) -> &'static str {
        match self {
            Specification::ContextualOnly => "Contextual effect only (beta = 0 imposed)",
            Specification::Endogenous => "Contextual and endogenous effects",
        }
    }
}

/// Upper bound of the size support given to the unknown-size estimators.
pub const UNKNOWN_NBAR: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McDesign {
    pub variant: Variant,
    /// Target observed sample size.
    pub m: u64,
    /// Values of `rho` (missing data) or `psi` (group uncertainty).
    pub grid: Vec<f64>,
    pub replications: usize,
    pub master_seed: u64,
    pub truth: Truth,
    pub specifications: Vec<Specification>,
    pub estimators: Vec<MomentTag>,
}

impl McDesign {
    /// The design of one of the three tables with both specifications.
    pub fn table(variant: Variant, m: u64, replications: usize, master_seed: u64) -> Self {
        Self {
            variant,
            m,
            grid: variant.default_grid(),
            replications,
            master_seed,
            truth: Truth::default(),
            specifications: vec![Specification::ContextualOnly, Specification::Endogenous],
            estimators: variant.default_estimators(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::param("at least one replication is required"));
        }
        if self.m == 0 {
            return Err(Error::param("target sample size must be positive"));
        }
        for &v in &self.grid {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::param(format!("grid values must lie in (0, 1], got {v}")));
            }
        }
        if self.grid.is_empty() || self.specifications.is_empty() || self.estimators.is_empty() {
            return Err(Error::param("grid, specifications and estimators must be non-empty"));
        }
        Ok(())
    }

    /// Stream key of replication `r` at design value `point`. The point enters
    /// through its value, so the same value shares draws across grids and
    /// across the baseline and fixed-effect uncertainty designs.
    pub fn key(&self, point: f64, r: usize) -> ReplicationKey {
        ReplicationKey::new(self.master_seed, (point * 1e6).round() as u64, r as u64)
    }

    /// Draws the dataset of one replication.
    pub fn dataset(&self, point: f64, r: usize) -> Result<Dataset> {
        let key = self.key(point, r);
        Ok(match self.variant {
            Variant::MissingData => gen_missing_data(point, self.m, &self.truth, &key)?.1,
            Variant::GroupUncertainty => gen_group_uncertainty(point, self.m, &self.truth, &key, false)?.1,
            Variant::GroupUncertaintyFe => gen_group_uncertainty(point, self.m, &self.truth, &key, true)?.1,
        })
    }

    fn spec(&self, spec: Specification, tag: MomentTag) -> MomentSpec {
        let s = MomentSpec::new(tag, spec.impose_beta_zero());
        match tag {
            MomentTag::Unknown | MomentTag::UnknownParametric => s.with_nbar(UNKNOWN_NBAR),
            _ => s,
        }
    }

    /// All estimator fits of one replication, `[specification][estimator]`.
    pub fn replicate(&self, point: f64, r: usize) -> Result<Vec<Vec<std::result::Result<EstimationResult, String>>>> {
        let data = self.dataset(point, r)?;
        Ok(self
            .specifications
            .iter()
            .map(|&s| {
                self.estimators
                    .iter()
                    .map(|&t| estimate(&data, &self.spec(s, t)).map_err(|e| e.to_string()))
                    .collect()
            })
            .collect())
    }
}

/// How replications are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Rayon; `threads` caps the pool size (all cores when `None`). Runs
    /// sequentially when the crate is built without the `parallel` feature.
    #[default]
    Parallel,
    ParallelWith { threads: usize },
}

type RepOutcome = Result<Vec<Vec<std::result::Result<EstimationResult, String>>>>;

fn run_all(design: &McDesign, point: f64, exec: Execution) -> Vec<RepOutcome> {
    let one = |r: usize| design.replicate(point, r);
    match exec {
        Execution::Sequential => (0..design.replications).map(one).collect(),
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..design.replications).into_par_iter().map(one).collect()
        }
        #[cfg(feature = "parallel")]
        Execution::ParallelWith { threads } => {
            use rayon::prelude::*;
            match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
                Ok(pool) => pool.install(|| (0..design.replications).into_par_iter().map(one).collect()),
                Err(_) => (0..design.replications).map(one).collect(),
            }
        }
        #[cfg(not(feature = "parallel"))]
        Execution::Parallel | Execution::ParallelWith { .. } => (0..design.replications).map(one).collect(),
    }
}

/// Summary of one estimator's estimates of one parameter at one design point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McCell {
    pub point: f64,
    pub specification: Specification,
    pub estimator: MomentTag,
    pub parameter: String,
    pub truth: f64,
    pub mean: f64,
    pub rmse: f64,
    /// Successful replications.
    pub replications: usize,
    pub failures: usize,
    /// Estimates in replication order.
    pub draws: Vec<f64>,
}

impl McCell {
    fn from_draws(point: f64, spec: Specification, tag: MomentTag, parameter: &str, truth: f64, draws: Vec<f64>, failures: usize) -> Self {
        let n = draws.len() as f64;
        let (mean, rmse) = if draws.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let mean = draws.iter().sum::<f64>() / n;
            let mse = draws.iter().map(|d| (d - truth).powi(2)).sum::<f64>() / n;
            (mean, mse.sqrt())
        };
        Self {
            point,
            specification: spec,
            estimator: tag,
            parameter: parameter.to_string(),
            truth,
            mean,
            rmse,
            replications: draws.len(),
            failures,
            draws,
        }
    }

    /// Sample variance of the draws (denominator `n`).
    pub fn variance(&self) -> f64 {
        let n = self.draws.len() as f64;
        self.draws.iter().map(|d| (d - self.mean).powi(2)).sum::<f64>() / n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub design: McDesign,
    pub cells: Vec<McCell>,
    /// Failure messages as `(point, replication, specification, estimator, message)`.
    pub failures: Vec<(f64, usize, Specification, MomentTag, String)>,
}

/// Runs every replication of every design point.
pub fn run_mc(design: &McDesign, exec: Execution) -> Result<McReport> {
    design.validate()?;
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for &point in &design.grid {
        let reps = run_all(design, point, exec)
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        for (si, &spec) in design.specifications.iter().enumerate() {
            for (ei, &tag) in design.estimators.iter().enumerate() {
                let mut delta = Vec::new();
                let mut gamma = Vec::new();
                let mut beta = Vec::new();
                let mut failed = 0;
                for (r, rep) in reps.iter().enumerate() {
                    match &rep[si][ei] {
                        Ok(est) => {
                            delta.push(est.delta[0]);
                            gamma.push(est.gamma[0]);
                            beta.push(est.beta);
                        }
                        Err(msg) => {
                            failed += 1;
                            failures.push((point, r, spec, tag, msg.clone()));
                        }
                    }
                }
                let t = &design.truth;
                cells.push(McCell::from_draws(point, spec, tag, "delta", t.delta, delta, failed));
                cells.push(McCell::from_draws(point, spec, tag, "gamma", t.gamma, gamma, failed));
                if !spec.impose_beta_zero() {
                    cells.push(McCell::from_draws(point, spec, tag, "beta", t.beta, beta, failed));
                }
            }
        }
    }
    Ok(McReport {
        design: design.clone(),
        cells,
        failures,
    })
}

impl McReport {
    pub fn cell(&self, point: f64, spec: Specification, tag: MomentTag, parameter: &str) -> Option<&McCell> {
        self.cells
            .iter()
            .find(|c| c.point == point && c.specification == spec && c.estimator == tag && c.parameter == parameter)
    }

    /// One summary line per cell at full precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("table,m,point_name,point,specification,estimator,parameter,truth,mean,rmse,replications,failures\n");
        let v = self.design.variant;
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{:?},{},{},{},{:?},{:?},{:?},{},{}",
                v.table(),
                self.design.m,
                v.point_name(),
                c.point,
                spec_name(c.specification),
                tag_name(c.estimator),
                c.parameter,
                c.truth,
                c.mean,
                c.rmse,
                c.replications,
                c.failures
            );
        }
        out
    }

    /// Every replication's estimate, one line per draw.
    pub fn draws_csv(&self) -> String {
        let mut out = String::from("point,specification,estimator,parameter,replication,estimate\n");
        for c in &self.cells {
            for (r, d) in c.draws.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{:?},{},{},{},{},{:?}",
                    c.point,
                    spec_name(c.specification),
                    tag_name(c.estimator),
                    c.parameter,
                    r,
                    d
                );
            }
        }
        out
    }

    /// Failed fits, one line each.
    pub fn failures_csv(&self) -> String {
        let mut out = String::from("point,replication,specification,estimator,message\n");
        for (point, r, spec, tag, msg) in &self.failures {
            let _ = writeln!(
                out,
                "{point:?},{r},{},{},\"{}\"",
                spec_name(*spec),
                tag_name(*tag),
                msg.replace('"', "\"\"")
            );
        }
        out
    }

    /// Mean and RMSE to three decimals, one block per specification.
    pub fn to_markdown(&self) -> String {
        let d = &self.design;
        let sym = d.variant.point_name();
        let mut out = String::new();
        let _ = writeln!(out, "## Table {} (M = {}, {} replications)\n", d.variant.table(), d.m, d.replications);
        for &spec in &d.specifications {
            let _ = writeln!(out, "**{}**, N ~ M = {}\n", spec.title(), d.m);
            let mut header = format!("| {sym} | |");
            let mut rule = String::from("|---|---|");
            for t in &d.estimators {
                let _ = write!(header, " {} Mean | {} RMSE |", t.label(), t.label());
                rule.push_str("---:|---:|");
            }
            let _ = writeln!(out, "{header}\n{rule}");
            let params: &[&str] = if spec.impose_beta_zero() { &["delta", "gamma"] } else { &["delta", "gamma", "beta"] };
            for &point in &d.grid {
                for (i, p) in params.iter().enumerate() {
                    let label = if i == 0 { format!("{point}") } else { String::new() };
                    let mut line = format!("| {label} | {p} |");
                    for &t in &d.estimators {
                        match self.cell(point, spec, t, p) {
                            Some(c) => {
                                let _ = write!(line, " {:.3} | {:.3} |", c.mean, c.rmse);
                            }
                            None => line.push_str(" | |"),
                        }
                    }
                    let _ = writeln!(out, "{line}");
                }
            }
            out.push('\n');
        }
        let failed: usize = self.failures.len();
        if failed > 0 {
            let _ = writeln!(out, "{failed} estimator fits failed and are excluded.\n");
        }
        out
    }
}

fn spec_name(s: Specification) -> &'static str {
    match s {
        Specification::ContextualOnly => "contextual_only",
        Specification::Endogenous => "endogenous",
    }
}

fn tag_name(t: MomentTag) -> &'static str {
    match t {
        MomentTag::Missspecified => "missspecified",
        MomentTag::Known => "known",
        MomentTag::Unknown => "unknown",
        MomentTag::UnknownParametric => "unknown_parametric",
        MomentTag::Room => "room",
        MomentTag::Floor => "floor",
        MomentTag::UncertainKnownPsiCase => "uncertain_known_psi_case",
        MomentTag::Uncertain => "uncertain",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(variant: Variant, reps: usize) -> McDesign {
        McDesign {
            grid: vec![1.0],
            specifications: vec![Specification::ContextualOnly],
            ..McDesign::table(variant, 400, reps, 17)
        }
    }

    #[test]
    fn single_replication_rmse_is_absolute_error() {
        let design = small(Variant::MissingData, 1);
        let rep = run_mc(&design, Execution::Sequential).unwrap();
        for c in &rep.cells {
            assert_eq!(c.replications, 1);
            assert!((c.rmse - (c.draws[0] - c.truth).abs()).abs() < 1e-15);
        }
    }

    #[test]
    fn rmse_decomposes_into_bias_and_variance() {
        let design = small(Variant::MissingData, 6);
        let rep = run_mc(&design, Execution::Sequential).unwrap();
        for c in &rep.cells {
            let lhs = c.rmse * c.rmse;
            let rhs = (c.mean - c.truth).powi(2) + c.variance();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let design = McDesign { grid: vec![0.6], ..small(Variant::GroupUncertainty, 4) };
        let a = run_mc(&design, Execution::Sequential).unwrap();
        let b = run_mc(&design, Execution::ParallelWith { threads: 3 }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn markdown_has_one_row_per_parameter() {
        let design = small(Variant::MissingData, 2);
        let md = run_mc(&design, Execution::Sequential).unwrap().to_markdown();
        assert!(md.contains("| 1 | delta |"));
        assert!(md.contains("| | gamma |") || md.contains("|  | gamma |"));
        assert!(md.contains("Unknown-P Mean"));
    }

    #[test]
    fn invalid_designs_are_rejected() {
        assert!(McDesign { replications: 0, ..small(Variant::MissingData, 1) }.validate().is_err());
        assert!(McDesign { grid: vec![1.5], ..small(Variant::MissingData, 1) }.validate().is_err());
        assert!(Variant::from_table(4).is_err());
    }
}
