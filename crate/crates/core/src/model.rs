//! Structural linear-in-means model, its reduced form and exact simulation.
//!
//! Within a true group of size `n` the outcome of member `i` is
//!
//! ```text
//! y_i = alpha_g + beta * mean_{j != i} y_j + delta . mean_{j != i} x_j + gamma . x_i + eps_i
//! ```
//!
//! After demeaning within any subset of the true group the covariate slope is
//! the reduced-form coefficient [`pi`], which only depends on the true group
//! size. Everything downstream (sampling corrections, group uncertainty) works
//! through that function.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{ReplicationKey, StreamRole};

/// Upper bound used wherever `|beta| < 1` has to be enforced numerically.
pub const BETA_BOUND: f64 = 1.0 - 1e-6;

/// Mean of the group effect `alpha_g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AlphaMean {
    Constant(f64),
    /// Mean of covariate `covariate` over the members of the true group.
    GroupMeanOfX { covariate: usize },
}

/// Normal generator for the group effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEffect {
    pub mean: AlphaMean,
    pub variance: f64,
}

impl Default for GroupEffect {
    fn default() -> Self {
        Self {
            mean: AlphaMean::Constant(0.0),
            variance: 0.0,
        }
    }
}

/// Structural coefficients plus the generators of the two error components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralParams {
    /// Own effect, one entry per covariate.
    pub gamma: Vec<f64>,
    /// Contextual effect, one entry per covariate.
    pub delta: Vec<f64>,
    /// Endogenous effect.
    pub beta: f64,
    pub alpha: GroupEffect,
    /// Variance of the idiosyncratic error.
    pub sigma2: f64,
}

impl StructuralParams {
    /// Coefficients with degenerate errors (`alpha = 0`, `sigma2 = 0`).
    pub fn new(gamma: Vec<f64>, delta: Vec<f64>, beta: f64) -> Result<Self> {
        let theta = Self {
            gamma,
            delta,
            beta,
            alpha: GroupEffect::default(),
            sigma2: 0.0,
        };
        theta.validate()?;
        Ok(theta)
    }

    /// Single-covariate convenience constructor.
    pub fn scalar(gamma: f64, delta: f64, beta: f64) -> Result<Self> {
        Self::new(vec![gamma], vec![delta], beta)
    }

    pub fn with_group_effect(mut self, alpha: GroupEffect) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_sigma2(mut self, sigma2: f64) -> Self {
        self.sigma2 = sigma2;
        self
    }

    /// Number of covariates.
    pub fn k(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let diag = check_parameters(self);
        match diag.errors.first() {
            Some(e) => Err(Error::param(e.clone())),
            None => Ok(()),
        }
    }
}

fn check_size(n: u64) -> Result<f64> {
    if n < 2 {
        return Err(Error::param(format!("group size must be at least 2, got {n}")));
    }
    Ok((n - 1) as f64)
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta.abs() < 1.0) {
        return Err(Error::param(format!("|beta| must be < 1, got {beta}")));
    }
    Ok(())
}

/// Coefficient on the sum of peers' covariates in the reduced form.
pub fn pi1(n: u64, theta: &StructuralParams) -> Result<Vec<f64>> {
    let m = check_size(n)?;
    check_beta(theta.beta)?;
    let b = theta.beta;
    let denom = 1.0 - b * (b + m - 1.0) / m;
    Ok(theta
        .gamma
        .iter()
        .zip(&theta.delta)
        .map(|(g, d)| (d + b * g) / m / denom)
        .collect())
}

/// Coefficient on the own covariate in the reduced form.
pub fn pi2(n: u64, theta: &StructuralParams) -> Result<Vec<f64>> {
    let m = check_size(n)?;
    check_beta(theta.beta)?;
    let b = theta.beta;
    let denom = 1.0 - b * (b + m - 1.0) / m;
    Ok(theta
        .gamma
        .iter()
        .zip(&theta.delta)
        .map(|(g, d)| (g + b * (d - g * (m - 1.0)) / m) / denom)
        .collect())
}

/// Within-group reduced-form slope for a true group of size `n`.
pub fn pi(n: u64, theta: &StructuralParams) -> Result<Vec<f64>> {
    check_size(n)?;
    check_beta(theta.beta)?;
    Ok(theta
        .gamma
        .iter()
        .zip(&theta.delta)
        .map(|(&g, &d)| reduced_slope(n, g, d, theta.beta))
        .collect())
}

/// Scalar kernel of [`pi`]; `n >= 2` and `|beta| < 1` are the caller's job.
#[inline]
pub fn reduced_slope(n: u64, gamma: f64, delta: f64, beta: f64) -> f64 {
    let a = 1.0 / (n - 1) as f64;
    (gamma - delta * a) / (1.0 + beta * a)
}

/// Partial derivatives of [`reduced_slope`] with respect to `(gamma, delta, beta)`.
#[inline]
pub fn reduced_slope_gradient(n: u64, gamma: f64, delta: f64, beta: f64) -> [f64; 3] {
    let a = 1.0 / (n - 1) as f64;
    let den = 1.0 + beta * a;
    [1.0 / den, -a / den, -a * (gamma - delta * a) / (den * den)]
}

/// Outcome of parameter screening: hard errors and identification warnings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamDiagnostics {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl ParamDiagnostics {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Screens `theta` for an invalid endogenous effect and for the
/// `gamma * beta + delta = 0` case in which peer effects are not identified.
pub fn check_parameters(theta: &StructuralParams) -> ParamDiagnostics {
    let mut diag = ParamDiagnostics::default();
    if theta.gamma.is_empty() {
        diag.errors.push("at least one covariate is required".into());
    }
    if theta.gamma.len() != theta.delta.len() {
        diag.errors.push(format!(
            "gamma has {} entries but delta has {}",
            theta.gamma.len(),
            theta.delta.len()
        ));
    }
    if !(theta.beta.abs() < 1.0) {
        diag.errors
            .push(format!("|beta| must be < 1 for the reduced form to exist, got {}", theta.beta));
    }
    if !(theta.sigma2 >= 0.0) {
        diag.errors.push(format!("sigma2 must be non-negative, got {}", theta.sigma2));
    }
    if !(theta.alpha.variance >= 0.0) {
        diag.errors
            .push(format!("group effect variance must be non-negative, got {}", theta.alpha.variance));
    }
    if let AlphaMean::GroupMeanOfX { covariate } = theta.alpha.mean {
        if covariate >= theta.gamma.len() {
            diag.errors.push(format!("group effect mean refers to missing covariate {covariate}"));
        }
    }
    for (k, (g, d)) in theta.gamma.iter().zip(&theta.delta).enumerate() {
        let offset = g * theta.beta + d;
        if offset.abs() <= 1e-12 * (1.0 + g.abs() + d.abs()) {
            diag.warnings.push(format!(
                "gamma*beta + delta = 0 for covariate {k}: endogenous and contextual effects are not identified"
            ));
        }
    }
    diag
}

/// Candidate group labels when the peer group is uncertain; `small` is nested in `large`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NestedGroups {
    pub small: u64,
    pub large: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub id: u64,
    /// True group.
    pub group: u64,
    pub x: Vec<f64>,
    pub nest: Option<NestedGroups>,
}

/// Complete population of individuals with their true groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    individuals: Vec<Individual>,
    group_sizes: BTreeMap<u64, u64>,
}

impl Population {
    pub fn new(individuals: Vec<Individual>) -> Result<Self> {
        let k = individuals.first().map_or(0, |i| i.x.len());
        let mut group_sizes = BTreeMap::new();
        for ind in &individuals {
            if ind.x.len() != k {
                return Err(Error::data(format!(
                    "individual {} has {} covariates, expected {k}",
                    ind.id,
                    ind.x.len()
                )));
            }
            *group_sizes.entry(ind.group).or_insert(0u64) += 1;
        }
        if let Some((g, n)) = group_sizes.iter().find(|(_, &n)| n < 2) {
            return Err(Error::data(format!("true group {g} has {n} member(s); groups need at least 2")));
        }
        Ok(Self {
            individuals,
            group_sizes,
        })
    }

    pub fn individuals(&self) -> &[Individual] {
        &self.individuals
    }

    pub fn group_sizes(&self) -> &BTreeMap<u64, u64> {
        &self.group_sizes
    }

    pub fn len(&self) -> usize {
        self.individuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.individuals.is_empty()
    }

    pub fn k(&self) -> usize {
        self.individuals.first().map_or(0, |i| i.x.len())
    }

    /// Member indices of each true group, in ascending group id.
    pub fn members(&self) -> BTreeMap<u64, Vec<usize>> {
        let mut out: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, ind) in self.individuals.iter().enumerate() {
            out.entry(ind.group).or_default().push(i);
        }
        out
    }
}

/// One observed individual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub id: u64,
    /// Specified group (the smaller candidate under group uncertainty).
    pub group: u64,
    /// Larger candidate group, when the peer group is uncertain.
    pub group2: Option<u64>,
    /// True group size, only present when the researcher knows it.
    pub true_size: Option<u64>,
    pub y: f64,
    pub x: Vec<f64>,
}

/// Observed sample.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    rows: Vec<Row>,
}

impl Dataset {
    /// Validates covariate counts and that specified groups nest in second groups.
    pub fn new(rows: Vec<Row>) -> Result<Self> {
        let k = rows.first().map_or(0, |r| r.x.len());
        let mut nest: HashMap<u64, Option<u64>> = HashMap::new();
        let with_group2 = rows.first().is_some_and(|r| r.group2.is_some());
        for r in &rows {
            if r.x.len() != k {
                return Err(Error::data(format!("row {} has {} covariates, expected {k}", r.id, r.x.len())));
            }
            if r.group2.is_some() != with_group2 {
                return Err(Error::data(format!("row {}: second group label must be given for all rows or none", r.id)));
            }
            if let Some(n) = r.true_size {
                if n < 2 {
                    return Err(Error::data(format!("row {}: true group size {n} < 2", r.id)));
                }
            }
            match nest.get(&r.group) {
                Some(prev) if *prev != r.group2 => {
                    return Err(Error::data(format!(
                        "group {} is split across second groups {:?} and {:?}",
                        r.group, prev, r.group2
                    )));
                }
                Some(_) => {}
                None => {
                    nest.insert(r.group, r.group2);
                }
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<Row> {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn k(&self) -> usize {
        self.rows.first().map_or(0, |r| r.x.len())
    }

    pub fn has_group2(&self) -> bool {
        self.rows.first().is_some_and(|r| r.group2.is_some())
    }

    pub fn has_true_size(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.true_size.is_some())
    }

    /// Number of observed rows per specified group.
    pub fn group_sizes(&self) -> BTreeMap<u64, u64> {
        let mut out = BTreeMap::new();
        for r in &self.rows {
            *out.entry(r.group).or_insert(0) += 1;
        }
        out
    }

    /// Number of observed rows per second group.
    pub fn group2_sizes(&self) -> BTreeMap<u64, u64> {
        let mut out = BTreeMap::new();
        for r in &self.rows {
            if let Some(g2) = r.group2 {
                *out.entry(g2).or_insert(0) += 1;
            }
        }
        out
    }

    /// Histogram of observed specified-group sizes; entry `n - 1` counts groups of size `n`.
    pub fn size_counts(&self) -> Vec<u64> {
        let sizes = self.group_sizes();
        let max = sizes.values().copied().max().unwrap_or(0) as usize;
        let mut counts = vec![0u64; max];
        for &n in sizes.values() {
            counts[n as usize - 1] += 1;
        }
        counts
    }
}

/// Simulated outcomes together with the draws that produced them.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub dataset: Dataset,
    /// Group effect per true group.
    pub alpha: BTreeMap<u64, f64>,
    /// Idiosyncratic error per individual, in population order.
    pub epsilon: Vec<f64>,
}

/// Draws group effects and errors from `seed` and solves the structural system
/// within every true group.
///
/// Rows follow population order. Each row carries its true group size; under
/// group uncertainty (`nest` set) the row's specified group is the small
/// candidate and `group2` the large one, otherwise the specified group is the
/// true group.
pub fn simulate_outcomes(pop: &Population, theta: &StructuralParams, seed: u64) -> Result<Dataset> {
    let key = ReplicationKey::from_seed(seed);
    let mut alpha_rng = key.stream(StreamRole::GroupEffects);
    let mut eps_rng = key.stream(StreamRole::Idiosyncratic);
    Ok(simulate_outcomes_with(pop, theta, &mut alpha_rng, &mut eps_rng)?.dataset)
}

/// [`simulate_outcomes`] with caller-provided streams; returns the draws too.
pub fn simulate_outcomes_with<R1: Rng, R2: Rng>(
    pop: &Population,
    theta: &StructuralParams,
    alpha_rng: &mut R1,
    eps_rng: &mut R2,
) -> Result<Simulation> {
    theta.validate()?;
    if pop.k() != theta.k() && !pop.is_empty() {
        return Err(Error::data(format!(
            "population has {} covariates but parameters have {}",
            pop.k(),
            theta.k()
        )));
    }
    let inds = pop.individuals();
    let members = pop.members();

    let alpha_sd = theta.alpha.variance.sqrt();
    let mut alpha = BTreeMap::new();
    for (&g, idx) in &members {
        let z: f64 = alpha_rng.sample(StandardNormal);
        let mean = match theta.alpha.mean {
            AlphaMean::Constant(c) => c,
            AlphaMean::GroupMeanOfX { covariate } => {
                idx.iter().map(|&i| inds[i].x[covariate]).sum::<f64>() / idx.len() as f64
            }
        };
        alpha.insert(g, mean + alpha_sd * z);
    }

    let eps_sd = theta.sigma2.sqrt();
    let epsilon: Vec<f64> = (0..inds.len())
        .map(|_| eps_sd * eps_rng.sample::<f64, _>(StandardNormal))
        .collect();

    let dataset = simulate_outcomes_from_draws(pop, theta, &alpha, &epsilon)?;
    Ok(Simulation {
        dataset,
        alpha,
        epsilon,
    })
}

/// Solves the structural system given explicit group effects and errors.
pub fn simulate_outcomes_from_draws(
    pop: &Population,
    theta: &StructuralParams,
    alpha: &BTreeMap<u64, f64>,
    epsilon: &[f64],
) -> Result<Dataset> {
    let inds = pop.individuals();
    if epsilon.len() != inds.len() {
        return Err(Error::data(format!("{} errors for {} individuals", epsilon.len(), inds.len())));
    }
    let mut y = vec![0.0; inds.len()];
    for (g, idx) in pop.members() {
        let a = *alpha
            .get(&g)
            .ok_or_else(|| Error::data(format!("no group effect for group {g}")))?;
        let n = idx.len();
        let w = 1.0 / (n - 1) as f64;
        let system = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { -theta.beta * w });
        let rhs = DVector::from_fn(n, |r, _| {
            let i = idx[r];
            structural_rhs(inds, &idx, i, a, theta) + epsilon[i]
        });
        let sol = system
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::numerical(format!("singular structural system in group {g}")))?;
        for (r, &i) in idx.iter().enumerate() {
            y[i] = sol[r];
        }
    }

    let sizes = pop.group_sizes();
    let rows = inds
        .iter()
        .zip(&y)
        .map(|(ind, &yi)| Row {
            id: ind.id,
            group: ind.nest.map_or(ind.group, |n| n.small),
            group2: ind.nest.map(|n| n.large),
            true_size: Some(sizes[&ind.group]),
            y: yi,
            x: ind.x.clone(),
        })
        .collect();
    Ok(Dataset { rows })
}

/// Right-hand side of the structural equation for individual `i`, excluding
/// the endogenous term and the idiosyncratic error.
fn structural_rhs(inds: &[Individual], members: &[usize], i: usize, alpha: f64, theta: &StructuralParams) -> f64 {
    let w = 1.0 / (members.len() - 1) as f64;
    let mut out = alpha;
    for k in 0..theta.k() {
        let peers: f64 = members.iter().filter(|&&j| j != i).map(|&j| inds[j].x[k]).sum();
        out += theta.delta[k] * peers * w + theta.gamma[k] * inds[i].x[k];
    }
    out
}

/// `y_i` minus the full structural right-hand side except `eps_i`; equals the
/// idiosyncratic error when `y` solves the model.
pub fn structural_residuals(
    pop: &Population,
    theta: &StructuralParams,
    y: &[f64],
    alpha: &BTreeMap<u64, f64>,
) -> Result<Vec<f64>> {
    let inds = pop.individuals();
    if y.len() != inds.len() {
        return Err(Error::data(format!("{} outcomes for {} individuals", y.len(), inds.len())));
    }
    let mut out = vec![0.0; y.len()];
    for (g, idx) in pop.members() {
        let a = *alpha
            .get(&g)
            .ok_or_else(|| Error::data(format!("no group effect for group {g}")))?;
        let w = 1.0 / (idx.len() - 1) as f64;
        for &i in &idx {
            let peers: f64 = idx.iter().filter(|&&j| j != i).map(|&j| y[j]).sum();
            out[i] = y[i] - theta.beta * peers * w - structural_rhs(inds, &idx, i, a, theta);
        }
    }
    Ok(out)
}

/// Subtracts from each value the mean of its group. Singleton groups map to 0.
pub fn within_transform(values: &[f64], groups: &[u64]) -> Result<Vec<f64>> {
    if values.len() != groups.len() {
        return Err(Error::data(format!(
            "{} values but {} group labels",
            values.len(),
            groups.len()
        )));
    }
    let mut acc: HashMap<u64, (f64, usize)> = HashMap::new();
    for (&v, &g) in values.iter().zip(groups) {
        let e = acc.entry(g).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    Ok(values
        .iter()
        .zip(groups)
        .map(|(&v, g)| {
            let (s, n) = acc[g];
            if n == 1 {
                0.0
            } else {
                v - s / n as f64
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn theta(g: f64, d: f64, b: f64) -> StructuralParams {
        StructuralParams::scalar(g, d, b).unwrap()
    }

    #[test]
    fn pi1_examples() {
        assert_eq!(pi1(2, &theta(1.0, 0.0, 0.0)).unwrap(), vec![0.0]);
        assert_relative_eq!(pi1(2, &theta(1.0, 0.5, 0.0)).unwrap()[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(pi1(3, &theta(1.0, 0.5, 0.5)).unwrap()[0], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn pi2_examples() {
        for n in 2..10 {
            assert_relative_eq!(pi2(n, &theta(1.0, 0.5, 0.0)).unwrap()[0], 1.0, epsilon = 1e-15);
        }
        assert_relative_eq!(pi2(2, &theta(1.0, 0.5, 0.5)).unwrap()[0], 5.0 / 3.0, epsilon = 1e-15);
        assert_eq!(pi2(3, &theta(0.0, 0.0, 0.9)).unwrap(), vec![0.0]);
    }

    #[test]
    fn pi_examples() {
        for n in 2..10 {
            assert_eq!(pi(n, &theta(1.3, 0.0, 0.0)).unwrap(), vec![1.3]);
        }
        assert_relative_eq!(pi(2, &theta(1.0, 0.5, 0.0)).unwrap()[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(pi(4, &theta(1.0, 0.5, 0.5)).unwrap()[0], 5.0 / 7.0, epsilon = 1e-15);
    }

    #[test]
    fn reduced_form_rejects_bad_inputs() {
        assert!(pi(1, &theta(1.0, 0.5, 0.0)).is_err());
        assert!(pi1(0, &theta(1.0, 0.5, 0.0)).is_err());
        let mut t = theta(1.0, 0.5, 0.0);
        t.beta = 1.0;
        assert!(pi1(3, &t).is_err());
        assert!(pi2(3, &t).is_err());
        assert!(StructuralParams::scalar(1.0, 0.5, -1.0).is_err());
    }

    #[test]
    fn parameter_diagnostics() {
        let d = check_parameters(&theta(1.0, -0.5, 0.5));
        assert!(d.is_ok());
        assert_eq!(d.warnings.len(), 1);
        let d = check_parameters(&theta(1.0, 0.5, 0.0));
        assert!(d.is_ok() && d.warnings.is_empty());
        let mut t = theta(1.0, 0.5, 0.0);
        t.beta = 1.0;
        assert!(!check_parameters(&t).is_ok());
    }

    fn pair_population(x: [f64; 2]) -> Population {
        Population::new(vec![
            Individual { id: 0, group: 1, x: vec![x[0]], nest: None },
            Individual { id: 1, group: 1, x: vec![x[1]], nest: None },
        ])
        .unwrap()
    }

    #[test]
    fn simulation_without_peers_returns_own_effect() {
        let pop = Population::new(
            (0..12)
                .map(|i| Individual { id: i, group: i / 3, x: vec![i as f64 * 0.25 - 1.0], nest: None })
                .collect(),
        )
        .unwrap();
        let ds = simulate_outcomes(&pop, &theta(1.0, 0.0, 0.0), 3).unwrap();
        for (r, ind) in ds.rows().iter().zip(pop.individuals()) {
            assert_relative_eq!(r.y, ind.x[0], epsilon = 1e-14);
            assert_eq!(r.true_size, Some(3));
        }
    }

    #[test]
    fn two_by_two_system_by_hand() {
        // y1 = 0.5 y2 + 1, y2 = 0.5 y1  =>  y = (4/3, 2/3)
        let pop = pair_population([0.0, 0.0]);
        let t = theta(0.0, 0.0, 0.5);
        let alpha = BTreeMap::from([(1u64, 0.0)]);
        let ds = simulate_outcomes_from_draws(&pop, &t, &alpha, &[1.0, 0.0]).unwrap();
        assert_relative_eq!(ds.rows()[0].y, 4.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(ds.rows()[1].y, 2.0 / 3.0, epsilon = 1e-15);
        let y: Vec<f64> = ds.rows().iter().map(|r| r.y).collect();
        let res = structural_residuals(&pop, &t, &y, &alpha).unwrap();
        assert_relative_eq!(res[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(res[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn simulated_groups_satisfy_structural_equation() {
        // groups of 2..=9 members
        let mut inds = Vec::new();
        let mut id = 0;
        for g in 0..40u64 {
            for _ in 0..(2 + g % 8) {
                let v = id as f64;
                inds.push(Individual { id, group: g, x: vec![v.sin(), v.cos()], nest: None });
                id += 1;
            }
        }
        let pop = Population::new(inds).unwrap();
        let t = StructuralParams::new(vec![1.0, -0.3], vec![0.5, 0.2], 0.7)
            .unwrap()
            .with_group_effect(GroupEffect { mean: AlphaMean::GroupMeanOfX { covariate: 1 }, variance: 2.0 })
            .with_sigma2(1.5);
        let key = ReplicationKey::from_seed(9);
        let sim = simulate_outcomes_with(
            &pop,
            &t,
            &mut key.stream(StreamRole::GroupEffects),
            &mut key.stream(StreamRole::Idiosyncratic),
        )
        .unwrap();
        let y: Vec<f64> = sim.dataset.rows().iter().map(|r| r.y).collect();
        let res = structural_residuals(&pop, &t, &y, &sim.alpha).unwrap();
        for (r, e) in res.iter().zip(&sim.epsilon) {
            assert!((r - e).abs() <= 1e-10);
        }
    }

    #[test]
    fn within_transform_examples() {
        assert_eq!(within_transform(&[2.0, 2.0, 2.0], &[5, 5, 5]).unwrap(), vec![0.0; 3]);
        assert_eq!(within_transform(&[1.0, 3.0], &[1, 1]).unwrap(), vec![-1.0, 1.0]);
        assert_eq!(within_transform(&[7.0], &[3]).unwrap(), vec![0.0]);
        assert!(within_transform(&[1.0], &[1, 2]).is_err());
    }

    #[test]
    fn dataset_rejects_broken_nesting() {
        let row = |id, g, g2| Row { id, group: g, group2: Some(g2), true_size: None, y: 0.0, x: vec![0.0] };
        assert!(Dataset::new(vec![row(0, 1, 10), row(1, 1, 11)]).is_err());
        assert!(Dataset::new(vec![row(0, 1, 10), row(1, 1, 10), row(2, 2, 10)]).is_ok());
    }

    proptest! {
        #[test]
        fn pi_is_within_transform_of_reduced_form(n in 2u64..60, g in -3.0..3.0f64, d in -3.0..3.0f64, b in -0.99..0.99f64) {
            let t = theta(g, d, b);
            let lhs = pi(n, &t).unwrap()[0];
            let rhs = pi2(n, &t).unwrap()[0] - pi1(n, &t).unwrap()[0];
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }

        #[test]
        fn slope_gradient_matches_central_differences(n in 2u64..30, g in -2.0..2.0f64, d in -2.0..2.0f64, b in -0.9..0.9f64) {
            let grad = reduced_slope_gradient(n, g, d, b);
            let h = 1e-6;
            let fd = [
                (reduced_slope(n, g + h, d, b) - reduced_slope(n, g - h, d, b)) / (2.0 * h),
                (reduced_slope(n, g, d + h, b) - reduced_slope(n, g, d - h, b)) / (2.0 * h),
                (reduced_slope(n, g, d, b + h) - reduced_slope(n, g, d, b - h)) / (2.0 * h),
            ];
            for (a, f) in grad.iter().zip(fd) {
                prop_assert!((a - f).abs() <= 1e-6 * a.abs().max(1e-3));
            }
        }

        #[test]
        fn within_transform_zero_sums_and_idempotent(values in proptest::collection::vec(-100.0..100.0f64, 1..80), seed in 0u64..1000) {
            let groups: Vec<u64> = (0..values.len() as u64).map(|i| (i * 7 + seed) % 9).collect();
            let once = within_transform(&values, &groups).unwrap();
            let twice = within_transform(&once, &groups).unwrap();
            let mut sums: HashMap<u64, f64> = HashMap::new();
            for (v, g) in once.iter().zip(&groups) {
                *sums.entry(*g).or_default() += v;
            }
            for s in sums.values() {
                prop_assert!(s.abs() <= 1e-12 * 100.0 * values.len() as f64);
            }
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
