//! Identification diagnostics and the closed-form inversion of the
//! uncertain-group reduced form.
//!
//! Under group uncertainty the reduced-form slope for a room of size `n1` on a
//! floor of size `n2` is `psi * pi(n1) + (1 - psi) * pi(n2)`. Sizes that
//! co-occur form a bipartite graph (room sizes on the left, floor sizes on the
//! right); within a connected component the two-way decomposition
//! `mu(n1) + mu(n2)` is pinned down up to a constant.

use std::collections::{BTreeMap, BTreeSet};

use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{reduced_slope, Dataset, StructuralParams};
use crate::sampling::deconvolve_exact;

/// Bipartite graph of jointly observed `(n1, n2)` size pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportGraph {
    /// Distinct support points of the smaller candidate's size, ascending.
    pub left: Vec<u64>,
    /// Distinct support points of the larger candidate's size, ascending.
    pub right: Vec<u64>,
    /// `(n1, n2, count)` with positive count, sorted by `(n1, n2)`.
    pub edges: Vec<(u64, u64, u64)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    pub left: Vec<u64>,
    pub right: Vec<u64>,
}

/// Builds the graph from `(n1, n2, count)` triples; zero counts add nothing.
pub fn build_support_graph(pairs: &[(u64, u64, u64)]) -> Result<SupportGraph> {
    let mut edges: BTreeMap<(u64, u64), u64> = BTreeMap::new();
    for &(n1, n2, count) in pairs {
        if n1 < 2 {
            return Err(Error::data(format!("smaller group size {n1} < 2")));
        }
        if n1 > n2 {
            return Err(Error::data(format!("group of size {n1} cannot nest in a group of size {n2}")));
        }
        if count > 0 {
            *edges.entry((n1, n2)).or_insert(0) += count;
        }
    }
    let left: BTreeSet<u64> = edges.keys().map(|&(a, _)| a).collect();
    let right: BTreeSet<u64> = edges.keys().map(|&(_, b)| b).collect();
    Ok(SupportGraph {
        left: left.into_iter().collect(),
        right: right.into_iter().collect(),
        edges: edges.into_iter().map(|((a, b), c)| (a, b, c)).collect(),
    })
}

/// Connected components ordered by their smallest left vertex.
pub fn connected_components(g: &SupportGraph) -> Vec<Component> {
    let nl = g.left.len();
    let index_l = |v: u64| g.left.binary_search(&v).expect("edge endpoint in left set");
    let index_r = |v: u64| nl + g.right.binary_search(&v).expect("edge endpoint in right set");
    let mut uf = UnionFind::<usize>::new(nl + g.right.len());
    for &(a, b, _) in &g.edges {
        uf.union(index_l(a), index_r(b));
    }
    let mut groups: BTreeMap<usize, Component> = BTreeMap::new();
    let mut order: Vec<usize> = Vec::new();
    for (i, &v) in g.left.iter().enumerate() {
        let root = uf.find(i);
        let c = groups.entry(root).or_insert_with(|| {
            order.push(root);
            Component { left: vec![], right: vec![] }
        });
        c.left.push(v);
    }
    for (j, &v) in g.right.iter().enumerate() {
        let root = uf.find(nl + j);
        groups
            .get_mut(&root)
            .expect("every right vertex has an edge to a left vertex")
            .right
            .push(v);
    }
    order.into_iter().map(|r| groups.remove(&r).unwrap()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IdentificationCase {
    KnownSize,
    UnknownSize,
    UncertainGroups,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub condition: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationReport {
    pub case: IdentificationCase,
    pub passed: bool,
    pub reasons: Vec<ConditionCheck>,
}

/// What is known about group sizes.
#[derive(Debug, Clone, PartialEq)]
pub enum IdentificationInput {
    /// Support of the (observed) true group size.
    KnownSize { support: Vec<u64> },
    /// Support of the recovered true-size distribution; `bounded` is false
    /// when no finite upper bound could be established.
    UnknownSize { support: Vec<u64>, bounded: bool },
    UncertainGroups { graph: SupportGraph },
}

fn check(condition: &str, passed: bool, detail: String) -> ConditionCheck {
    ConditionCheck {
        condition: condition.to_string(),
        passed,
        detail,
    }
}

fn distinct(v: &[u64]) -> usize {
    v.iter().collect::<BTreeSet<_>>().len()
}

/// Checks the sufficient conditions for point identification, plus
/// `gamma * beta + delta != 0` when a parameter candidate is supplied.
pub fn check_identification(input: &IdentificationInput, theta: Option<&StructuralParams>) -> IdentificationReport {
    let mut reasons = Vec::new();
    let case = match input {
        IdentificationInput::KnownSize { support } => {
            let k = distinct(support);
            reasons.push(check("support-has-three-sizes", k >= 3, format!("{k} distinct group sizes {support:?}")));
            IdentificationCase::KnownSize
        }
        IdentificationInput::UnknownSize { support, bounded } => {
            reasons.push(check(
                "support-bounded",
                *bounded,
                match support.iter().max() {
                    Some(m) if *bounded => format!("largest size {m}"),
                    _ => "no finite upper bound".to_string(),
                },
            ));
            let k = distinct(support);
            reasons.push(check("support-has-three-sizes", k >= 3, format!("{k} distinct group sizes {support:?}")));
            IdentificationCase::UnknownSize
        }
        IdentificationInput::UncertainGroups { graph } => {
            let (l, r) = (graph.left.len(), graph.right.len());
            reasons.push(check("smaller-group-support-has-three-sizes", l >= 3, format!("{l} sizes {:?}", graph.left)));
            reasons.push(check("larger-group-support-has-three-sizes", r >= 3, format!("{r} sizes {:?}", graph.right)));
            let comps = connected_components(graph);
            let good = comps.iter().find(|c| c.left.len() >= 3 || c.right.len() >= 3);
            reasons.push(check(
                "component-with-three-sizes",
                good.is_some(),
                match good {
                    Some(c) => format!("component left {:?} right {:?}", c.left, c.right),
                    None => format!("{} components, none with three sizes on one side", comps.len()),
                },
            ));
            IdentificationCase::UncertainGroups
        }
    };
    if let Some(theta) = theta {
        for (k, (g, d)) in theta.gamma.iter().zip(&theta.delta).enumerate() {
            let v = g * theta.beta + d;
            reasons.push(check(
                "peer-effects-do-not-offset",
                v.abs() > 1e-12 * (1.0 + g.abs() + d.abs()),
                format!("gamma*beta + delta = {v} for covariate {k}"),
            ));
        }
    }
    IdentificationReport {
        case,
        passed: reasons.iter().all(|c| c.passed),
        reasons,
    }
}

/// Picks the case from the columns present in `data` and runs the check.
///
/// Unknown sizes are assessed on the true-size distribution recovered from the
/// observed size histogram; if that fails, on the distinct observed sizes of
/// groups with at least two members.
pub fn report_for_dataset(data: &Dataset, theta: Option<&StructuralParams>) -> Result<IdentificationReport> {
    if data.is_empty() {
        return Err(Error::data("dataset has no rows"));
    }
    if data.has_group2() {
        let g1 = data.group_sizes();
        let g2 = data.group2_sizes();
        let mut pairs: BTreeMap<(u64, u64), u64> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for r in data.rows() {
            if seen.insert(r.group) {
                let n1 = g1[&r.group];
                if n1 >= 2 {
                    *pairs.entry((n1, g2[&r.group2.unwrap()])).or_insert(0) += 1;
                }
            }
        }
        let triples: Vec<_> = pairs.into_iter().map(|((a, b), c)| (a, b, c)).collect();
        let graph = build_support_graph(&triples)?;
        return Ok(check_identification(&IdentificationInput::UncertainGroups { graph }, theta));
    }
    if data.has_true_size() {
        let support: BTreeSet<u64> = data.rows().iter().filter_map(|r| r.true_size).collect();
        let support = support.into_iter().collect();
        return Ok(check_identification(&IdentificationInput::KnownSize { support }, theta));
    }
    let counts = data.size_counts();
    let total: u64 = counts.iter().sum();
    let p: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let (support, note) = match deconvolve_exact(&p) {
        Ok(d) => (d.q.support(), format!("recovered sampling probability {:.6}", d.rho)),
        Err(e) => (
            (2..=counts.len() as u64).filter(|&n| counts[n as usize - 1] > 0).collect(),
            format!("deconvolution failed ({e}); using observed sizes"),
        ),
    };
    let mut report = check_identification(&IdentificationInput::UnknownSize { support, bounded: true }, theta);
    report.reasons.push(check("size-distribution-recovery", true, note));
    Ok(report)
}

/// Structural parameters recovered from one connected component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertainRecovery {
    pub beta: f64,
    /// `psi * (gamma * beta + delta)`.
    pub psi_times_gbd: f64,
    pub gamma: f64,
    pub delta: f64,
    pub psi: f64,
}

/// Inverts `mu(n1) = psi * pi(n1)`, `mu(n2) = (1 - psi) * pi(n2)` for three
/// smaller-group sizes `left` (distinct) and one larger-group size `right`.
///
/// `beta` and `psi * (gamma*beta + delta)` only use differences of
/// `Delta_i = mu(n1_i) + mu(n2)` and so do not depend on how the constant is
/// split between the two sides; `psi` then comes from `mu(n2)`.
pub fn recover_uncertain_closed_form(left: [(u64, f64); 3], right: (u64, f64)) -> Result<UncertainRecovery> {
    let mut left = left;
    left.sort_by_key(|&(n, _)| n);
    let [(n11, m1), (n12, m2), (n13, m3)] = left;
    if n11 < 2 || n11 == n12 || n12 == n13 {
        return Err(Error::param(format!("need three distinct sizes >= 2, got {n11}, {n12}, {n13}")));
    }
    let (n2, mu2) = right;
    if n2 < 2 {
        return Err(Error::param(format!("larger group size {n2} < 2")));
    }
    let (a1, a2, a3, b) = (n11 as f64, n12 as f64, n13 as f64, n2 as f64);
    let d1 = m1 + mu2;
    let d2 = m2 + mu2;
    let d3 = m3 + mu2;
    if d1 == d3 {
        return Err(Error::numerical(
            "Delta_1 = Delta_3: psi * (gamma*beta + delta) = 0, peer effects not identified",
        ));
    }
    let ratio = (d1 - d2) / (d1 - d3);
    let den = ratio * (a1 - a3) - (a1 - a2);
    if den == 0.0 {
        return Err(Error::numerical("degenerate size configuration for the endogenous effect"));
    }
    let beta = ((a1 - a2) * (a3 - 1.0) - ratio * (a1 - a3) * (a2 - 1.0)) / den;
    let k = (d1 - d2) * (a1 - 1.0 + beta) * (a2 - 1.0 + beta) / (a1 - a2);
    let pi_n2 = d1 - k * (a1 - b) / ((a1 - 1.0 + beta) * (b - 1.0 + beta));
    if pi_n2 == 0.0 {
        return Err(Error::numerical("pi(n2) = 0: cannot separate psi from the peer effects"));
    }
    let psi = 1.0 - mu2 / pi_n2;
    if psi == 0.0 {
        return Err(Error::numerical("psi = 0: the smaller group carries no information"));
    }
    let p = pi_n2 * (b - 1.0 + beta);
    let gamma = (k / psi + p) / (b - 1.0 + beta);
    let delta = k / psi - gamma * beta;
    Ok(UncertainRecovery {
        beta,
        psi_times_gbd: k,
        gamma,
        delta,
        psi,
    })
}

/// Same as [`recover_uncertain_closed_form`] with three larger-group sizes
/// and one smaller-group size.
pub fn recover_uncertain_closed_form_right(right: [(u64, f64); 3], left: (u64, f64)) -> Result<UncertainRecovery> {
    // Swapping sides maps psi to 1 - psi.
    let r = recover_uncertain_closed_form(right, left)?;
    Ok(UncertainRecovery {
        psi: 1.0 - r.psi,
        psi_times_gbd: (1.0 - r.psi) * r.psi_times_gbd / r.psi,
        ..r
    })
}

/// Closed-form recovery on a component, using its three smallest left sizes
/// (or three smallest right sizes) and reporting the worst mismatch of the
/// forward map on the remaining sizes of the component.
pub fn recover_on_component(
    component: &Component,
    mu_left: &BTreeMap<u64, f64>,
    mu_right: &BTreeMap<u64, f64>,
) -> Result<(UncertainRecovery, f64)> {
    let get = |m: &BTreeMap<u64, f64>, n: u64| {
        m.get(&n).copied().ok_or_else(|| Error::data(format!("no reduced-form value for size {n}")))
    };
    let rec = if component.left.len() >= 3 {
        let l = &component.left;
        let right = component.right[0];
        recover_uncertain_closed_form(
            [(l[0], get(mu_left, l[0])?), (l[1], get(mu_left, l[1])?), (l[2], get(mu_left, l[2])?)],
            (right, get(mu_right, right)?),
        )?
    } else if component.right.len() >= 3 {
        let r = &component.right;
        let left = component.left[0];
        recover_uncertain_closed_form_right(
            [(r[0], get(mu_right, r[0])?), (r[1], get(mu_right, r[1])?), (r[2], get(mu_right, r[2])?)],
            (left, get(mu_left, left)?),
        )?
    } else {
        return Err(Error::data("component needs three sizes on one side"));
    };
    let slope = |n: u64| reduced_slope(n, rec.gamma, rec.delta, rec.beta);
    let mut worst: f64 = 0.0;
    for &n in &component.left {
        if let Some(&m) = mu_left.get(&n) {
            worst = worst.max((m - rec.psi * slope(n)).abs());
        }
    }
    for &n in &component.right {
        if let Some(&m) = mu_right.get(&n) {
            worst = worst.max((m - (1.0 - rec.psi) * slope(n)).abs());
        }
    }
    Ok((rec, worst))
}
