//! Sufficient statistics for the least-squares criterion.
//!
//! Rows whose predicted slope is the same function of the parameters share a
//! cell. Within a cell the criterion only needs `Sxx = sum x x'`,
//! `Sxy = sum x y` and `Syy = sum y^2` of the demeaned data.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{reduced_slope, reduced_slope_gradient, within_transform, Dataset};

/// How a cell's predicted slope depends on the structural parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    /// `sum_m w_m pi(m)`; zero weights are dropped.
    Mixture(Vec<(u64, f64)>),
    /// `psi pi(small) + (1 - psi) pi(large)`.
    Uncertain { small: u64, large: u64 },
}

impl Prediction {
    pub fn size(n: u64) -> Self {
        Prediction::Mixture(vec![(n, 1.0)])
    }
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub prediction: Prediction,
    pub sxx: DMatrix<f64>,
    pub sxy: DVector<f64>,
    pub syy: f64,
    pub rows: usize,
}

/// Demeaned outcome and covariates, row-aligned with the dataset.
pub struct Demeaned {
    pub y: Vec<f64>,
    /// One vector per covariate.
    pub x: Vec<Vec<f64>>,
}

pub fn demean(data: &Dataset, groups: &[u64]) -> Result<Demeaned> {
    let y: Vec<f64> = data.rows().iter().map(|r| r.y).collect();
    let y = within_transform(&y, groups)?;
    let x = (0..data.k())
        .map(|k| {
            let col: Vec<f64> = data.rows().iter().map(|r| r.x[k]).collect();
            within_transform(&col, groups)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Demeaned { y, x })
}

/// Accumulates rows into cells keyed by `key(row index)`. Cells without
/// covariate variation are dropped.
pub fn build_cells<K: Ord + Clone>(
    d: &Demeaned,
    keys: &[K],
    prediction: impl Fn(&K) -> Prediction,
) -> Result<Vec<Cell>> {
    let k = d.x.len();
    let mut acc: BTreeMap<K, (DMatrix<f64>, DVector<f64>, f64, usize)> = BTreeMap::new();
    let mut xi = vec![0.0; k];
    for (i, key) in keys.iter().enumerate() {
        for (c, col) in d.x.iter().enumerate() {
            xi[c] = col[i];
        }
        let yi = d.y[i];
        let e = acc
            .entry(key.clone())
            .or_insert_with(|| (DMatrix::zeros(k, k), DVector::zeros(k), 0.0, 0));
        for a in 0..k {
            for b in 0..k {
                e.0[(a, b)] += xi[a] * xi[b];
            }
            e.1[a] += xi[a] * yi;
        }
        e.2 += yi * yi;
        e.3 += 1;
    }
    let cells: Vec<Cell> = acc
        .into_iter()
        .filter(|(_, (sxx, ..))| sxx.diagonal().iter().any(|&v| v > 0.0))
        .map(|(key, (sxx, sxy, syy, rows))| Cell {
            prediction: prediction(&key),
            sxx,
            sxy,
            syy,
            rows,
        })
        .collect();
    if cells.is_empty() {
        return Err(Error::data(
            "no usable rows: every group is a singleton or has no covariate variation",
        ));
    }
    Ok(cells)
}

/// Parameter vector layout `[gamma (K), delta (K), beta?, psi?]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub k: usize,
    pub beta_free: bool,
    pub has_psi: bool,
}

impl Layout {
    pub fn len(&self) -> usize {
        2 * self.k + usize::from(self.beta_free) + usize::from(self.has_psi)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn beta_index(&self) -> Option<usize> {
        self.beta_free.then_some(2 * self.k)
    }

    pub fn psi_index(&self) -> Option<usize> {
        self.has_psi.then_some(2 * self.k + usize::from(self.beta_free))
    }

    pub fn beta(&self, p: &DVector<f64>) -> f64 {
        self.beta_index().map_or(0.0, |i| p[i])
    }

    pub fn psi(&self, p: &DVector<f64>) -> f64 {
        self.psi_index().map_or(1.0, |i| p[i])
    }
}

/// Predicted slope vector (length K) and its Jacobian (K x P) for one cell.
pub fn predict(pred: &Prediction, layout: &Layout, p: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let k = layout.k;
    let beta = layout.beta(p);
    let mut f = DVector::zeros(k);
    let mut jac = DMatrix::zeros(k, layout.len());
    match pred {
        Prediction::Mixture(weights) => {
            for c in 0..k {
                let (g, d) = (p[c], p[k + c]);
                for &(m, w) in weights {
                    let [dg, dd, db] = reduced_slope_gradient(m, g, d, beta);
                    f[c] += w * reduced_slope(m, g, d, beta);
                    jac[(c, c)] += w * dg;
                    jac[(c, k + c)] += w * dd;
                    if let Some(bi) = layout.beta_index() {
                        jac[(c, bi)] += w * db;
                    }
                }
            }
        }
        Prediction::Uncertain { small, large } => {
            let psi = layout.psi(p);
            for c in 0..k {
                let (g, d) = (p[c], p[k + c]);
                let (ps, pl) = (reduced_slope(*small, g, d, beta), reduced_slope(*large, g, d, beta));
                let gs = reduced_slope_gradient(*small, g, d, beta);
                let gl = reduced_slope_gradient(*large, g, d, beta);
                f[c] = psi * ps + (1.0 - psi) * pl;
                jac[(c, c)] = psi * gs[0] + (1.0 - psi) * gl[0];
                jac[(c, k + c)] = psi * gs[1] + (1.0 - psi) * gl[1];
                if let Some(bi) = layout.beta_index() {
                    jac[(c, bi)] = psi * gs[2] + (1.0 - psi) * gl[2];
                }
                if let Some(si) = layout.psi_index() {
                    jac[(c, si)] = ps - pl;
                }
            }
        }
    }
    (f, jac)
}

/// Sum of squared residuals over all cells at `p`.
pub fn ssr(cells: &[Cell], layout: &Layout, p: &DVector<f64>) -> f64 {
    cells
        .iter()
        .map(|c| {
            let (f, _) = predict(&c.prediction, layout, p);
            c.syy - 2.0 * f.dot(&c.sxy) + (&c.sxx * &f).dot(&f)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Row;

    fn row(id: u64, group: u64, y: f64, x: f64) -> Row {
        Row { id, group, group2: None, true_size: None, y, x: vec![x] }
    }

    #[test]
    fn cell_sums_match_rowwise_residuals() {
        let data = Dataset::new(vec![
            row(1, 1, 1.0, 0.5),
            row(2, 1, 2.0, -1.0),
            row(3, 2, 0.3, 2.0),
            row(4, 2, -0.7, 1.0),
            row(5, 2, 1.1, 0.0),
            row(6, 3, 5.0, 1.0),
        ])
        .unwrap();
        let groups: Vec<u64> = data.rows().iter().map(|r| r.group).collect();
        let d = demean(&data, &groups).unwrap();
        let sizes = data.group_sizes();
        let keys: Vec<u64> = groups.iter().map(|g| sizes[g]).collect();
        let cells = build_cells(&d, &keys, |&n| Prediction::size(n)).unwrap();
        // the singleton group has no variation and is dropped
        assert_eq!(cells.len(), 2);

        let layout = Layout { k: 1, beta_free: true, has_psi: false };
        let p = DVector::from_vec(vec![0.9, 0.4, 0.2]);
        let direct: f64 = (0..data.len())
            .filter(|&i| keys[i] >= 2)
            .map(|i| {
                let n = keys[i];
                let slope = (0.9 - 0.4 / (n - 1) as f64) / (1.0 + 0.2 / (n - 1) as f64);
                (d.y[i] - d.x[0][i] * slope).powi(2)
            })
            .sum();
        assert!((ssr(&cells, &layout, &p) - direct).abs() < 1e-12);
    }

    #[test]
    fn jacobian_matches_differences() {
        let layout = Layout { k: 2, beta_free: true, has_psi: true };
        let p = DVector::from_vec(vec![0.9, -0.2, 0.4, 0.1, 0.3, 0.6]);
        for pred in [
            Prediction::Uncertain { small: 2, large: 7 },
            Prediction::Mixture(vec![(2, 0.3), (3, 0.7)]),
        ] {
            let (_, jac) = predict(&pred, &layout, &p);
            for j in 0..layout.len() {
                let h = 1e-6;
                let mut a = p.clone();
                let mut b = p.clone();
                a[j] += h;
                b[j] -= h;
                let fd = (predict(&pred, &layout, &a).0 - predict(&pred, &layout, &b).0) / (2.0 * h);
                for c in 0..2 {
                    assert!((jac[(c, j)] - fd[c]).abs() < 1e-8, "{pred:?} col {j}");
                }
            }
        }
    }

    #[test]
    fn no_variation_is_an_error() {
        let data = Dataset::new(vec![row(1, 1, 1.0, 0.5), row(2, 2, 2.0, -1.0)]).unwrap();
        let groups: Vec<u64> = data.rows().iter().map(|r| r.group).collect();
        let d = demean(&data, &groups).unwrap();
        assert!(build_cells(&d, &[1u64, 1], |&n| Prediction::size(n + 1)).is_err());
    }
}
