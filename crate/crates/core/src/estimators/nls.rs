//! Least-squares engine over cell statistics.

use nalgebra::{DMatrix, DVector};

use super::cells::{predict, Cell, Layout};
use crate::error::{Error, Result};
use crate::model::BETA_BOUND;
use crate::optim::{minimize, Bounds, Evaluation, Options};

const BETA_STARTS: [f64; 3] = [-0.5, 0.0, 0.5];
const PSI_STARTS: [f64; 2] = [0.25, 0.75];

#[derive(Debug, Clone)]
pub struct CellFit {
    pub params: DVector<f64>,
    pub ssr: f64,
    pub converged: bool,
    pub iterations: usize,
    pub starts_used: usize,
    /// `sum_c J_c' (Sxy_c - Sxx_c f_c) / N`: the normal equations at the estimate.
    pub moments: DVector<f64>,
    pub projected_gradient: f64,
}

pub fn bounds(layout: &Layout) -> Bounds {
    let mut lo = vec![f64::NEG_INFINITY; layout.len()];
    let mut hi = vec![f64::INFINITY; layout.len()];
    if let Some(i) = layout.beta_index() {
        lo[i] = -BETA_BOUND;
        hi[i] = BETA_BOUND;
    }
    if let Some(i) = layout.psi_index() {
        lo[i] = 0.0;
        hi[i] = 1.0;
    }
    Bounds::new(lo, hi)
}

/// Half the sum of squared residuals divided by `n`, with its gradient and
/// Gauss-Newton Hessian. The optimizer works with `n = 1` so its gradient
/// tolerance does not loosen as the sample grows.
pub fn evaluate(cells: &[Cell], layout: &Layout, n: f64, p: &DVector<f64>) -> Evaluation {
    let dim = layout.len();
    let mut value = 0.0;
    let mut gradient = DVector::zeros(dim);
    let mut hessian = DMatrix::zeros(dim, dim);
    for c in cells {
        let (f, jac) = predict(&c.prediction, layout, p);
        let sf = &c.sxx * &f;
        value += c.syy - 2.0 * f.dot(&c.sxy) + sf.dot(&f);
        gradient += jac.tr_mul(&(sf - &c.sxy));
        hessian += jac.tr_mul(&(&c.sxx * &jac));
    }
    Evaluation {
        value: 0.5 * value / n,
        gradient: gradient / n,
        hessian: hessian / n,
    }
}

/// Exact least squares in `(gamma, delta)` with `beta` and `psi` held at their values in `p`.
fn profile_start(cells: &[Cell], layout: &Layout, p: &DVector<f64>) -> Result<DVector<f64>> {
    let lin = 2 * layout.k;
    let mut p0 = p.clone();
    p0.rows_mut(0, lin).fill(0.0);
    let mut h = DMatrix::zeros(lin, lin);
    let mut b = DVector::zeros(lin);
    for c in cells {
        let (_, jac) = predict(&c.prediction, layout, &p0);
        let j = jac.columns(0, lin);
        h += j.tr_mul(&(&c.sxx * j));
        b += j.tr_mul(&c.sxy);
    }
    let sol = h
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&b))
        .or_else(|| h.lu().solve(&b))
        .ok_or_else(|| {
            Error::data("own and contextual effects are not separately identified (fewer than two usable group sizes)")
        })?;
    p0.rows_mut(0, lin).copy_from(&sol);
    Ok(p0)
}

/// Multi-start fit; returns the start with the smallest criterion.
pub fn fit(cells: &[Cell], layout: &Layout, n_rows: usize) -> Result<CellFit> {
    let n = n_rows as f64;
    let bounds = bounds(layout);
    let opts = Options::default();
    let betas: &[f64] = if layout.beta_free { &BETA_STARTS } else { &[0.0] };
    let psis: &[f64] = if layout.has_psi { &PSI_STARTS } else { &[1.0] };
    let mut best: Option<crate::optim::Minimum> = None;
    let mut iterations = 0;
    let mut starts = 0;
    for &b in betas {
        for &s in psis {
            let mut p = DVector::zeros(layout.len());
            if let Some(i) = layout.beta_index() {
                p[i] = b;
            }
            if let Some(i) = layout.psi_index() {
                p[i] = s;
            }
            let p = profile_start(cells, layout, &p)?;
            let m = minimize(|x| Ok(evaluate(cells, layout, 1.0, x)), p, &bounds, &opts)?;
            iterations += m.iterations;
            starts += 1;
            if best.as_ref().is_none_or(|bm| m.value < bm.value) {
                best = Some(m);
            }
        }
    }
    let best = best.expect("at least one start");
    let ev = evaluate(cells, layout, n, &best.x);
    Ok(CellFit {
        ssr: 2.0 * n * ev.value,
        converged: best.converged,
        iterations,
        starts_used: starts,
        moments: -ev.gradient,
        projected_gradient: best.projected_gradient,
        params: best.x,
    })
}
