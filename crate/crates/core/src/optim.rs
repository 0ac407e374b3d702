//! Box-constrained damped Newton / Levenberg-Marquardt.
//!
//! The caller supplies value, gradient and a (possibly approximate) Hessian;
//! for least squares the Hessian is `J'J`. Variables sitting on a bound with
//! the gradient pushing outward are frozen for the step, the rest take a
//! Marquardt-damped Newton step that is then projected back onto the box.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Quadratic model of the objective at a point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Options {
    /// Stop when the projected gradient's max-norm falls below this.
    pub gradient_tol: f64,
    /// Stop when an accepted step is shorter than this (relative to `1 + |x|`).
    pub step_tol: f64,
    pub max_iterations: usize,
    /// Projected-gradient level reported as converged.
    pub converged_tol: f64,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            gradient_tol: 1e-9,
            step_tol: 1e-12,
            max_iterations: 500,
            converged_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub value: f64,
    pub projected_gradient: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Box `[lower, upper]`; infinite entries mean unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        assert!(lower.iter().zip(&upper).all(|(l, u)| l <= u));
        Self {
            lower: DVector::from_vec(lower),
            upper: DVector::from_vec(upper),
        }
    }

    pub fn unbounded(n: usize) -> Self {
        Self::new(vec![f64::NEG_INFINITY; n], vec![f64::INFINITY; n])
    }

    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        x.zip_zip_map(&self.lower, &self.upper, |v, l, u| v.clamp(l, u))
    }

    /// Gradient with components that point out of the box at an active bound zeroed.
    pub fn projected_gradient(&self, x: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| {
            if self.blocks(x, g, i) {
                0.0
            } else {
                g[i]
            }
        })
    }

    fn blocks(&self, x: &DVector<f64>, g: &DVector<f64>, i: usize) -> bool {
        (x[i] <= self.lower[i] && g[i] > 0.0) || (x[i] >= self.upper[i] && g[i] < 0.0)
    }
}

/// Minimizes `f` over the box starting from the projection of `x0`.
///
/// A failed evaluation at a trial point is treated as an uphill step; a
/// failure at the start point is returned.
pub fn minimize<F>(mut f: F, x0: DVector<f64>, bounds: &Bounds, opts: &Options) -> Result<Minimum>
where
    F: FnMut(&DVector<f64>) -> Result<Evaluation>,
{
    let n = x0.len();
    if bounds.lower.len() != n {
        return Err(Error::param("bounds and start point differ in dimension"));
    }
    let mut x = bounds.project(&x0);
    let mut cur = f(&x)?;
    if !cur.value.is_finite() {
        return Err(Error::numerical("objective is not finite at the start point"));
    }
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut pg = bounds.projected_gradient(&x, &cur.gradient).amax();

    while iterations < opts.max_iterations && pg > opts.gradient_tol {
        iterations += 1;
        let free: Vec<usize> = (0..n).filter(|&i| !bounds.blocks(&x, &cur.gradient, i)).collect();
        let mut accepted = false;
        let mut small_step = false;
        while lambda < 1e16 {
            let Some(step) = damped_step(&cur, &free, lambda) else {
                lambda = (lambda * 10.0).max(1e-8);
                continue;
            };
            let mut trial = x.clone();
            for (k, &i) in free.iter().enumerate() {
                trial[i] += step[k];
            }
            let trial = bounds.project(&trial);
            let moved = (&trial - &x).amax();
            if moved <= opts.step_tol * (1.0 + x.amax()) {
                small_step = true;
                break;
            }
            match f(&trial) {
                Ok(ev) if ev.value.is_finite() && improves(&cur, &ev, pg, bounds, &trial) => {
                    x = trial;
                    cur = ev;
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = true;
                    break;
                }
                _ => lambda *= 4.0,
            }
        }
        pg = bounds.projected_gradient(&x, &cur.gradient).amax();
        if !accepted || small_step {
            break;
        }
    }

    Ok(Minimum {
        converged: pg <= opts.converged_tol,
        x,
        value: cur.value,
        projected_gradient: pg,
        iterations,
    })
}

/// A trial is accepted when it lowers the objective, or when the change is
/// within rounding of the objective and the projected gradient shrinks. Near
/// the optimum the objective is flat to machine precision long before the
/// parameters are, so the gradient decides there.
fn improves(cur: &Evaluation, trial: &Evaluation, pg: f64, bounds: &Bounds, x: &DVector<f64>) -> bool {
    let flat = 8.0 * f64::EPSILON * cur.value.abs().max(trial.value.abs());
    if trial.value < cur.value - flat {
        return true;
    }
    trial.value <= cur.value + flat && bounds.projected_gradient(x, &trial.gradient).amax() < pg
}

/// Solves `(H_ff + lambda * D) d = -g_f` on the free variables, with `D` the
/// Marquardt scaling `max(diag(H), 1e-12)`. `None` if the system is not
/// positive definite.
fn damped_step(ev: &Evaluation, free: &[usize], lambda: f64) -> Option<DVector<f64>> {
    let m = free.len();
    if m == 0 {
        return None;
    }
    let scale = free
        .iter()
        .map(|&i| ev.hessian[(i, i)].abs())
        .fold(0.0, f64::max)
        .max(1e-12);
    let h = DMatrix::from_fn(m, m, |a, b| {
        let v = ev.hessian[(free[a], free[b])];
        if a == b {
            v + lambda * v.abs().max(1e-12 * scale)
        } else {
            v
        }
    });
    let g = DVector::from_fn(m, |a, _| -ev.gradient[free[a]]);
    let chol = h.cholesky()?;
    let d = chol.solve(&g);
    d.iter().all(|v| v.is_finite()).then_some(d)
}

/// Central finite-difference Jacobian of a vector function (`rows x x.len()`),
/// switching to one-sided differences at the box boundary.
pub fn fd_jacobian<F>(f: F, x: &DVector<f64>, bounds: &Bounds) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let base = f(x)?;
    let mut jac = DMatrix::zeros(base.len(), x.len());
    for j in 0..x.len() {
        let h = 1e-6 * (1.0 + x[j].abs());
        let up = x[j] + h <= bounds.upper[j];
        let down = x[j] - h >= bounds.lower[j];
        let col = match (up, down) {
            (true, true) => {
                let mut a = x.clone();
                let mut b = x.clone();
                a[j] += h;
                b[j] -= h;
                (f(&a)? - f(&b)?) / (2.0 * h)
            }
            (true, false) => {
                let mut a = x.clone();
                a[j] += h;
                (f(&a)? - &base) / h
            }
            (false, true) => {
                let mut b = x.clone();
                b[j] -= h;
                (&base - f(&b)?) / h
            }
            (false, false) => DVector::zeros(base.len()),
        };
        jac.set_column(j, &col);
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rosenbrock(x: &DVector<f64>) -> Result<Evaluation> {
        let (a, b) = (x[0], x[1]);
        let value = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let gradient = DVector::from_vec(vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ]);
        let hessian = DMatrix::from_row_slice(
            2,
            2,
            &[2.0 - 400.0 * (b - 3.0 * a * a), -400.0 * a, -400.0 * a, 200.0],
        );
        Ok(Evaluation { value, gradient, hessian })
    }

    #[test]
    fn unconstrained_rosenbrock() {
        let m = minimize(rosenbrock, DVector::from_vec(vec![-1.2, 1.0]), &Bounds::unbounded(2), &Options::default()).unwrap();
        assert!(m.converged);
        assert_relative_eq!(m.x[0], 1.0, epsilon = 1e-8);
        assert_relative_eq!(m.x[1], 1.0, epsilon = 1e-8);
    }

    #[test]
    fn active_bound_is_hit_exactly() {
        // min (x - 2)^2 + (y + 1)^2 on [0, 1]^2 -> (1, 0)
        let f = |x: &DVector<f64>| {
            Ok(Evaluation {
                value: (x[0] - 2.0).powi(2) + (x[1] + 1.0).powi(2),
                gradient: DVector::from_vec(vec![2.0 * (x[0] - 2.0), 2.0 * (x[1] + 1.0)]),
                hessian: DMatrix::identity(2, 2) * 2.0,
            })
        };
        let b = Bounds::new(vec![0.0, 0.0], vec![1.0, 1.0]);
        let m = minimize(f, DVector::from_vec(vec![0.5, 0.5]), &b, &Options::default()).unwrap();
        assert_eq!(m.x.as_slice(), &[1.0, 0.0]);
        assert!(m.converged);
        assert_eq!(m.projected_gradient, 0.0);
    }

    #[test]
    fn start_is_projected() {
        let f = |x: &DVector<f64>| {
            Ok(Evaluation {
                value: x[0] * x[0],
                gradient: DVector::from_vec(vec![2.0 * x[0]]),
                hessian: DMatrix::from_element(1, 1, 2.0),
            })
        };
        let b = Bounds::new(vec![0.5], vec![3.0]);
        let m = minimize(f, DVector::from_vec(vec![10.0]), &b, &Options::default()).unwrap();
        assert_eq!(m.x[0], 0.5);
    }

    #[test]
    fn indefinite_hessian_is_damped() {
        // f = x^4 - x^2 starting at the local max 0.1 away: Hessian negative there
        let f = |x: &DVector<f64>| {
            let v = x[0];
            Ok(Evaluation {
                value: v.powi(4) - v * v,
                gradient: DVector::from_vec(vec![4.0 * v.powi(3) - 2.0 * v]),
                hessian: DMatrix::from_element(1, 1, 12.0 * v * v - 2.0),
            })
        };
        let m = minimize(f, DVector::from_vec(vec![0.1]), &Bounds::unbounded(1), &Options::default()).unwrap();
        assert_relative_eq!(m.x[0], 0.5f64.sqrt(), epsilon = 1e-8);
    }

    #[test]
    fn fd_jacobian_one_sided_at_bounds() {
        let f = |x: &DVector<f64>| Ok(DVector::from_vec(vec![x[0] * x[0], x[0] * x[1]]));
        let b = Bounds::new(vec![0.0, 0.0], vec![1.0, 1.0]);
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let j = fd_jacobian(f, &x, &b).unwrap();
        assert_relative_eq!(j[(0, 0)], 2.0, epsilon = 1e-5);
        assert_relative_eq!(j[(1, 0)], 0.0, epsilon = 1e-5);
        assert_relative_eq!(j[(1, 1)], 1.0, epsilon = 1e-5);
    }
}
