//! Levenberg–Marquardt for small nonlinear least-squares problems.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Relative objective decrease treated as converged.
    pub tol: f64,
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub x: DVector<f64>,
    /// `‖r(x)‖²`.
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Minimises `‖r(x)‖²` where `model(x)` returns the residual vector and its
/// Jacobian. Returns `None` if the model is non-finite at the start point.
pub fn levenberg_marquardt<F>(x0: DVector<f64>, opts: LmOptions, mut model: F) -> Option<LmOutcome>
where
    F: FnMut(&DVector<f64>) -> Option<(DVector<f64>, DMatrix<f64>)>,
{
    let mut x = x0;
    let (mut r, mut jac) = model(&x).filter(|(r, j)| finite(r) && j.iter().all(|v| v.is_finite()))?;
    let mut f = r.norm_squared();
    let f0 = f;
    let n = x.len();
    let mut lambda = {
        let jtj = jac.transpose() * &jac;
        1e-3 * (0..n).map(|i| jtj[(i, i)]).fold(0.0, f64::max).max(1e-300)
    };
    for iter in 0..opts.max_iter {
        if f <= f0 * 1e-30 || f == 0.0 {
            return Some(LmOutcome { x, objective: f, converged: true, iterations: iter });
        }
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * &r;
        if stationary(&grad, &jac, &r) {
            return Some(LmOutcome { x, objective: f, converged: true, iterations: iter });
        }
        let mut accepted = false;
        while lambda < 1e20 {
            let mut lhs = jtj.clone();
            for i in 0..n {
                lhs[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let step = match lhs.cholesky() {
                Some(ch) => -ch.solve(&grad),
                None => {
                    lambda *= 4.0;
                    continue;
                }
            };
            let trial = &x + &step;
            match model(&trial).filter(|(r, j)| finite(r) && j.iter().all(|v| v.is_finite())) {
                Some((r_new, j_new)) if r_new.norm_squared() < f => {
                    let f_new = r_new.norm_squared();
                    let decrease = f - f_new;
                    let small_step = step.norm() <= 1e-13 * (1.0 + x.norm());
                    x = trial;
                    r = r_new;
                    jac = j_new;
                    let f_old = f;
                    f = f_new;
                    lambda = (lambda / 3.0).max(1e-300);
                    accepted = true;
                    if small_step || decrease <= opts.tol * f_old {
                        let grad = jac.transpose() * &r;
                        if small_step || stationary_loose(&grad, &jac, &r) {
                            return Some(LmOutcome { x, objective: f, converged: true, iterations: iter + 1 });
                        }
                    }
                    break;
                }
                _ => lambda *= 4.0,
            }
        }
        if !accepted {
            let grad = jac.transpose() * &r;
            let converged = stationary_loose(&grad, &jac, &r);
            return Some(LmOutcome { x, objective: f, converged, iterations: iter + 1 });
        }
    }
    Some(LmOutcome { x, objective: f, converged: false, iterations: opts.max_iter })
}

fn finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// `‖J'r‖ / (‖J‖‖r‖)`: cosine between the residual and the tangent space.
fn gradient_cosine(grad: &DVector<f64>, jac: &DMatrix<f64>, r: &DVector<f64>) -> f64 {
    let denom = jac.norm() * r.norm();
    if denom == 0.0 {
        0.0
    } else {
        grad.norm() / denom
    }
}

fn stationary(grad: &DVector<f64>, jac: &DMatrix<f64>, r: &DVector<f64>) -> bool {
    gradient_cosine(grad, jac, r) <= 1e-12
}

fn stationary_loose(grad: &DVector<f64>, jac: &DMatrix<f64>, r: &DVector<f64>) -> bool {
    gradient_cosine(grad, jac, r) <= 1e-6
}
