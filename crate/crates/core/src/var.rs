//! Reduced-form bivariate VAR with system-AIC lag selection.
//!
//! `y_t = c̃ + Φ̃_1 y_{t-1} + … + Φ̃_p y_{t-p} + η_t`, fitted equation by
//! equation with an intercept. Candidate lag orders `0..=max_lag` are
//! compared on the common sample `t = max_lag..T`, the selected order is then
//! refitted on `t = p..T`.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::ith::{RegimePartition, StateMoments, MIN_STATE_OBS};
use crate::linalg::{least_squares, r_squared};

pub const DEFAULT_MAX_LAG: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct VarFit {
    pub window_id: Option<String>,
    pub lag_order: usize,
    pub intercept: Vector2<f64>,
    pub coefs: Vec<Matrix2<f64>>,
    /// Residual `i` belongs to window second `lag_order + i`.
    pub residuals: Vec<Vector2<f64>>,
    /// Per-equation R² (return, flow).
    pub r_squared: [f64; 2],
    /// System AIC for each candidate order `0..=max_lag`.
    pub aic: Vec<f64>,
    pub window_len: usize,
}

impl VarFit {
    /// ML residual covariance `(1/n) Σ η η'`.
    pub fn residual_covariance(&self) -> Matrix2<f64> {
        let n = self.residuals.len() as f64;
        self.residuals.iter().map(|e| e * e.transpose()).sum::<Matrix2<f64>>() / n
    }
}

fn design(window: &[[f64; 2]], p: usize, start: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = window.len() - start;
    let k = 1 + 2 * p;
    let mut x = DMatrix::zeros(n, k);
    let mut y = DMatrix::zeros(n, 2);
    for (row, t) in (start..window.len()).enumerate() {
        x[(row, 0)] = 1.0;
        for j in 1..=p {
            x[(row, 2 * j - 1)] = window[t - j][0];
            x[(row, 2 * j)] = window[t - j][1];
        }
        y[(row, 0)] = window[t][0];
        y[(row, 1)] = window[t][1];
    }
    (x, y)
}

fn log_det_cov(residuals: &DMatrix<f64>) -> Option<f64> {
    let n = residuals.nrows() as f64;
    let s = residuals.transpose() * residuals / n;
    let det = s[(0, 0)] * s[(1, 1)] - s[(0, 1)] * s[(1, 0)];
    let scale = s[(0, 0)] * s[(1, 1)];
    (det > 1e-12 * scale && det > 0.0).then(|| det.ln())
}

/// Gaussian system AIC, `−2 log L + 2k` with `k` the total coefficient count.
fn system_aic(log_det: f64, n: usize, p: usize) -> f64 {
    let n = n as f64;
    let k = (2 * (1 + 2 * p)) as f64;
    n * (2.0 * (2.0 * std::f64::consts::PI).ln() + log_det + 2.0) + 2.0 * k
}

/// Fits the VAR with the AIC-selected lag order in `0..=max_lag`.
pub fn fit_var(window: &[[f64; 2]], max_lag: usize) -> Result<VarFit> {
    let need = 2 * (2 * max_lag + 1);
    if window.len() <= need {
        return Err(Error::InvalidInput(format!(
            "window of {} seconds is too short for max_lag {max_lag} (need more than {need})",
            window.len()
        )));
    }
    if window.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
        return Err(Error::InvalidInput("non-finite observation in window".into()));
    }
    let n_common = window.len() - max_lag;
    let mut aic = Vec::with_capacity(max_lag + 1);
    for p in 0..=max_lag {
        let (x, y) = design(window, p, max_lag);
        let fit = least_squares(&x, &y).map_err(degenerate)?;
        let ld = log_det_cov(&fit.residuals)
            .ok_or_else(|| Error::DegenerateWindow(format!("singular residual covariance at lag {p}")))?;
        aic.push(system_aic(ld, n_common, p));
    }
    let p = aic
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut fit = fit_var_order(window, p)?;
    fit.aic = aic;
    Ok(fit)
}

fn degenerate(e: Error) -> Error {
    match e {
        Error::Collinearity { columns } => {
            Error::DegenerateWindow(format!("singular regressor cross-product (columns {columns:?})"))
        }
        other => other,
    }
}

/// Fits the VAR at a fixed lag order `p` on `t = p..T`.
pub fn fit_var_order(window: &[[f64; 2]], p: usize) -> Result<VarFit> {
    if window.len() <= 2 * (2 * p + 1) {
        return Err(Error::InvalidInput(format!(
            "window of {} seconds is too short for lag {p}",
            window.len()
        )));
    }
    let (x, y) = design(window, p, p);
    let fit = least_squares(&x, &y).map_err(degenerate)?;
    if log_det_cov(&fit.residuals).is_none() {
        return Err(Error::DegenerateWindow("singular residual covariance".into()));
    }
    let beta = &fit.beta;
    let intercept = Vector2::new(beta[(0, 0)], beta[(0, 1)]);
    let coefs = (1..=p)
        .map(|j| {
            Matrix2::new(
                beta[(2 * j - 1, 0)],
                beta[(2 * j, 0)],
                beta[(2 * j - 1, 1)],
                beta[(2 * j, 1)],
            )
        })
        .collect();
    let residuals = fit
        .residuals
        .row_iter()
        .map(|r| Vector2::new(r[0], r[1]))
        .collect();
    let r2 = |c: usize| {
        let yc: DVector<f64> = y.column(c).into_owned();
        let rc: DVector<f64> = fit.residuals.column(c).into_owned();
        r_squared(&yc, &rc)
    };
    Ok(VarFit {
        window_id: None,
        lag_order: p,
        intercept,
        coefs,
        residuals,
        r_squared: [r2(0), r2(1)],
        aic: Vec::new(),
        window_len: window.len(),
    })
}

/// Per-state residual second moments.
///
/// Ranges of the partition index window seconds; residuals exist from second
/// `lag_order` on. Moments are uncentered since the residuals have zero mean,
/// so the pooled covariance equals the count-weighted average of the states.
pub fn residual_moments(fit: &VarFit, partition: &RegimePartition) -> Result<Vec<StateMoments>> {
    if partition.end() > fit.window_len {
        return Err(Error::InvalidInput(format!(
            "partition ends at {} beyond the {}-second window",
            partition.end(),
            fit.window_len
        )));
    }
    let p = fit.lag_order;
    partition
        .ranges()
        .iter()
        .map(|(state, range)| {
            let lo = range.start.max(p) - p;
            let hi = range.end.max(p) - p;
            let slice = &fit.residuals[lo..hi];
            if slice.len() < MIN_STATE_OBS {
                return Err(Error::InsufficientSample {
                    state: *state,
                    count: slice.len(),
                    required: MIN_STATE_OBS,
                });
            }
            Ok(StateMoments::from_residuals(*state, slice))
        })
        .collect()
}
