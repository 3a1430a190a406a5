//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector, Matrix2};

use crate::error::{Error, Result};

/// Relative pivot below which a Gram-matrix column counts as linearly dependent.
pub const COLLINEARITY_TOL: f64 = 1e-10;

/// Cholesky factor `L` of a symmetric positive semi-definite Gram matrix.
///
/// Column `j` is reported as dependent when its residual pivot, after
/// projecting out columns `0..j`, is below `tol` times its own diagonal
/// entry. All dependent columns are collected before failing so callers can
/// name every offender.
pub fn gram_cholesky(gram: &DMatrix<f64>, tol: f64) -> std::result::Result<DMatrix<f64>, Vec<usize>> {
    let k = gram.nrows();
    let mut l = DMatrix::<f64>::zeros(k, k);
    let mut dependent = Vec::new();
    for j in 0..k {
        let mut d = gram[(j, j)];
        for m in 0..j {
            d -= l[(j, m)] * l[(j, m)];
        }
        let scale = gram[(j, j)];
        if !(scale > 0.0) || !(d > tol * scale) {
            dependent.push(j);
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..k {
            let mut s = gram[(i, j)];
            for m in 0..j {
                s -= l[(i, m)] * l[(j, m)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    if dependent.is_empty() {
        Ok(l)
    } else {
        Err(dependent)
    }
}

/// Solves `L L' x = b` for every column of `b`.
pub fn cholesky_solve(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let k = l.nrows();
    let mut x = b.clone();
    for c in 0..b.ncols() {
        for i in 0..k {
            let mut s = x[(i, c)];
            for m in 0..i {
                s -= l[(i, m)] * x[(m, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        for i in (0..k).rev() {
            let mut s = x[(i, c)];
            for m in (i + 1)..k {
                s -= l[(m, i)] * x[(m, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Ordinary least squares fit of one or more responses on a shared design.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    /// `k × m` coefficients, one column per response.
    pub beta: DMatrix<f64>,
    /// `(X'X)^{-1}`.
    pub xtx_inv: DMatrix<f64>,
    /// `n × m` residuals.
    pub residuals: DMatrix<f64>,
}

/// Least squares of `y` (`n × m`) on `x` (`n × k`).
pub fn least_squares(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<LeastSquares> {
    if x.nrows() != y.nrows() {
        return Err(Error::InvalidInput(format!(
            "design has {} rows, response has {}",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.nrows() < x.ncols() {
        return Err(Error::InvalidInput(format!(
            "{} observations for {} regressors",
            x.nrows(),
            x.ncols()
        )));
    }
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    let l = gram_cholesky(&xtx, COLLINEARITY_TOL).map_err(|columns| Error::Collinearity { columns })?;
    let beta = cholesky_solve(&l, &xty);
    let xtx_inv = cholesky_solve(&l, &DMatrix::identity(x.ncols(), x.ncols()));
    let residuals = y - x * &beta;
    Ok(LeastSquares {
        beta,
        xtx_inv,
        residuals,
    })
}

/// Centered R² of a single response given its residuals.
pub fn r_squared(y: &DVector<f64>, residuals: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let mean = y.sum() / n;
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ssr = residuals.norm_squared();
    if sst > 0.0 {
        1.0 - ssr / sst
    } else {
        0.0
    }
}

/// Spectral radius of the companion matrix of a bivariate VAR with lag
/// matrices `coefs[0..p]`. Zero for `p = 0`.
pub fn companion_spectral_radius(coefs: &[Matrix2<f64>]) -> f64 {
    let p = coefs.len();
    if p == 0 {
        return 0.0;
    }
    let comp = companion(coefs);
    comp.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// `2p × 2p` companion matrix `[Φ_1 … Φ_p; I 0]`.
pub fn companion(coefs: &[Matrix2<f64>]) -> DMatrix<f64> {
    let p = coefs.len();
    let n = 2 * p;
    let mut comp = DMatrix::<f64>::zeros(n, n);
    for (j, phi) in coefs.iter().enumerate() {
        for r in 0..2 {
            for c in 0..2 {
                comp[(r, 2 * j + c)] = phi[(r, c)];
            }
        }
    }
    for i in 2..n {
        comp[(i, i - 2)] = 1.0;
    }
    comp
}

/// Solves the discrete Lyapunov equation `X = A X A' + Q` by vectorisation.
pub fn discrete_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let kron = a.kronecker(a);
    let lhs = DMatrix::<f64>::identity(n * n, n * n) - kron;
    let rhs = DVector::from_iterator(n * n, q.iter().copied());
    let sol = lhs.lu().solve(&rhs)?;
    Some(DMatrix::from_iterator(n, n, sol.iter().copied()))
}
