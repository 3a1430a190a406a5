//! Impulse responses and long-run impacts of the identified system.

use nalgebra::Matrix2;
use serde::Serialize;

use crate::error::Result;
use crate::ith::StructuralEstimate;
use crate::linalg::companion_spectral_radius;
use crate::var::VarFit;

pub const DEFAULT_HORIZON: usize = 10;

/// Companion spectral radius margin below one required for a long-run impact.
pub const STATIONARITY_MARGIN: f64 = 1e-6;

/// Responses by horizon; entry `(i, j)` is the response of variable `i`
/// (0 = return, 1 = flow) to a unit structural innovation in `j`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImpulseResponseSet {
    pub horizon: usize,
    pub irf: Vec<Matrix2<f64>>,
    pub cumulative: Vec<Matrix2<f64>>,
    pub long_run: Option<Matrix2<f64>>,
    pub stationary: bool,
    pub spectral_radius: f64,
}

/// Long-run impact `(I − Σ Φ̃_j)⁻¹ B⁻¹`, when the VAR is stationary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LongRunImpact {
    pub matrix: Option<Matrix2<f64>>,
    pub stationary: bool,
    pub spectral_radius: f64,
}

/// VMA recursion `IRF[0] = B⁻¹`, `IRF[k] = Σ_{j ≤ min(k,p)} Φ̃_j IRF[k−j]`.
pub fn irf_sequence(coefs: &[Matrix2<f64>], b_inv: Matrix2<f64>, horizon: usize) -> Vec<Matrix2<f64>> {
    let mut irf = Vec::with_capacity(horizon + 1);
    irf.push(b_inv);
    for k in 1..=horizon {
        let mut m = Matrix2::zeros();
        for (j, phi) in coefs.iter().enumerate().take(k) {
            m += phi * irf[k - j - 1];
        }
        irf.push(m);
    }
    irf
}

pub fn long_run_from(coefs: &[Matrix2<f64>], b_inv: Matrix2<f64>) -> LongRunImpact {
    let spectral_radius = companion_spectral_radius(coefs);
    let stationary = spectral_radius < 1.0 - STATIONARITY_MARGIN;
    let matrix = if stationary {
        let sum: Matrix2<f64> = coefs.iter().sum();
        (Matrix2::identity() - sum).try_inverse().map(|inv| inv * b_inv)
    } else {
        None
    };
    LongRunImpact {
        matrix,
        stationary: stationary && matrix.is_some(),
        spectral_radius,
    }
}

pub fn impulse_responses(fit: &VarFit, est: &StructuralEstimate, horizon: usize) -> Result<ImpulseResponseSet> {
    let b_inv = est.b_inverse()?;
    let irf = irf_sequence(&fit.coefs, b_inv, horizon);
    let cumulative = irf
        .iter()
        .scan(Matrix2::zeros(), |acc, m| {
            *acc += m;
            Some(*acc)
        })
        .collect();
    let lr = long_run_from(&fit.coefs, b_inv);
    Ok(ImpulseResponseSet {
        horizon,
        irf,
        cumulative,
        long_run: lr.matrix,
        stationary: lr.stationary,
        spectral_radius: lr.spectral_radius,
    })
}

pub fn long_run_impact(fit: &VarFit, est: &StructuralEstimate) -> Result<LongRunImpact> {
    Ok(long_run_from(&fit.coefs, est.b_inverse()?))
}
