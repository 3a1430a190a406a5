//! Structural identification through heteroskedasticity.
//!
//! The contemporaneous system is `B y_t = ε_t` with
//!
//! ```text
//! B = | 1    -b_r |      Ω_s = diag(ω_{r,s}², ω_{f,s}²)
//!     | -b_f  1   |
//! ```
//!
//! so each heteroskedastic state `s` contributes three moment conditions from
//! `B Σ_s B' = Ω_s`:
//!
//! ```text
//! σ_r² − 2 b_r σ_rf + b_r² σ_f² − ω_r,s² = 0
//! σ_f² − 2 b_f σ_rf + b_f² σ_r² − ω_f,s² = 0
//! b_f σ_r² − (1 + b_r b_f) σ_rf + b_r σ_f² = 0
//! ```
//!
//! `b_r`, `b_f` are shared across states, the innovation scales are not. With
//! `S ≥ 2` states whose covariance matrices are pairwise non-proportional the
//! parameters are identified; `S = 2` is solved in closed form and `S ≥ 3`
//! by two-step GMM.

use std::ops::Range;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::optimize::{levenberg_marquardt, LmOptions};

/// Minimum number of residuals per state.
pub const MIN_STATE_OBS: usize = 10;

/// Default relative tolerance of the rank check.
pub const DEFAULT_RANK_TOL: f64 = 1e-3;

/// Default z threshold of the sampling-aware rank screen.
pub const DEFAULT_RANK_Z: f64 = 3.0;

/// Fourth-order cross moments `E[η_r^i η_f^j]`, `i + j = 4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FourthMoments {
    pub rrrr: f64,
    pub rrrf: f64,
    pub rrff: f64,
    pub rfff: f64,
    pub ffff: f64,
}

impl FourthMoments {
    /// Values implied by a zero-mean Gaussian with the given covariance.
    pub fn gaussian(var_r: f64, var_f: f64, cov: f64) -> Self {
        Self {
            rrrr: 3.0 * var_r * var_r,
            rrrf: 3.0 * var_r * cov,
            rrff: var_r * var_f + 2.0 * cov * cov,
            rfff: 3.0 * var_f * cov,
            ffff: 3.0 * var_f * var_f,
        }
    }
}

/// Second moments of the reduced-form residuals within one state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StateMoments {
    pub state: usize,
    pub var_r: f64,
    pub var_f: f64,
    pub cov_rf: f64,
    pub n: usize,
    /// Sample fourth moments; Gaussian values are used when absent.
    pub fourth: Option<FourthMoments>,
}

impl StateMoments {
    pub fn new(state: usize, var_r: f64, var_f: f64, cov_rf: f64, n: usize) -> Self {
        Self {
            state,
            var_r,
            var_f,
            cov_rf,
            n,
            fourth: None,
        }
    }

    /// Uncentered moments of zero-mean residuals.
    pub fn from_residuals(state: usize, residuals: &[Vector2<f64>]) -> Self {
        let n = residuals.len();
        let inv = 1.0 / n as f64;
        let (mut rr, mut ff, mut rf) = (0.0, 0.0, 0.0);
        let mut q = [0.0; 5];
        for e in residuals {
            let (r, f) = (e[0], e[1]);
            rr += r * r;
            ff += f * f;
            rf += r * f;
            q[0] += r * r * r * r;
            q[1] += r * r * r * f;
            q[2] += r * r * f * f;
            q[3] += r * f * f * f;
            q[4] += f * f * f * f;
        }
        Self {
            state,
            var_r: rr * inv,
            var_f: ff * inv,
            cov_rf: rf * inv,
            n,
            fourth: Some(FourthMoments {
                rrrr: q[0] * inv,
                rrrf: q[1] * inv,
                rrff: q[2] * inv,
                rfff: q[3] * inv,
                ffff: q[4] * inv,
            }),
        }
    }

    /// Population moments `B⁻¹ Ω B⁻ᵀ` of the contemporaneous system.
    pub fn population(state: usize, b_r: f64, b_f: f64, omega_r: f64, omega_f: f64, n: usize) -> Self {
        let d = 1.0 - b_r * b_f;
        let (wr, wf) = (omega_r * omega_r, omega_f * omega_f);
        let d2 = d * d;
        Self::new(
            state,
            (wr + b_r * b_r * wf) / d2,
            (b_f * b_f * wr + wf) / d2,
            (b_f * wr + b_r * wf) / d2,
            n,
        )
    }

    pub fn covariance(&self) -> Matrix2<f64> {
        Matrix2::new(self.var_r, self.cov_rf, self.cov_rf, self.var_f)
    }

    fn fourth_or_gaussian(&self) -> FourthMoments {
        self.fourth
            .unwrap_or_else(|| FourthMoments::gaussian(self.var_r, self.var_f, self.cov_rf))
    }

    /// Covariance of one observation of `(η_r², η_f², η_r η_f)`.
    fn second_moment_covariance(&self) -> nalgebra::Matrix3<f64> {
        let q = self.fourth_or_gaussian();
        let (a, d, c) = (self.var_r, self.var_f, self.cov_rf);
        nalgebra::Matrix3::new(
            q.rrrr - a * a,
            q.rrff - a * d,
            q.rrrf - a * c,
            q.rrff - a * d,
            q.ffff - d * d,
            q.rfff - d * c,
            q.rrrf - a * c,
            q.rfff - d * c,
            q.rrff - c * c,
        )
    }
}

/// Disjoint labelled index ranges over a window's seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimePartition {
    ranges: Vec<(usize, Range<usize>)>,
}

impl RegimePartition {
    /// Ranges must be non-empty and pairwise disjoint.
    pub fn new(ranges: Vec<(usize, Range<usize>)>) -> Result<Self> {
        if ranges.is_empty() {
            return Err(Error::InvalidInput("partition has no states".into()));
        }
        for (i, (_, a)) in ranges.iter().enumerate() {
            if a.is_empty() {
                return Err(Error::InvalidInput(format!("state range {i} is empty")));
            }
            for (_, b) in &ranges[..i] {
                if a.start < b.end && b.start < a.end {
                    return Err(Error::InvalidInput(format!("state ranges {a:?} and {b:?} overlap")));
                }
            }
        }
        Ok(Self { ranges })
    }

    /// Consecutive states of the given lengths, labelled `0..`.
    pub fn consecutive(lengths: &[usize]) -> Result<Self> {
        let mut start = 0;
        let ranges = lengths
            .iter()
            .enumerate()
            .map(|(s, &len)| {
                let r = (s, start..start + len);
                start += len;
                r
            })
            .collect();
        Self::new(ranges)
    }

    pub fn ranges(&self) -> &[(usize, Range<usize>)] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    /// One past the largest covered index.
    pub fn end(&self) -> usize {
        self.ranges.iter().map(|(_, r)| r.end).max().unwrap_or(0)
    }
}

/// Structural parameters with optional inference.
///
/// Parameter order everywhere is `b_r, b_f, ω_r[0..S], ω_f[0..S]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructuralEstimate {
    pub b_r: f64,
    pub b_f: f64,
    pub omega_r: Vec<f64>,
    pub omega_f: Vec<f64>,
    pub std_errors: Option<Vec<f64>>,
    /// GMM objective at the estimate (zero for the closed form).
    pub objective: f64,
    /// Over-identification statistic and its degrees of freedom `S − 2`.
    pub j_stat: Option<f64>,
    pub j_df: usize,
    pub j_pvalue: Option<f64>,
    pub n_total: usize,
}

impl StructuralEstimate {
    pub fn states(&self) -> usize {
        self.omega_r.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut v = vec![self.b_r, self.b_f];
        v.extend_from_slice(&self.omega_r);
        v.extend_from_slice(&self.omega_f);
        v
    }

    pub fn param_names(&self) -> Vec<String> {
        param_names(self.states())
    }

    /// `estimate / standard error`; `None` without standard errors.
    pub fn t_values(&self) -> Option<Vec<f64>> {
        let se = self.std_errors.as_ref()?;
        Some(self.params().iter().zip(se).map(|(p, s)| p / s).collect())
    }

    pub fn b_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(1.0, -self.b_r, -self.b_f, 1.0)
    }

    /// `B⁻¹ = [[1, b_r], [b_f, 1]] / (1 − b_r b_f)`.
    pub fn b_inverse(&self) -> Result<Matrix2<f64>> {
        b_inverse(self.b_r, self.b_f)
    }

    pub fn omega(&self, state: usize) -> Matrix2<f64> {
        Matrix2::new(self.omega_r[state].powi(2), 0.0, 0.0, self.omega_f[state].powi(2))
    }
}

pub fn param_names(states: usize) -> Vec<String> {
    let mut names = vec!["b_r".to_string(), "b_f".to_string()];
    names.extend((1..=states).map(|s| format!("omega_r{s}")));
    names.extend((1..=states).map(|s| format!("omega_f{s}")));
    names
}

pub fn b_inverse(b_r: f64, b_f: f64) -> Result<Matrix2<f64>> {
    let det = 1.0 - b_r * b_f;
    if det.abs() < 1e-12 || !det.is_finite() {
        return Err(Error::StructuralSingularity(det));
    }
    Ok(Matrix2::new(1.0, b_r, b_f, 1.0) / det)
}

/// Outcome of the pairwise rank check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankCheck {
    pub passed: bool,
    /// Smallest `|det| / (σ²_{r,s'}|σ_{rf,s''}| + σ²_{r,s''}|σ_{rf,s'}|)` over pairs.
    pub min_normalized_det: f64,
    pub worst_pair: (usize, usize),
    /// Smallest `|det| / se(det)` over pairs, when computed.
    pub min_z: Option<f64>,
}

fn pair_det(a: &StateMoments, b: &StateMoments) -> (f64, f64) {
    let det = a.var_r * b.cov_rf - b.var_r * a.cov_rf;
    let scale = a.var_r * b.cov_rf.abs() + b.var_r * a.cov_rf.abs();
    let normalized = if scale > 0.0 { det.abs() / scale } else { 0.0 };
    (det, normalized)
}

/// Checks `σ²_{r,s'} σ_{rf,s''} − σ²_{r,s''} σ_{rf,s'} ≠ 0` for every pair of
/// states, relative to the scale of its two products.
pub fn check_rank(moments: &[StateMoments], rel_tol: f64) -> Result<RankCheck> {
    if moments.len() < 2 {
        return Err(Error::OrderCondition { states: moments.len() });
    }
    let mut worst = (f64::INFINITY, (0, 1));
    for i in 0..moments.len() {
        for j in (i + 1)..moments.len() {
            let (_, norm) = pair_det(&moments[i], &moments[j]);
            let norm = if norm.is_finite() { norm } else { 0.0 };
            if norm < worst.0 {
                worst = (norm, (moments[i].state, moments[j].state));
            }
        }
    }
    Ok(RankCheck {
        passed: worst.0 > rel_tol,
        min_normalized_det: worst.0,
        worst_pair: worst.1,
        min_z: None,
    })
}

/// Rank check that also requires every pair determinant to be distinguishable
/// from zero given sampling noise: `|det| > z_crit · se(det)`, with the
/// standard error from the delta method on the state second moments.
pub fn check_rank_sampled(moments: &[StateMoments], rel_tol: f64, z_crit: f64) -> Result<RankCheck> {
    let mut check = check_rank(moments, rel_tol)?;
    let mut min_z = f64::INFINITY;
    let mut z_pair = check.worst_pair;
    for i in 0..moments.len() {
        for j in (i + 1)..moments.len() {
            let (a, b) = (&moments[i], &moments[j]);
            let (det, _) = pair_det(a, b);
            // d det / d(σ²_r, σ_rf) for each state.
            let va = det_variance(a, b.cov_rf, -b.var_r);
            let vb = det_variance(b, -a.cov_rf, a.var_r);
            let se = (va + vb).sqrt();
            let z = if se > 0.0 { det.abs() / se } else if det != 0.0 { f64::INFINITY } else { 0.0 };
            if z < min_z {
                min_z = z;
                z_pair = (a.state, b.state);
            }
        }
    }
    if check.passed && !(min_z > z_crit) {
        check.passed = false;
        check.worst_pair = z_pair;
    }
    check.min_z = Some(min_z);
    Ok(check)
}

fn det_variance(m: &StateMoments, d_var_r: f64, d_cov: f64) -> f64 {
    let c = m.second_moment_covariance();
    // Order in c is (rr, ff, rf).
    let v = d_var_r * d_var_r * c[(0, 0)] + 2.0 * d_var_r * d_cov * c[(0, 2)] + d_cov * d_cov * c[(2, 2)];
    v.max(0.0) / m.n.max(1) as f64
}

/// Candidate structural parameters for the moment system.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralParams {
    pub b_r: f64,
    pub b_f: f64,
    pub omega_r: Vec<f64>,
    pub omega_f: Vec<f64>,
}

impl StructuralParams {
    fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.b_r, self.b_f];
        v.extend_from_slice(&self.omega_r);
        v.extend_from_slice(&self.omega_f);
        v
    }

    fn from_slice(v: &[f64], states: usize) -> Self {
        Self {
            b_r: v[0],
            b_f: v[1],
            omega_r: v[2..2 + states].to_vec(),
            omega_f: v[2 + states..2 + 2 * states].to_vec(),
        }
    }
}

/// Stacked `3S` moment residuals, three per state in the order above.
pub fn moment_conditions(params: &StructuralParams, moments: &[StateMoments]) -> DVector<f64> {
    let (br, bf) = (params.b_r, params.b_f);
    let mut g = DVector::zeros(3 * moments.len());
    for (s, m) in moments.iter().enumerate() {
        let (a, d, c) = (m.var_r, m.var_f, m.cov_rf);
        g[3 * s] = a - 2.0 * br * c + br * br * d - params.omega_r[s].powi(2);
        g[3 * s + 1] = d - 2.0 * bf * c + bf * bf * a - params.omega_f[s].powi(2);
        g[3 * s + 2] = bf * a - (1.0 + br * bf) * c + br * d;
    }
    g
}

/// Analytic Jacobian of [`moment_conditions`] with respect to
/// `(b_r, b_f, ω_r[·], ω_f[·])` on the natural scale.
pub fn moment_jacobian(params: &StructuralParams, moments: &[StateMoments]) -> DMatrix<f64> {
    let states = moments.len();
    let (br, bf) = (params.b_r, params.b_f);
    let mut jac = DMatrix::zeros(3 * states, 2 + 2 * states);
    for (s, m) in moments.iter().enumerate() {
        let (a, d, c) = (m.var_r, m.var_f, m.cov_rf);
        jac[(3 * s, 0)] = -2.0 * c + 2.0 * br * d;
        jac[(3 * s, 2 + s)] = -2.0 * params.omega_r[s];
        jac[(3 * s + 1, 1)] = -2.0 * c + 2.0 * bf * a;
        jac[(3 * s + 1, 2 + states + s)] = -2.0 * params.omega_f[s];
        jac[(3 * s + 2, 0)] = d - bf * c;
        jac[(3 * s + 2, 1)] = a - br * c;
    }
    jac
}

/// Covariance of the stacked sample moment vector at `params`:
/// block-diagonal, block `s` equal to `A C_s A' / n_s` where `C_s` is the
/// covariance of `(η_r², η_f², η_r η_f)` and `A` maps it to the conditions.
pub fn moment_covariance(b_r: f64, b_f: f64, moments: &[StateMoments]) -> DMatrix<f64> {
    let states = moments.len();
    let a = nalgebra::Matrix3::new(
        1.0,
        b_r * b_r,
        -2.0 * b_r,
        b_f * b_f,
        1.0,
        -2.0 * b_f,
        b_f,
        b_r,
        -(1.0 + b_r * b_f),
    );
    let mut v = DMatrix::zeros(3 * states, 3 * states);
    for (s, m) in moments.iter().enumerate() {
        let block = a * m.second_moment_covariance() * a.transpose() / m.n.max(1) as f64;
        for i in 0..3 {
            for j in 0..3 {
                v[(3 * s + i, 3 * s + j)] = block[(i, j)];
            }
        }
    }
    v
}

/// Which root the closed-form solver keeps.
///
/// Among real roots giving positive `ω²` in both states, prefer `b_r ≥ 0`,
/// then the smaller `|b_r b_f|` (the root whose implied shocks have positive
/// own responses; the other root is the same system with the equations
/// relabelled, `(b_r, b_f) → (1/b_f, 1/b_r)`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RootSelection {
    #[default]
    NonNegativePriceImpact,
    /// Smallest `|b_r b_f|` regardless of sign.
    SmallestProduct,
}

#[derive(Debug, Clone)]
struct RootCandidate {
    b_r: f64,
    b_f: f64,
    omega_r2: [f64; 2],
    omega_f2: [f64; 2],
}

/// Closed-form solution of the just-identified two-state system.
pub fn solve_two_state(moments: &[StateMoments]) -> Result<StructuralEstimate> {
    solve_two_state_with(moments, RootSelection::default())
}

pub fn solve_two_state_with(moments: &[StateMoments], selection: RootSelection) -> Result<StructuralEstimate> {
    if moments.len() != 2 {
        return Err(Error::InvalidInput(format!(
            "closed form needs exactly 2 states, got {}",
            moments.len()
        )));
    }
    let (m1, m2) = (&moments[0], &moments[1]);
    let (a1, d1, c1) = (m1.var_r, m1.var_f, m1.cov_rf);
    let (a2, d2, c2) = (m2.var_r, m2.var_f, m2.cov_rf);
    // Eliminating b_f from the two cross-covariance conditions leaves
    // α b_r² + β b_r + γ = 0.
    let alpha = d1 * c2 - d2 * c1;
    let beta = a1 * d2 - a2 * d1;
    let gamma = c1 * a2 - c2 * a1;
    let disc = beta * beta - 4.0 * alpha * gamma;
    let roots: Vec<f64> = if disc < 0.0 {
        let re = -beta / (2.0 * alpha);
        let im = (-disc).sqrt() / (2.0 * alpha);
        return Err(Error::IdentificationFailure {
            roots: [(re, im), (re, -im)],
        });
    } else {
        let q = -0.5 * (beta + beta.signum() * disc.sqrt());
        let mut r = Vec::with_capacity(2);
        if q != 0.0 {
            r.push(gamma / q);
            r.push(q / alpha);
        } else if alpha != 0.0 {
            // β = 0 and disc = 0 imply γ = 0: double root at zero.
            r.push(0.0);
        }
        r.into_iter().filter(|v| v.is_finite()).collect()
    };

    let candidates: Vec<RootCandidate> = roots
        .iter()
        .filter_map(|&b_r| {
            // Use the state whose denominator is better conditioned.
            let den1 = a1 - b_r * c1;
            let den2 = a2 - b_r * c2;
            let b_f = if den1.abs() >= den2.abs() {
                (c1 - b_r * d1) / den1
            } else {
                (c2 - b_r * d2) / den2
            };
            if !b_f.is_finite() || (1.0 - b_r * b_f).abs() < 1e-12 {
                return None;
            }
            let wr = |a: f64, d: f64, c: f64| a - 2.0 * b_r * c + b_r * b_r * d;
            let wf = |a: f64, d: f64, c: f64| d - 2.0 * b_f * c + b_f * b_f * a;
            let cand = RootCandidate {
                b_r,
                b_f,
                omega_r2: [wr(a1, d1, c1), wr(a2, d2, c2)],
                omega_f2: [wf(a1, d1, c1), wf(a2, d2, c2)],
            };
            let positive = cand.omega_r2.iter().chain(cand.omega_f2.iter()).all(|&w| w > 0.0);
            positive.then_some(cand)
        })
        .collect();

    let chosen = candidates.iter().min_by(|x, y| {
        let key = |c: &RootCandidate| {
            let sign_penalty = match selection {
                RootSelection::NonNegativePriceImpact => (c.b_r < 0.0) as u8,
                RootSelection::SmallestProduct => 0,
            };
            (sign_penalty, (c.b_r * c.b_f).abs())
        };
        let (kx, ky) = (key(x), key(y));
        kx.0.cmp(&ky.0).then(kx.1.total_cmp(&ky.1))
    });
    let Some(c) = chosen else {
        let mut pair = [(f64::NAN, 0.0); 2];
        for (slot, r) in pair.iter_mut().zip(roots.iter()) {
            *slot = (*r, 0.0);
        }
        return Err(Error::IdentificationFailure { roots: pair });
    };
    Ok(StructuralEstimate {
        b_r: c.b_r,
        b_f: c.b_f,
        omega_r: c.omega_r2.iter().map(|w| w.sqrt()).collect(),
        omega_f: c.omega_f2.iter().map(|w| w.sqrt()).collect(),
        std_errors: None,
        objective: 0.0,
        j_stat: None,
        j_df: 0,
        j_pvalue: None,
        n_total: m1.n + m2.n,
    })
}

/// Options of the two-step GMM estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GmmConfig {
    pub max_iter: usize,
    /// Relative objective change treated as converged.
    pub tol: f64,
    /// Additional starting points tried after a non-converged run.
    pub restarts: usize,
    pub rank_tol: f64,
    /// Sampling-aware rank screen threshold used by the window protocol;
    /// non-positive disables it.
    pub rank_z: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-10,
            restarts: 4,
            rank_tol: DEFAULT_RANK_TOL,
            rank_z: DEFAULT_RANK_Z,
        }
    }
}

/// Pooled regression slope of `r` on `f` implied by the state moments.
pub fn pooled_ols_slope(moments: &[StateMoments]) -> f64 {
    let num: f64 = moments.iter().map(|m| m.n as f64 * m.cov_rf).sum();
    let den: f64 = moments.iter().map(|m| m.n as f64 * m.var_f).sum();
    num / den
}

fn starting_points(moments: &[StateMoments], restarts: usize) -> Vec<(f64, f64)> {
    let mut starts = Vec::new();
    // Closed form on the most separated pair.
    let mut best: Option<(f64, usize, usize)> = None;
    for i in 0..moments.len() {
        for j in (i + 1)..moments.len() {
            let (_, norm) = pair_det(&moments[i], &moments[j]);
            if norm.is_finite() && best.is_none_or(|b| norm > b.0) {
                best = Some((norm, i, j));
            }
        }
    }
    if let Some((_, i, j)) = best {
        if let Ok(est) = solve_two_state(&[moments[i], moments[j]]) {
            starts.push((est.b_r, est.b_f));
        }
    }
    let ols = pooled_ols_slope(moments);
    let ols = if ols.is_finite() { ols } else { 0.0 };
    starts.push((ols, 0.0));
    let base = starts[0];
    let jitter = [(0.5, 0.5), (1.5, 1.5), (1.0, 0.0), (0.25, 2.0), (2.0, 0.25), (0.0, 0.0)];
    for &(kr, kf) in jitter.iter().take(restarts) {
        starts.push((base.0 * kr, base.1 * kf));
    }
    starts
}

fn omega_start(b_r: f64, b_f: f64, moments: &[StateMoments]) -> (Vec<f64>, Vec<f64>) {
    let mut wr = Vec::with_capacity(moments.len());
    let mut wf = Vec::with_capacity(moments.len());
    for m in moments {
        let (a, d, c) = (m.var_r, m.var_f, m.cov_rf);
        let r2 = a - 2.0 * b_r * c + b_r * b_r * d;
        let f2 = d - 2.0 * b_f * c + b_f * b_f * a;
        wr.push(r2.max(1e-4 * a.max(f64::MIN_POSITIVE)).sqrt());
        wf.push(f2.max(1e-4 * d.max(f64::MIN_POSITIVE)).sqrt());
    }
    (wr, wf)
}

/// Internal parameters: `b_r, b_f, ln ω_r[·], ln ω_f[·]`.
fn to_internal(p: &StructuralParams) -> DVector<f64> {
    let mut v = vec![p.b_r, p.b_f];
    v.extend(p.omega_r.iter().map(|w| w.ln()));
    v.extend(p.omega_f.iter().map(|w| w.ln()));
    DVector::from_vec(v)
}

fn from_internal(u: &DVector<f64>, states: usize) -> StructuralParams {
    let mut v: Vec<f64> = u.iter().copied().collect();
    for x in &mut v[2..] {
        *x = x.exp();
    }
    StructuralParams::from_slice(&v, states)
}

/// Minimises `‖M g(θ)‖²` from `start`, with `M` a fixed weighting factor.
fn minimise(
    start: &StructuralParams,
    moments: &[StateMoments],
    weight_factor: &DMatrix<f64>,
    config: &GmmConfig,
) -> Option<(StructuralParams, f64, bool)> {
    let states = moments.len();
    let opts = LmOptions {
        max_iter: config.max_iter,
        tol: config.tol,
    };
    let out = levenberg_marquardt(to_internal(start), opts, |u| {
        let p = from_internal(u, states);
        let g = moment_conditions(&p, moments);
        let mut jac = moment_jacobian(&p, moments);
        for s in 0..states {
            let (cr, cf) = (2 + s, 2 + states + s);
            for row in 0..jac.nrows() {
                jac[(row, cr)] *= p.omega_r[s];
                jac[(row, cf)] *= p.omega_f[s];
            }
        }
        Some((weight_factor * g, weight_factor * jac))
    })?;
    Some((from_internal(&out.x, states), out.objective, out.converged))
}

/// Lower-triangular `M` with `M'M = V⁻¹ / N`.
fn efficient_weight_factor(v: &DMatrix<f64>, n_total: usize) -> Option<DMatrix<f64>> {
    let l = v.clone().cholesky()?.l();
    let inv = l.try_inverse()?;
    Some(inv / (n_total as f64).sqrt())
}

/// Two-step GMM over all states.
///
/// Step 1 uses identity weighting; step 2 re-minimises with the inverse of the
/// moment covariance evaluated at the step-1 estimate. Standard errors use
/// the sandwich form with the moment covariance at the final estimate, and
/// `J = N · Q` with `N` the total observation count.
pub fn estimate_gmm(moments: &[StateMoments], config: &GmmConfig) -> Result<StructuralEstimate> {
    estimate_gmm_with_weight(moments, config).map(|(est, _)| est)
}

/// [`estimate_gmm`] that also returns the step-2 weighting matrix, so callers
/// can evaluate the objective and its gradient at the estimate.
pub fn estimate_gmm_with_weight(
    moments: &[StateMoments],
    config: &GmmConfig,
) -> Result<(StructuralEstimate, DMatrix<f64>)> {
    let states = moments.len();
    if states < 2 {
        return Err(Error::OrderCondition { states });
    }
    let rank = check_rank(moments, config.rank_tol)?;
    if !rank.passed {
        return Err(Error::RankCondition(rank.worst_pair.0, rank.worst_pair.1, rank.min_normalized_det));
    }
    let n_total: usize = moments.iter().map(|m| m.n).sum();
    let identity = DMatrix::<f64>::identity(3 * states, 3 * states);

    let mut best_objective = f64::INFINITY;
    let mut solution = None;
    for (b_r, b_f) in starting_points(moments, config.restarts) {
        let (omega_r, omega_f) = omega_start(b_r, b_f, moments);
        let start = StructuralParams { b_r, b_f, omega_r, omega_f };
        let Some((step1, q1, ok1)) = minimise(&start, moments, &identity, config) else {
            continue;
        };
        best_objective = best_objective.min(q1);
        if !ok1 {
            continue;
        }
        let v1 = moment_covariance(step1.b_r, step1.b_f, moments);
        let Some(factor) = efficient_weight_factor(&v1, n_total) else {
            continue;
        };
        let Some((step2, q2, ok2)) = minimise(&step1, moments, &factor, config) else {
            continue;
        };
        best_objective = best_objective.min(q2);
        if ok2 {
            solution = Some((step2, q2, factor));
            break;
        }
    }
    let Some((theta, objective, factor)) = solution else {
        return Err(Error::Convergence { best_objective });
    };

    for (s, m) in moments.iter().enumerate() {
        for (name, value, scale) in [
            ("omega_r", theta.omega_r[s], m.var_r),
            ("omega_f", theta.omega_f[s], m.var_f),
        ] {
            if !(value > 1e-6 * scale.max(0.0).sqrt()) {
                return Err(Error::Boundary {
                    parameter: format!("{name}{}", s + 1),
                    value,
                });
            }
        }
    }

    let weight = factor.transpose() * &factor;
    let g_jac = moment_jacobian(&theta, moments);
    let v = moment_covariance(theta.b_r, theta.b_f, moments);
    let bread = (g_jac.transpose() * &weight * &g_jac).try_inverse();
    let std_errors = bread.map(|bread| {
        let meat = g_jac.transpose() * &weight * &v * &weight * &g_jac;
        let cov = &bread * meat * &bread;
        (0..cov.nrows()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect::<Vec<_>>()
    });

    let j_df = states - 2;
    let j_stat = n_total as f64 * objective;
    let j_pvalue = (j_df > 0)
        .then(|| ChiSquared::new(j_df as f64).ok().map(|chi| 1.0 - chi.cdf(j_stat)))
        .flatten();
    let values = theta.to_vec();
    let estimate = StructuralEstimate {
        b_r: values[0],
        b_f: values[1],
        omega_r: theta.omega_r,
        omega_f: theta.omega_f,
        std_errors,
        objective,
        j_stat: Some(j_stat),
        j_df,
        j_pvalue,
        n_total,
    };
    Ok((estimate, weight))
}

/// Gradient of `Q(θ) = g'Wg` in natural parameters, `2 G'W g`.
pub fn objective_gradient(params: &StructuralParams, moments: &[StateMoments], weight: &DMatrix<f64>) -> DVector<f64> {
    let g = moment_conditions(params, moments);
    let jac = moment_jacobian(params, moments);
    2.0 * jac.transpose() * weight * g
}

/// Step-2 weighting matrix `(N V(b_r, b_f))⁻¹` used by [`estimate_gmm`].
pub fn efficient_weight(b_r: f64, b_f: f64, moments: &[StateMoments]) -> Option<DMatrix<f64>> {
    let n_total: usize = moments.iter().map(|m| m.n).sum();
    let f = efficient_weight_factor(&moment_covariance(b_r, b_f, moments), n_total)?;
    Some(f.transpose() * f)
}

/// `|t| > 2` per parameter; `false` where no standard error is available.
pub fn significance_flags(est: &StructuralEstimate) -> Vec<bool> {
    match est.t_values() {
        Some(t) => t.iter().map(|t| is_significant(*t)).collect(),
        None => vec![false; 2 + 2 * est.states()],
    }
}

pub fn is_significant(t: f64) -> bool {
    t.abs() > 2.0
}

impl From<&StructuralEstimate> for StructuralParams {
    fn from(e: &StructuralEstimate) -> Self {
        Self {
            b_r: e.b_r,
            b_f: e.b_f,
            omega_r: e.omega_r.clone(),
            omega_f: e.omega_f.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fabricate(b_r: f64, b_f: f64, wr: &[f64], wf: &[f64], n: usize) -> Vec<StateMoments> {
        wr.iter()
            .zip(wf)
            .enumerate()
            .map(|(s, (&r, &f))| StateMoments::population(s, b_r, b_f, r, f, n))
            .collect()
    }

    /// Σ_s = B⁻¹ Ω_s B⁻ᵀ by explicit matrix products.
    fn fabricate_by_matrices(b_r: f64, b_f: f64, wr: &[f64], wf: &[f64]) -> Vec<StateMoments> {
        let b = Matrix2::new(1.0, -b_r, -b_f, 1.0);
        let binv = b.try_inverse().unwrap();
        wr.iter()
            .zip(wf)
            .enumerate()
            .map(|(s, (&r, &f))| {
                let sigma = binv * Matrix2::new(r * r, 0.0, 0.0, f * f) * binv.transpose();
                StateMoments::new(s, sigma[(0, 0)], sigma[(1, 1)], sigma[(0, 1)], 300)
            })
            .collect()
    }

    #[test]
    fn population_helper_matches_matrix_products() {
        let a = fabricate(0.8, 0.3, &[0.6, 1.2], &[0.3, 0.35], 300);
        let b = fabricate_by_matrices(0.8, 0.3, &[0.6, 1.2], &[0.3, 0.35]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x.var_r - y.var_r).abs() < 1e-14);
            assert!((x.var_f - y.var_f).abs() < 1e-14);
            assert!((x.cov_rf - y.cov_rf).abs() < 1e-14);
        }
    }

    #[test]
    fn closed_form_recovers_fabricated_parameters() {
        let m = fabricate_by_matrices(0.8, 0.3, &[0.6, 1.2], &[0.3, 0.35]);
        let est = solve_two_state(&m).unwrap();
        let rel = |x: f64, y: f64| ((x - y) / y).abs();
        assert!(rel(est.b_r, 0.8) < 1e-10, "{}", est.b_r);
        assert!(rel(est.b_f, 0.3) < 1e-10, "{}", est.b_f);
        for (got, want) in est.omega_r.iter().zip([0.6, 1.2]) {
            assert!(rel(*got, want) < 1e-10);
        }
        for (got, want) in est.omega_f.iter().zip([0.3, 0.35]) {
            assert!(rel(*got, want) < 1e-10);
        }
        let g = moment_conditions(&(&est).into(), &m);
        assert!(g.amax() < 1e-13);
    }

    #[test]
    fn zero_flow_impact_gives_ols_coefficient() {
        let m = fabricate(0.7, 0.0, &[0.5, 1.1], &[0.4, 0.3], 300);
        let est = solve_two_state(&m).unwrap();
        for s in &m {
            assert!((est.b_r - s.cov_rf / s.var_f).abs() < 1e-12);
        }
        assert!(est.b_f.abs() < 1e-12);
    }

    #[test]
    fn symmetric_case_returns_symmetric_root() {
        let m = fabricate(0.4, 0.4, &[0.5, 1.0], &[1.0, 0.5], 300);
        let est = solve_two_state(&m).unwrap();
        assert!((est.b_r - 0.4).abs() < 1e-12 && (est.b_f - 0.4).abs() < 1e-12);
    }

    #[test]
    fn relabelled_root_is_the_other_solution() {
        let m = fabricate(0.8, 0.3, &[0.6, 1.2], &[0.3, 0.35], 300);
        let g = moment_conditions(
            &StructuralParams {
                b_r: 1.0 / 0.3,
                b_f: 1.0 / 0.8,
                omega_r: vec![0.3 / 0.3, 0.35 / 0.3],
                omega_f: vec![0.6 / 0.8, 1.2 / 0.8],
            },
            &m,
        );
        assert!(g.amax() < 1e-12);
    }

    #[test]
    fn homoskedastic_and_proportional_states_fail_rank() {
        let same = fabricate(0.8, 0.3, &[0.6, 0.6], &[0.3, 0.3], 300);
        let c = check_rank(&same, DEFAULT_RANK_TOL).unwrap();
        assert!(!c.passed);
        assert_eq!(c.min_normalized_det, 0.0);
        let prop = fabricate(0.8, 0.3, &[0.6, 1.2], &[0.3, 0.6], 300);
        assert!(!check_rank(&prop, DEFAULT_RANK_TOL).unwrap().passed);
        let good = fabricate(0.8, 0.3, &[0.6, 1.2], &[0.6, 0.3], 300);
        assert!(check_rank(&good, DEFAULT_RANK_TOL).unwrap().passed);
        assert!(matches!(check_rank(&good[..1], 1e-3), Err(Error::OrderCondition { states: 1 })));
    }

    #[test]
    fn zero_impacts_specialise_conditions() {
        let m = [StateMoments::new(0, 2.0, 3.0, 0.5, 100), StateMoments::new(1, 1.0, 4.0, -0.2, 100)];
        let p = StructuralParams {
            b_r: 0.0,
            b_f: 0.0,
            omega_r: vec![1.1, 0.9],
            omega_f: vec![1.5, 1.7],
        };
        let g = moment_conditions(&p, &m);
        let want = [2.0 - 1.21, 3.0 - 2.25, -0.5, 1.0 - 0.81, 4.0 - 2.89, 0.2];
        for (x, y) in g.iter().zip(want) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let m = [
            StateMoments::new(0, 2.0, 3.0, 0.5, 100),
            StateMoments::new(1, 1.0, 4.0, -0.2, 100),
            StateMoments::new(2, 1.5, 0.7, 0.3, 100),
        ];
        let p = StructuralParams {
            b_r: 0.7,
            b_f: -0.2,
            omega_r: vec![1.1, 0.9, 0.5],
            omega_f: vec![1.5, 1.7, 0.4],
        };
        let jac = moment_jacobian(&p, &m);
        let base = p.to_vec();
        for k in 0..base.len() {
            let h = 1e-6 * (1.0 + base[k].abs());
            let mut up = base.clone();
            let mut dn = base.clone();
            up[k] += h;
            dn[k] -= h;
            let gu = moment_conditions(&StructuralParams::from_slice(&up, 3), &m);
            let gd = moment_conditions(&StructuralParams::from_slice(&dn, 3), &m);
            for i in 0..gu.len() {
                let fd = (gu[i] - gd[i]) / (2.0 * h);
                let an = jac[(i, k)];
                assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "({i},{k}) fd {fd} an {an}");
            }
        }
    }

    #[test]
    fn gmm_two_states_matches_closed_form() {
        let m = fabricate(0.8, 0.3, &[0.6, 1.2], &[0.3, 0.35], 300);
        let cf = solve_two_state(&m).unwrap();
        let gmm = estimate_gmm(&m, &GmmConfig::default()).unwrap();
        for (a, b) in cf.params().iter().zip(gmm.params()) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(gmm.j_stat.unwrap() < 1e-12);
        assert_eq!(gmm.j_df, 0);
        assert!(gmm.std_errors.is_some());
    }

    #[test]
    fn gmm_three_states_exact_moments() {
        let m = fabricate(0.8, 0.3, &[0.6, 1.2, 0.9], &[0.3, 0.35, 0.7], 300);
        let est = estimate_gmm(&m, &GmmConfig::default()).unwrap();
        assert!((est.b_r - 0.8).abs() < 1e-8 && (est.b_f - 0.3).abs() < 1e-8);
        assert_eq!(est.j_df, 1);
        let t = est.t_values().unwrap();
        assert!(t.iter().all(|t| t.is_finite()));
    }

    #[test]
    fn gmm_from_fallback_start_finds_same_root() {
        let m = fabricate(0.8, 0.3, &[0.6, 1.2], &[0.3, 0.35], 300);
        let (wr, wf) = omega_start(0.5, 0.0, &m);
        let start = StructuralParams {
            b_r: 0.5,
            b_f: 0.0,
            omega_r: wr,
            omega_f: wf,
        };
        let id = DMatrix::identity(6, 6);
        let (p, q, ok) = minimise(&start, &m, &id, &GmmConfig::default()).unwrap();
        assert!(ok && q < 1e-20);
        assert!((p.b_r - 0.8).abs() < 1e-8 && (p.b_f - 0.3).abs() < 1e-8);
    }

    #[test]
    fn significance_is_strict() {
        assert!(!is_significant(2.0));
        assert!(is_significant(-3.1));
        assert!(!is_significant(-2.0));
    }

    #[test]
    fn partition_rejects_overlap() {
        assert!(RegimePartition::new(vec![(0, 0..10), (1, 5..20)]).is_err());
        let p = RegimePartition::consecutive(&[300, 300, 300]).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p.end(), 900);
    }
}
