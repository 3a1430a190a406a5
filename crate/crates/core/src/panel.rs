//! Intraday window protocol, pooled summaries and clustered regressions.
//!
//! Each trading day is cut into fixed windows (15 minutes by default). Every
//! window gets its own reduced-form VAR, its residuals are split into nested
//! regimes (three 5-minute blocks by default) and the structural parameters
//! are estimated by GMM. Windows that fail any step are recorded in an
//! [`ExclusionReport`] and never abort the run.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, Matrix2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dynamics::{impulse_responses, DEFAULT_HORIZON};
use crate::error::{Error, Result};
use crate::ith::{
    check_rank, check_rank_sampled, estimate_gmm, param_names, significance_flags, GmmConfig, RegimePartition,
    StructuralEstimate,
};
use crate::linalg::least_squares;
use crate::market_data::{format_clock, parse_clock, SecondBar, SessionBounds, SessionSeries};
use crate::stats::{percentile_sorted, render_table, SummaryRow};
use crate::var::{fit_var, residual_moments, DEFAULT_MAX_LAG};

/// Window geometry of the protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub window_secs: usize,
    /// Regime lengths inside a window, in order; they sum to `window_secs`.
    pub regime_secs: Vec<usize>,
    pub bounds: SessionBounds,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            window_secs: 900,
            regime_secs: vec![300, 300, 300],
            bounds: SessionBounds::default(),
        }
    }
}

impl WindowSpec {
    /// `minutes`-long windows split into `regimes` equal parts.
    pub fn equal(minutes: usize, regimes: usize, bounds: SessionBounds) -> Result<Self> {
        let window_secs = minutes * 60;
        if regimes == 0 || window_secs % regimes != 0 {
            return Err(Error::Config(format!(
                "{window_secs}-second window cannot be split into {regimes} equal regimes"
            )));
        }
        let spec = Self {
            window_secs,
            regime_secs: vec![window_secs / regimes; regimes],
            bounds,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_secs == 0 {
            return Err(Error::Config("window length must be positive".into()));
        }
        if self.regime_secs.iter().sum::<usize>() != self.window_secs {
            return Err(Error::Config(format!(
                "regime lengths {:?} do not sum to the {}-second window",
                self.regime_secs, self.window_secs
            )));
        }
        if self.regime_secs.contains(&0) {
            return Err(Error::Config("zero-length regime".into()));
        }
        if self.bounds.len() < self.window_secs {
            return Err(Error::Config("session is shorter than one window".into()));
        }
        Ok(())
    }

    pub fn windows_per_day(&self) -> usize {
        self.bounds.len() / self.window_secs
    }

    /// Session seconds after the last full window; they are not estimated.
    pub fn trailing_remainder(&self) -> usize {
        self.bounds.len() % self.window_secs
    }

    pub fn regimes(&self) -> usize {
        self.regime_secs.len()
    }

    pub fn partition(&self) -> Result<RegimePartition> {
        RegimePartition::consecutive(&self.regime_secs)
    }

    /// Offset of regime `k` from the window start.
    pub fn regime_offset(&self, k: usize) -> usize {
        self.regime_secs[..k].iter().sum()
    }

    /// `(window, regime)` of a second since the open, if inside a full window.
    pub fn locate(&self, second: usize) -> Option<(usize, usize)> {
        let w = second / self.window_secs;
        if w >= self.windows_per_day() {
            return None;
        }
        let mut o = second % self.window_secs;
        for (k, len) in self.regime_secs.iter().enumerate() {
            if o < *len {
                return Some((w, k));
            }
            o -= len;
        }
        None
    }
}

/// Options of the per-window estimation chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub max_lag: usize,
    pub horizon: usize,
    pub gmm: GmmConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            max_lag: DEFAULT_MAX_LAG,
            horizon: DEFAULT_HORIZON,
            gmm: GmmConfig::default(),
        }
    }
}

/// Activity measures over one interval, in regression units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntervalCovariates {
    /// Reciprocal of the interval-mean depth, per thousand contracts.
    pub inv_depth: Option<f64>,
    /// Number of events, millions.
    pub ne_millions: f64,
    /// Mean event size over seconds with events, thousands of contracts.
    pub ase_thousands: Option<f64>,
    /// Mean spread, index points.
    pub spr: f64,
}

pub fn interval_covariates(bars: &[SecondBar]) -> IntervalCovariates {
    let depth: Vec<f64> = bars.iter().filter_map(|b| b.depth).collect();
    let ase: Vec<f64> = bars.iter().filter_map(|b| b.ase).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mean_depth = (!depth.is_empty()).then(|| mean(&depth));
    IntervalCovariates {
        inv_depth: mean_depth.filter(|d| *d > 0.0).map(|d| 1.0 / d),
        ne_millions: bars.iter().map(|b| b.ne as f64).sum::<f64>() / 1e6,
        ase_thousands: (!ase.is_empty()).then(|| mean(&ase) / 10.0),
        spr: bars.iter().map(|b| b.spr).sum::<f64>() / bars.len().max(1) as f64,
    }
}

/// One estimated window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PanelRow {
    pub date: String,
    pub window: usize,
    pub lag_order: usize,
    pub estimate: StructuralEstimate,
    /// `|t| > 2` per parameter, in [`StructuralEstimate::params`] order.
    pub significant: Vec<bool>,
    pub irf: Vec<Matrix2<f64>>,
    pub cumulative_irf: Vec<Matrix2<f64>>,
    pub long_run: Option<Matrix2<f64>>,
    pub spectral_radius: f64,
    pub window_covariates: IntervalCovariates,
    pub regime_covariates: Vec<IntervalCovariates>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    InvalidDay,
    Degenerate,
    InsufficientSample,
    Rank,
    Convergence,
    Boundary,
    Singular,
    Other,
}

impl ExclusionReason {
    pub fn from_error(e: &Error) -> Self {
        match e {
            Error::DegenerateWindow(_) | Error::Collinearity { .. } => Self::Degenerate,
            Error::InsufficientSample { .. } => Self::InsufficientSample,
            Error::RankCondition(..) | Error::OrderCondition { .. } => Self::Rank,
            Error::Convergence { .. } | Error::IdentificationFailure { .. } => Self::Convergence,
            Error::Boundary { .. } => Self::Boundary,
            Error::StructuralSingularity(_) => Self::Singular,
            _ => Self::Other,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::InvalidDay => "invalid_day",
            Self::Degenerate => "degenerate",
            Self::InsufficientSample => "insufficient_sample",
            Self::Rank => "rank",
            Self::Convergence => "convergence",
            Self::Boundary => "boundary",
            Self::Singular => "singular",
            Self::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Exclusion {
    pub date: String,
    pub window: usize,
    pub reason: ExclusionReason,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct DayAccount {
    pub attempted: usize,
    pub estimated: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ExclusionReport {
    pub entries: Vec<Exclusion>,
    pub per_day: BTreeMap<String, DayAccount>,
    /// Seconds per day after the last full window.
    pub trailing_remainder_secs: usize,
}

impl ExclusionReport {
    pub fn attempted(&self) -> usize {
        self.per_day.values().map(|d| d.attempted).sum()
    }

    pub fn estimated(&self) -> usize {
        self.per_day.values().map(|d| d.estimated).sum()
    }

    pub fn excluded(&self) -> usize {
        self.per_day.values().map(|d| d.excluded).sum()
    }

    pub fn by_reason(&self) -> BTreeMap<ExclusionReason, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.reason).or_insert(0) += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtocolOutput {
    pub rows: Vec<PanelRow>,
    pub report: ExclusionReport,
}

/// Runs the estimation chain on every day × window, in parallel. Output order
/// follows the input day order and window index regardless of scheduling.
pub fn run_protocol(days: &[SessionSeries], spec: &WindowSpec, config: &ProtocolConfig) -> Result<ProtocolOutput> {
    spec.validate()?;
    let partition = spec.partition()?;
    let n_windows = spec.windows_per_day();
    let valid: Vec<Option<String>> = days
        .iter()
        .map(|d| d.check_gapless(&spec.bounds).err().map(|e| e.to_string()))
        .collect();
    let tasks: Vec<(usize, usize)> = (0..days.len()).flat_map(|d| (0..n_windows).map(move |w| (d, w))).collect();
    let results: Vec<std::result::Result<PanelRow, Exclusion>> = tasks
        .par_iter()
        .map(|&(d, w)| {
            let day = &days[d];
            if let Some(msg) = &valid[d] {
                return Err(Exclusion {
                    date: day.date.clone(),
                    window: w,
                    reason: ExclusionReason::InvalidDay,
                    message: msg.clone(),
                });
            }
            estimate_window(day, w, spec, &partition, config).map_err(|e| Exclusion {
                date: day.date.clone(),
                window: w,
                reason: ExclusionReason::from_error(&e),
                message: e.to_string(),
            })
        })
        .collect();

    let mut report = ExclusionReport {
        trailing_remainder_secs: spec.trailing_remainder(),
        ..Default::default()
    };
    let mut rows = Vec::new();
    for day in days {
        report.per_day.entry(day.date.clone()).or_default();
    }
    for res in results {
        match res {
            Ok(row) => {
                let acc = report.per_day.entry(row.date.clone()).or_default();
                acc.attempted += 1;
                acc.estimated += 1;
                rows.push(row);
            }
            Err(ex) => {
                let acc = report.per_day.entry(ex.date.clone()).or_default();
                acc.attempted += 1;
                acc.excluded += 1;
                report.entries.push(ex);
            }
        }
    }
    Ok(ProtocolOutput { rows, report })
}

fn estimate_window(
    day: &SessionSeries,
    w: usize,
    spec: &WindowSpec,
    partition: &RegimePartition,
    config: &ProtocolConfig,
) -> Result<PanelRow> {
    let start = w * spec.window_secs;
    let end = start + spec.window_secs;
    let window = day.returns_flows(start, end);
    let mut fit = fit_var(&window, config.max_lag)?;
    fit.window_id = Some(format!("{}#{w}", day.date));
    let moments = residual_moments(&fit, partition)?;
    let rank = if config.gmm.rank_z > 0.0 {
        check_rank_sampled(&moments, config.gmm.rank_tol, config.gmm.rank_z)?
    } else {
        check_rank(&moments, config.gmm.rank_tol)?
    };
    if !rank.passed {
        return Err(Error::RankCondition(rank.worst_pair.0, rank.worst_pair.1, rank.min_normalized_det));
    }
    let estimate = estimate_gmm(&moments, &config.gmm)?;
    let irf = impulse_responses(&fit, &estimate, config.horizon)?;
    let bars = &day.bars[start..end];
    let regime_covariates = (0..spec.regimes())
        .map(|k| {
            let o = spec.regime_offset(k);
            interval_covariates(&bars[o..o + spec.regime_secs[k]])
        })
        .collect();
    Ok(PanelRow {
        date: day.date.clone(),
        window: w,
        lag_order: fit.lag_order,
        significant: significance_flags(&estimate),
        estimate,
        irf: irf.irf,
        cumulative_irf: irf.cumulative,
        long_run: irf.long_run,
        spectral_radius: irf.spectral_radius,
        window_covariates: interval_covariates(bars),
        regime_covariates,
    })
}

/// Labels of the long-run impact entries; `I_rf` is the response of the
/// return to a flow innovation.
pub const LONG_RUN_LABELS: [&str; 4] = ["I_rr", "I_rf", "I_fr", "I_ff"];

fn matrix_entries(m: &Matrix2<f64>) -> [f64; 4] {
    [m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]]
}

/// Cross-window percentiles of one cumulative response path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IrfBand {
    pub horizon: usize,
    /// One of [`LONG_RUN_LABELS`].
    pub entry: String,
    pub mean: f64,
    /// 5, 25, 50, 75 and 95 percent.
    pub quantiles: [f64; 5],
}

pub const IRF_BAND_LEVELS: [f64; 5] = [5.0, 25.0, 50.0, 75.0, 95.0];

/// Pooled parameter and long-run impact statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PooledSummary {
    pub windows: usize,
    pub structural: Vec<SummaryRow>,
    /// Share of windows with `|t| > 2`, aligned with `structural`.
    pub significant_share: Vec<f64>,
    pub long_run: Vec<SummaryRow>,
    pub stationary_windows: usize,
    pub irf_bands: Vec<IrfBand>,
}

impl PooledSummary {
    pub fn render_structural(&self) -> String {
        render_table(
            &format!("Structural parameters ({} windows)", self.windows),
            &self.structural,
            Some(("*", &self.significant_share)),
        )
    }

    pub fn render_long_run(&self) -> String {
        render_table(
            &format!("Long-run impacts ({} stationary windows)", self.stationary_windows),
            &self.long_run,
            None,
        )
    }
}

/// Pools estimated windows into parameter and long-run summaries.
///
/// All rows must share the same number of regimes.
pub fn pool_summaries(rows: &[PanelRow]) -> Result<PooledSummary> {
    let first = rows.first().ok_or_else(|| Error::Empty("no estimated windows to pool".into()))?;
    let states = first.estimate.states();
    if rows.iter().any(|r| r.estimate.states() != states) {
        return Err(Error::InvalidInput("rows mix different regime counts".into()));
    }
    let names = param_names(states);
    let mut structural = Vec::with_capacity(names.len());
    let mut significant_share = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let values: Vec<f64> = rows.iter().map(|r| r.estimate.params()[i]).collect();
        if let Some(row) = SummaryRow::from_values(name.clone(), &values) {
            structural.push(row);
            let sig = rows.iter().filter(|r| r.significant[i]).count();
            significant_share.push(sig as f64 / rows.len() as f64);
        }
    }

    let lr: Vec<[f64; 4]> = rows.iter().filter_map(|r| r.long_run.as_ref().map(matrix_entries)).collect();
    let long_run = LONG_RUN_LABELS
        .iter()
        .enumerate()
        .filter_map(|(i, l)| SummaryRow::from_values(*l, &lr.iter().map(|e| e[i]).collect::<Vec<_>>()))
        .collect();

    let horizon = rows.iter().map(|r| r.cumulative_irf.len()).min().unwrap_or(0);
    let mut irf_bands = Vec::new();
    for h in 0..horizon {
        for (i, label) in LONG_RUN_LABELS.iter().enumerate() {
            let mut v: Vec<f64> = rows
                .iter()
                .map(|r| matrix_entries(&r.cumulative_irf[h])[i])
                .filter(|x| x.is_finite())
                .collect();
            if v.is_empty() {
                continue;
            }
            v.sort_by(f64::total_cmp);
            let mut quantiles = [0.0; 5];
            for (q, lvl) in quantiles.iter_mut().zip(IRF_BAND_LEVELS) {
                *q = percentile_sorted(&v, lvl);
            }
            irf_bands.push(IrfBand {
                horizon: h,
                entry: label.to_string(),
                mean: v.iter().sum::<f64>() / v.len() as f64,
                quantiles,
            });
        }
    }
    Ok(PooledSummary {
        windows: rows.len(),
        structural,
        significant_share,
        long_run,
        stationary_windows: lr.len(),
        irf_bands,
    })
}

/// Mean structural estimates by time of day.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowProfile {
    pub window: usize,
    pub count: usize,
    pub mean_b_r: f64,
    pub mean_b_f: f64,
    pub mean_omega_r: Vec<f64>,
    pub mean_omega_f: Vec<f64>,
}

pub fn window_profile(rows: &[PanelRow]) -> Vec<WindowProfile> {
    let mut groups: BTreeMap<usize, Vec<&PanelRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.window).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(window, g)| {
            let n = g.len() as f64;
            let states = g[0].estimate.states();
            let avg = |f: &dyn Fn(&PanelRow) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / n;
            WindowProfile {
                window,
                count: g.len(),
                mean_b_r: avg(&|r| r.estimate.b_r),
                mean_b_f: avg(&|r| r.estimate.b_f),
                mean_omega_r: (0..states).map(|s| avg(&|r| r.estimate.omega_r[s])).collect(),
                mean_omega_f: (0..states).map(|s| avg(&|r| r.estimate.omega_f[s])).collect(),
            }
        })
        .collect()
}

/// OLS with cluster-robust inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredOls {
    pub beta: DVector<f64>,
    pub vcov: DMatrix<f64>,
    pub std_errors: DVector<f64>,
    pub t_values: DVector<f64>,
    /// Two-sided p-values from a t distribution with `G − 1` degrees of freedom.
    pub p_values: DVector<f64>,
    pub r_squared: f64,
    pub adj_r_squared: f64,
    pub n: usize,
    pub k: usize,
    pub clusters: usize,
}

/// OLS point estimates with the cluster sandwich
/// `c (X'X)⁻¹ [Σ_g X_g' u_g u_g' X_g] (X'X)⁻¹`, `c = G/(G−1) · (N−1)/(N−K)`.
pub fn clustered_ols<C: Eq + Hash>(y: &DVector<f64>, x: &DMatrix<f64>, clusters: &[C]) -> Result<ClusteredOls> {
    let (n, k) = x.shape();
    if y.len() != n || clusters.len() != n {
        return Err(Error::InvalidInput(format!(
            "{} responses and {} cluster ids for {n} design rows",
            y.len(),
            clusters.len()
        )));
    }
    if n <= k {
        return Err(Error::InvalidInput(format!("{n} observations for {k} regressors")));
    }
    let mut ids: HashMap<&C, usize> = HashMap::new();
    let group: Vec<usize> = clusters
        .iter()
        .map(|c| {
            let next = ids.len();
            *ids.entry(c).or_insert(next)
        })
        .collect();
    let g = ids.len();
    if g < 2 {
        return Err(Error::InvalidInput("at least two clusters are required".into()));
    }
    let y_mat = DMatrix::from_column_slice(n, 1, y.as_slice());
    let fit = least_squares(x, &y_mat)?;
    let beta = fit.beta.column(0).into_owned();
    let resid = fit.residuals.column(0).into_owned();

    let mut scores = DMatrix::<f64>::zeros(g, k);
    for i in 0..n {
        for j in 0..k {
            scores[(group[i], j)] += x[(i, j)] * resid[i];
        }
    }
    let meat = scores.transpose() * &scores;
    let c = (g as f64 / (g as f64 - 1.0)) * ((n as f64 - 1.0) / (n as f64 - k as f64));
    let vcov = &fit.xtx_inv * meat * &fit.xtx_inv * c;
    let std_errors = DVector::from_iterator(k, (0..k).map(|j| vcov[(j, j)].max(0.0).sqrt()));
    let t_values = beta.component_div(&std_errors);
    let dist = StudentsT::new(0.0, 1.0, (g - 1) as f64).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let p_values = t_values.map(|t| if t.is_finite() { 2.0 * (1.0 - dist.cdf(t.abs())) } else { 0.0 });

    let ybar = y.mean();
    let tss: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
    let rss = resid.norm_squared();
    let r_squared = if tss > 0.0 { 1.0 - rss / tss } else { 0.0 };
    let adj_r_squared = 1.0 - (1.0 - r_squared) * (n as f64 - 1.0) / (n as f64 - k as f64);
    Ok(ClusteredOls {
        beta,
        vcov,
        std_errors,
        t_values,
        p_values,
        r_squared,
        adj_r_squared,
        n,
        k,
        clusters: g,
    })
}

/// Significance stars at the 10%, 5% and 1% levels.
pub fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.1 {
        "*"
    } else {
        ""
    }
}

/// Scheduled release.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Announcement {
    pub date: String,
    /// Seconds of the day.
    pub time: u32,
    pub name: String,
    pub actual: Option<f64>,
    pub consensus: Option<f64>,
}

impl Announcement {
    /// `Some(true)` if the release came in below consensus; `None` when
    /// either value is missing.
    pub fn below_consensus(&self) -> Option<bool> {
        Some(self.actual? < self.consensus?)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnnouncementCalendar {
    entries: Vec<Announcement>,
}

pub const CALENDAR_HEADER: [&str; 5] = ["date", "time", "name", "actual", "consensus"];

impl AnnouncementCalendar {
    pub fn new(mut entries: Vec<Announcement>) -> Self {
        entries.sort_by(|a, b| (&a.date, a.time, &a.name).cmp(&(&b.date, b.time, &b.name)));
        Self { entries }
    }

    pub fn entries(&self) -> &[Announcement] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Releases outside the session; they never set a dummy.
    pub fn outside_session(&self, bounds: &SessionBounds) -> Vec<&Announcement> {
        self.entries
            .iter()
            .filter(|a| a.time < bounds.open || a.time >= bounds.close)
            .collect()
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(input);
        let header = rdr.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != CALENDAR_HEADER {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {}", CALENDAR_HEADER.join(",")),
            });
        }
        let mut entries = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            let get = |i: usize| rec.get(i).unwrap_or("");
            let time = parse_clock(get(1)).ok_or_else(|| Error::Parse {
                line,
                message: format!("invalid release time `{}`", get(1)),
            })?;
            let num = |i: usize, name: &str| -> Result<Option<f64>> {
                let s = get(i);
                if s.is_empty() {
                    return Ok(None);
                }
                s.parse().map(Some).map_err(|_| Error::Parse {
                    line,
                    message: format!("invalid {name} `{s}`"),
                })
            };
            entries.push(Announcement {
                date: get(0).to_string(),
                time: time as u32,
                name: get(2).to_string(),
                actual: num(3, "actual")?,
                consensus: num(4, "consensus")?,
            });
        }
        Ok(Self::new(entries))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CALENDAR_HEADER)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for a in &self.entries {
            w.write_record([
                a.date.clone(),
                format_clock(a.time as f64),
                a.name.clone(),
                opt(a.actual),
                opt(a.consensus),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Intervals per date holding a release, keyed by `index(seconds since
    /// open)`; the value is `true` if any of them came in below consensus.
    fn interval_flags(&self, bounds: &SessionBounds, index: impl Fn(usize) -> Option<usize>) -> HashMap<(String, usize), bool> {
        let mut out: HashMap<(String, usize), bool> = HashMap::new();
        for a in &self.entries {
            if a.time < bounds.open || a.time >= bounds.close {
                continue;
            }
            if let Some(i) = index((a.time - bounds.open) as usize) {
                let neg = out.entry((a.date.clone(), i)).or_insert(false);
                *neg |= a.below_consensus().unwrap_or(false);
            }
        }
        out
    }
}

/// Leads and lags of the announcement dummies; `k` is the offset in
/// `ANN_{t+k}`.
pub const ANN_OFFSETS: [i64; 5] = [-2, -1, 0, 1, 2];

fn offset_label(k: i64) -> String {
    match k {
        0 => "t".into(),
        k if k > 0 => format!("t+{k}"),
        k => format!("t{k}"),
    }
}

/// Dependent variable of an announcement regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Dependent {
    BR,
    BF,
    OmegaR,
    OmegaF,
}

impl Dependent {
    pub const ALL: [Dependent; 4] = [Dependent::BR, Dependent::BF, Dependent::OmegaR, Dependent::OmegaF];

    pub fn name(&self) -> &'static str {
        match self {
            Dependent::BR => "b_r",
            Dependent::BF => "b_f",
            Dependent::OmegaR => "omega_r",
            Dependent::OmegaF => "omega_f",
        }
    }

    fn per_regime(&self) -> bool {
        matches!(self, Dependent::OmegaR | Dependent::OmegaF)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionTerm {
    pub name: String,
    pub coef: f64,
    pub se: f64,
    pub t: f64,
    pub p: f64,
}

impl RegressionTerm {
    pub fn stars(&self) -> &'static str {
        stars(self.p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionOutput {
    pub dependent: String,
    pub interval_secs: usize,
    pub terms: Vec<RegressionTerm>,
    pub n: usize,
    pub clusters: usize,
    pub r_squared: f64,
    pub adj_r_squared: f64,
    /// Observations dropped because a covariate was undefined.
    pub dropped_missing: usize,
    /// Columns removed for lack of variation or collinearity.
    pub dropped_terms: Vec<String>,
}

impl RegressionOutput {
    pub fn term(&self, name: &str) -> Option<&RegressionTerm> {
        self.terms.iter().find(|t| t.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionSet {
    pub regressions: Vec<RegressionOutput>,
    pub warnings: Vec<String>,
}

/// Which regressor groups enter the announcement regressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressionOptions {
    pub announcements: bool,
    pub activity: bool,
    pub time_dummies: bool,
}

impl Default for RegressionOptions {
    fn default() -> Self {
        Self {
            announcements: true,
            activity: true,
            time_dummies: true,
        }
    }
}

/// Cluster count below which a reliability warning is issued.
pub const FEW_CLUSTERS: usize = 10;

pub const ACTIVITY_TERMS: [&str; 4] = ["D_inv", "NE", "ASE", "SPR"];

struct Observation {
    date: String,
    y: f64,
    /// Interval index within the day at the dependent's frequency.
    slot: usize,
    cov: IntervalCovariates,
}

/// Regressions of `b_r`, `b_f` (window frequency) and `ω_r`, `ω_f` (regime
/// frequency) on announcement dummies with leads and lags, activity
/// measures and time-of-day dummies, with date-clustered standard errors.
pub fn announcement_regressions(
    rows: &[PanelRow],
    calendar: &AnnouncementCalendar,
    spec: &WindowSpec,
    options: &RegressionOptions,
) -> Result<RegressionSet> {
    spec.validate()?;
    let mut warnings = Vec::new();
    let outside = calendar.outside_session(&spec.bounds);
    if !outside.is_empty() {
        warnings.push(format!("{} announcement(s) outside the session were ignored", outside.len()));
    }
    let mut regressions = Vec::new();
    for dep in Dependent::ALL {
        match dependent_regression(rows, calendar, spec, options, dep, &mut warnings) {
            Ok(out) => {
                if out.clusters < FEW_CLUSTERS {
                    warnings.push(format!(
                        "{}: only {} date clusters; clustered standard errors are unreliable",
                        dep.name(),
                        out.clusters
                    ));
                }
                regressions.push(out)
            }
            Err(e) => warnings.push(format!("{} regression skipped: {e}", dep.name())),
        }
    }
    Ok(RegressionSet { regressions, warnings })
}

fn dependent_regression(
    rows: &[PanelRow],
    calendar: &AnnouncementCalendar,
    spec: &WindowSpec,
    options: &RegressionOptions,
    dep: Dependent,
    warnings: &mut Vec<String>,
) -> Result<RegressionOutput> {
    let regimes = spec.regimes();
    let (slots, interval_secs) = if dep.per_regime() {
        (spec.windows_per_day() * regimes, spec.window_secs / regimes)
    } else {
        (spec.windows_per_day(), spec.window_secs)
    };
    let mut obs = Vec::new();
    for r in rows {
        if dep.per_regime() {
            if r.estimate.states() != regimes {
                return Err(Error::InvalidInput("row regime count differs from the window spec".into()));
            }
            for k in 0..regimes {
                let y = match dep {
                    Dependent::OmegaR => r.estimate.omega_r[k],
                    _ => r.estimate.omega_f[k],
                };
                obs.push(Observation {
                    date: r.date.clone(),
                    y,
                    slot: r.window * regimes + k,
                    cov: r.regime_covariates[k],
                });
            }
        } else {
            let y = if dep == Dependent::BR { r.estimate.b_r } else { r.estimate.b_f };
            obs.push(Observation {
                date: r.date.clone(),
                y,
                slot: r.window,
                cov: r.window_covariates,
            });
        }
    }
    let before = obs.len();
    if options.activity {
        obs.retain(|o| o.cov.inv_depth.is_some() && o.cov.ase_thousands.is_some());
    }
    let dropped_missing = before - obs.len();
    if dropped_missing > 0 {
        warnings.push(format!(
            "{}: {dropped_missing} interval(s) without depth or event size dropped",
            dep.name()
        ));
    }
    if obs.is_empty() {
        return Err(Error::Empty("no observations".into()));
    }

    let flags = calendar.interval_flags(&spec.bounds, |sec| {
        let (w, k) = spec.locate(sec)?;
        Some(if dep.per_regime() { w * regimes + k } else { w })
    });

    let mut names: Vec<String> = vec!["const".into()];
    let mut columns: Vec<Vec<f64>> = vec![vec![1.0; obs.len()]];
    if options.announcements {
        for negative in [false, true] {
            for k in ANN_OFFSETS {
                let prefix = if negative { "ANN_NEG" } else { "ANN" };
                names.push(format!("{prefix}_{}", offset_label(k)));
                columns.push(
                    obs.iter()
                        .map(|o| {
                            let t = o.slot as i64 + k;
                            if t < 0 || t >= slots as i64 {
                                return 0.0;
                            }
                            match flags.get(&(o.date.clone(), t as usize)) {
                                Some(neg) if !negative || *neg => 1.0,
                                _ => 0.0,
                            }
                        })
                        .collect(),
                );
            }
        }
    }
    if options.activity {
        names.extend(ACTIVITY_TERMS.iter().map(|s| s.to_string()));
        columns.push(obs.iter().map(|o| o.cov.inv_depth.unwrap_or(0.0)).collect());
        columns.push(obs.iter().map(|o| o.cov.ne_millions).collect());
        columns.push(obs.iter().map(|o| o.cov.ase_thousands.unwrap_or(0.0)).collect());
        columns.push(obs.iter().map(|o| o.cov.spr).collect());
    }
    if options.time_dummies {
        for s in 1..slots {
            names.push(format!("tod_{s}"));
            columns.push(obs.iter().map(|o| if o.slot == s { 1.0 } else { 0.0 }).collect());
        }
    }

    // Non-constant columns without variation cannot be estimated.
    let mut dropped_terms = Vec::new();
    let mut keep: Vec<usize> = Vec::new();
    for (j, col) in columns.iter().enumerate() {
        let varies = col.iter().any(|v| *v != col[0]);
        if j == 0 || varies {
            keep.push(j);
        } else {
            dropped_terms.push(names[j].clone());
        }
    }
    let ann_dropped: Vec<&String> = dropped_terms.iter().filter(|n| n.starts_with("ANN")).collect();
    if !ann_dropped.is_empty() && options.announcements {
        warnings.push(format!(
            "{}: no variation in {} announcement dummies; dropped",
            dep.name(),
            ann_dropped.len()
        ));
    }

    let y = DVector::from_iterator(obs.len(), obs.iter().map(|o| o.y));
    let clusters: Vec<&str> = obs.iter().map(|o| o.date.as_str()).collect();
    loop {
        let x = DMatrix::from_fn(obs.len(), keep.len(), |i, j| columns[keep[j]][i]);
        match clustered_ols(&y, &x, &clusters) {
            Ok(fit) => {
                let terms = keep
                    .iter()
                    .enumerate()
                    .map(|(j, &c)| RegressionTerm {
                        name: names[c].clone(),
                        coef: fit.beta[j],
                        se: fit.std_errors[j],
                        t: fit.t_values[j],
                        p: fit.p_values[j],
                    })
                    .collect();
                return Ok(RegressionOutput {
                    dependent: dep.name().into(),
                    interval_secs,
                    terms,
                    n: fit.n,
                    clusters: fit.clusters,
                    r_squared: fit.r_squared,
                    adj_r_squared: fit.adj_r_squared,
                    dropped_missing,
                    dropped_terms,
                });
            }
            Err(Error::Collinearity { columns: dependent }) => {
                let removed: Vec<usize> = dependent.iter().filter(|&&j| j > 0).map(|&j| keep[j]).collect();
                if removed.is_empty() {
                    return Err(Error::Collinearity { columns: dependent });
                }
                for c in &removed {
                    warnings.push(format!("{}: {} is collinear with earlier terms; dropped", dep.name(), names[*c]));
                    dropped_terms.push(names[*c].clone());
                }
                keep.retain(|c| !removed.contains(c));
            }
            Err(e) => return Err(e),
        }
    }
}

/// Aligned text table with `coef` + stars and `(se)` per term.
pub fn render_regressions(set: &RegressionSet) -> String {
    let mut out = String::new();
    for reg in &set.regressions {
        out.push_str(&format!(
            "{} ({}-second intervals)  N = {}  clusters = {}  adj. R2 = {:.4}\n",
            reg.dependent, reg.interval_secs, reg.n, reg.clusters, reg.adj_r_squared
        ));
        for t in reg.terms.iter().filter(|t| !t.name.starts_with("tod_")) {
            let coef = format!("{:.4}{}", t.coef, t.stars());
            out.push_str(&format!("  {:<14}{:>14}{:>12}\n", t.name, coef, format!("({:.4})", t.se)));
        }
        let tod = reg.terms.iter().filter(|t| t.name.starts_with("tod_")).count();
        if tod > 0 {
            out.push_str(&format!("  time-of-day dummies: {tod}\n"));
        }
        if !reg.dropped_terms.is_empty() {
            out.push_str(&format!("  dropped: {}\n", reg.dropped_terms.join(", ")));
        }
        out.push('\n');
    }
    out.push_str("* p<0.1, ** p<0.05, *** p<0.01; standard errors clustered by date\n");
    for w in &set.warnings {
        out.push_str(&format!("warning: {w}\n"));
    }
    out
}

pub fn write_regressions_csv<W: Write>(out: W, set: &RegressionSet) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["dependent", "term", "coef", "se", "p"])?;
    for reg in &set.regressions {
        for t in &reg.terms {
            w.write_record([
                reg.dependent.clone(),
                t.name.clone(),
                t.coef.to_string(),
                t.se.to_string(),
                t.p.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One line per estimated window.
pub fn write_panel_csv<W: Write>(out: W, rows: &[PanelRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let Some(first) = rows.first() else {
        w.write_record(["date", "window"])?;
        w.flush()?;
        return Ok(());
    };
    let names = first.estimate.param_names();
    let mut header: Vec<String> = vec!["date".into(), "window".into(), "lag_order".into()];
    header.extend(names.iter().cloned());
    header.extend(names.iter().map(|n| format!("se_{n}")));
    header.extend(names.iter().map(|n| format!("sig_{n}")));
    header.extend(["j_stat", "j_pvalue", "spectral_radius"].map(String::from));
    header.extend(LONG_RUN_LABELS.iter().map(|l| format!("lr_{l}")));
    header.extend(["d_inv", "ne_millions", "ase_thousands", "spr"].map(String::from));
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let mut rec: Vec<String> = vec![r.date.clone(), r.window.to_string(), r.lag_order.to_string()];
        rec.extend(r.estimate.params().iter().map(|v| v.to_string()));
        match &r.estimate.std_errors {
            Some(se) => rec.extend(se.iter().map(|v| v.to_string())),
            None => rec.extend(names.iter().map(|_| String::new())),
        }
        rec.extend(r.significant.iter().map(|s| u8::from(*s).to_string()));
        rec.push(opt(r.estimate.j_stat));
        rec.push(opt(r.estimate.j_pvalue));
        rec.push(r.spectral_radius.to_string());
        match &r.long_run {
            Some(m) => rec.extend(matrix_entries(m).iter().map(|v| v.to_string())),
            None => rec.extend(std::iter::repeat_n(String::new(), 4)),
        }
        let c = &r.window_covariates;
        rec.extend([opt(c.inv_depth), c.ne_millions.to_string(), opt(c.ase_thousands), c.spr.to_string()]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_exclusions_csv<W: Write>(out: W, report: &ExclusionReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "window", "reason", "message"])?;
    for e in &report.entries {
        w.write_record([e.date.clone(), e.window.to_string(), e.reason.as_str().into(), e.message.clone()])?;
    }
    w.flush()?;
    Ok(())
}

/// Cumulative response bands by horizon.
pub fn write_irf_csv<W: Write>(out: W, bands: &[IrfBand]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["horizon", "entry", "mean", "p5", "p25", "p50", "p75", "p95"])?;
    for b in bands {
        let mut rec = vec![b.horizon.to_string(), b.entry.clone(), b.mean.to_string()];
        rec.extend(b.quantiles.iter().map(|q| q.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-window responses, one line per window and horizon.
pub fn write_window_irfs_csv<W: Write>(out: W, rows: &[PanelRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "window_id", "k", "irf_rr", "irf_rf", "irf_fr", "irf_ff", "cum_rr", "cum_rf", "cum_fr", "cum_ff",
    ])?;
    for r in rows {
        let id = format!("{}#{}", r.date, r.window);
        for (k, (irf, cum)) in r.irf.iter().zip(&r.cumulative_irf).enumerate() {
            let mut rec = vec![id.clone(), k.to_string()];
            rec.extend(matrix_entries(irf).iter().map(|v| v.to_string()));
            rec.extend(matrix_entries(cum).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_profile_csv<W: Write>(out: W, profile: &[WindowProfile], spec: &WindowSpec) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let states = profile.first().map(|p| p.mean_omega_r.len()).unwrap_or(0);
    let mut header: Vec<String> = ["window", "start", "count", "mean_b_r", "mean_b_f"].map(String::from).to_vec();
    header.extend((1..=states).map(|s| format!("mean_omega_r{s}")));
    header.extend((1..=states).map(|s| format!("mean_omega_f{s}")));
    w.write_record(&header)?;
    for p in profile {
        let start = spec.bounds.open as f64 + (p.window * spec.window_secs) as f64;
        let mut rec = vec![
            p.window.to_string(),
            format_clock(start),
            p.count.to_string(),
            p.mean_b_r.to_string(),
            p.mean_b_f.to_string(),
        ];
        rec.extend(p.mean_omega_r.iter().map(|v| v.to_string()));
        rec.extend(p.mean_omega_f.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
