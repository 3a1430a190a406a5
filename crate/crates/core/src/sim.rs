//! Ground-truth generators.
//!
//! All randomness comes from `ChaCha8Rng::seed_from_u64(seed)`; independent
//! replications use `set_stream(index)` on the same seed. Normal draws use
//! `rand_distr::StandardNormal`, Student-t innovations are rescaled to unit
//! variance. Output is therefore identical across platforms for a given seed.

use std::io::Write;

use chrono::{Datelike, NaiveDate, Weekday};
use nalgebra::{DMatrix, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ith::{check_rank, RankCheck, StateMoments, DEFAULT_RANK_TOL};
use crate::linalg::{companion, companion_spectral_radius, discrete_lyapunov};
use crate::market_data::{depth_from_sums, BboEvent, GapPolicy, SecondBar, SessionBounds, SessionSeries};
use crate::panel::{Announcement, AnnouncementCalendar};

/// RNG for replication `stream` of a run seeded with `seed`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Innovation {
    #[default]
    Gaussian,
    /// Student-t with `df > 2` degrees of freedom, scaled to unit variance.
    StudentT { df: f64 },
}

impl Innovation {
    fn validate(&self) -> Result<()> {
        match self {
            Innovation::Gaussian => Ok(()),
            Innovation::StudentT { df } if *df > 2.0 => Ok(()),
            Innovation::StudentT { df } => Err(Error::Config(format!("Student-t df must exceed 2, got {df}"))),
        }
    }

    fn sampler(&self) -> Result<InnovationSampler> {
        self.validate()?;
        Ok(match *self {
            Innovation::Gaussian => InnovationSampler::Gaussian,
            Innovation::StudentT { df } => InnovationSampler::StudentT(
                StudentT::new(df).map_err(|e| Error::Config(e.to_string()))?,
                ((df - 2.0) / df).sqrt(),
            ),
        })
    }
}

enum InnovationSampler {
    Gaussian,
    StudentT(StudentT<f64>, f64),
}

impl InnovationSampler {
    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            InnovationSampler::Gaussian => StandardNormal.sample(rng),
            InnovationSampler::StudentT(t, scale) => t.sample(rng) * scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub omega_r: f64,
    pub omega_f: f64,
    pub length: usize,
}

/// Structural VAR with regime-dependent innovation scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub b_r: f64,
    pub b_f: f64,
    pub regimes: Vec<RegimeSpec>,
    /// Structural lag matrices `Φ_j`, row-major.
    pub phi: Vec<[[f64; 2]; 2]>,
    pub intercept: [f64; 2],
    pub innovation: Innovation,
    pub seed: u64,
    pub require_stationary: bool,
    /// Number of times the regime sequence is repeated.
    pub cycles: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            b_r: 0.8,
            b_f: 0.3,
            regimes: vec![
                RegimeSpec { omega_r: 0.5, omega_f: 0.6, length: 300 },
                RegimeSpec { omega_r: 1.5, omega_f: 0.3, length: 300 },
                RegimeSpec { omega_r: 1.0, omega_f: 0.9, length: 300 },
            ],
            phi: Vec::new(),
            intercept: [0.0, 0.0],
            innovation: Innovation::Gaussian,
            seed: 1,
            require_stationary: true,
            cycles: 1,
        }
    }
}

pub fn to_matrix(m: &[[f64; 2]; 2]) -> Matrix2<f64> {
    Matrix2::new(m[0][0], m[0][1], m[1][0], m[1][1])
}

pub fn from_matrix(m: &Matrix2<f64>) -> [[f64; 2]; 2] {
    [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]]
}

/// Reduced form of a structural system.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedForm {
    pub b_inv: Matrix2<f64>,
    pub intercept: Vector2<f64>,
    pub coefs: Vec<Matrix2<f64>>,
}

pub fn reduced_form(b_r: f64, b_f: f64, phi: &[[[f64; 2]; 2]], intercept: [f64; 2]) -> Result<ReducedForm> {
    let det = 1.0 - b_r * b_f;
    if det.abs() < 1e-12 || !det.is_finite() {
        return Err(Error::Config(format!("1 - b_r b_f = {det} makes B singular")));
    }
    let b_inv = Matrix2::new(1.0, b_r, b_f, 1.0) / det;
    Ok(ReducedForm {
        b_inv,
        intercept: b_inv * Vector2::new(intercept[0], intercept[1]),
        coefs: phi.iter().map(|m| b_inv * to_matrix(m)).collect(),
    })
}

impl SimConfig {
    pub fn validate(&self) -> Result<ReducedForm> {
        if self.regimes.is_empty() {
            return Err(Error::Config("at least one regime is required".into()));
        }
        for (i, r) in self.regimes.iter().enumerate() {
            if !(r.omega_r > 0.0 && r.omega_f > 0.0) {
                return Err(Error::Config(format!("regime {i}: innovation scales must be positive")));
            }
            if r.length == 0 {
                return Err(Error::Config(format!("regime {i}: zero length")));
            }
        }
        if self.cycles == 0 {
            return Err(Error::Config("cycles must be at least 1".into()));
        }
        self.innovation.validate()?;
        let rf = reduced_form(self.b_r, self.b_f, &self.phi, self.intercept)?;
        if self.require_stationary {
            let rho = companion_spectral_radius(&rf.coefs);
            if rho >= 1.0 {
                return Err(Error::Config(format!("reduced-form companion spectral radius {rho:.4} ≥ 1")));
            }
        }
        Ok(rf)
    }

    pub fn lag_order(&self) -> usize {
        self.phi.len()
    }

    /// Discarded initial observations: `10 × p × 10`.
    pub fn burn_in(&self) -> usize {
        100 * self.lag_order()
    }

    /// Population moments `B⁻¹ Ω_s B⁻ᵀ` of the reduced-form innovations.
    pub fn population_residual_moments(&self) -> Vec<StateMoments> {
        self.regimes
            .iter()
            .enumerate()
            .map(|(s, r)| StateMoments::population(s, self.b_r, self.b_f, r.omega_r, r.omega_f, r.length * self.cycles))
            .collect()
    }

    /// Rank check on the population innovation moments.
    pub fn check_identifiable(&self) -> Result<RankCheck> {
        check_rank(&self.population_residual_moments(), DEFAULT_RANK_TOL)
    }

    /// Stationary covariance of `y_t` if regime `s` persisted forever.
    pub fn population_covariance(&self, regime: usize) -> Result<Matrix2<f64>> {
        let rf = self.validate()?;
        let r = self.regimes[regime];
        let eta = rf.b_inv * Matrix2::new(r.omega_r.powi(2), 0.0, 0.0, r.omega_f.powi(2)) * rf.b_inv.transpose();
        stationary_covariance(&rf.coefs, &eta)
    }
}

/// Stationary covariance of a VAR with innovation covariance `eta_cov`,
/// from the discrete Lyapunov equation on the companion form.
pub fn stationary_covariance(coefs: &[Matrix2<f64>], eta_cov: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    if coefs.is_empty() {
        return Ok(*eta_cov);
    }
    let a = companion(coefs);
    let n = a.nrows();
    let mut q = DMatrix::zeros(n, n);
    for i in 0..2 {
        for j in 0..2 {
            q[(i, j)] = eta_cov[(i, j)];
        }
    }
    let x = discrete_lyapunov(&a, &q).ok_or_else(|| Error::Config("Lyapunov system is singular".into()))?;
    Ok(Matrix2::new(x[(0, 0)], x[(0, 1)], x[(1, 0)], x[(1, 1)]))
}

/// Simulated `(r, f)` series with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SvarSample {
    pub series: Vec<[f64; 2]>,
    pub regimes: Vec<usize>,
    pub truth: SvarTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvarTruth {
    pub b_r: f64,
    pub b_f: f64,
    pub omega_r: Vec<f64>,
    pub omega_f: Vec<f64>,
    pub regime_lengths: Vec<usize>,
    pub cycles: usize,
    pub b_inverse: [[f64; 2]; 2],
    pub reduced_intercept: [f64; 2],
    pub reduced_coefs: Vec<[[f64; 2]; 2]>,
    pub seed: u64,
}

/// Writes `t,regime,r,f` rows.
pub fn write_svar_csv<W: Write>(out: W, sample: &SvarSample) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "regime", "r", "f"])?;
    for (t, (y, s)) in sample.series.iter().zip(&sample.regimes).enumerate() {
        w.write_record([t.to_string(), s.to_string(), y[0].to_string(), y[1].to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Draws `y_t = c̃ + Σ Φ̃_j y_{t−j} + B⁻¹ ε_t` with `ε_t` scaled per observation
/// by `schedule[t] = (ω_r, ω_f)`. `burn_in` extra draws using `schedule[0]`
/// precede the returned sample.
pub fn simulate_svar_schedule(
    rf: &ReducedForm,
    schedule: &[(f64, f64)],
    innovation: Innovation,
    burn_in: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<[f64; 2]>> {
    let sampler = innovation.sampler()?;
    let p = rf.coefs.len();
    let start = {
        let sum: Matrix2<f64> = rf.coefs.iter().sum();
        (Matrix2::identity() - sum)
            .try_inverse()
            .map(|inv| inv * rf.intercept)
            .unwrap_or_else(Vector2::zeros)
    };
    let mut history: Vec<Vector2<f64>> = vec![start; p];
    let mut out = Vec::with_capacity(schedule.len());
    let first = schedule.first().copied().unwrap_or((1.0, 1.0));
    for t in 0..burn_in + schedule.len() {
        let (wr, wf) = if t < burn_in { first } else { schedule[t - burn_in] };
        let eps = Vector2::new(wr * sampler.draw(rng), wf * sampler.draw(rng));
        let mut y = rf.intercept + rf.b_inv * eps;
        for (j, phi) in rf.coefs.iter().enumerate() {
            y += phi * history[history.len() - 1 - j];
        }
        if p > 0 {
            history.remove(0);
            history.push(y);
        }
        if t >= burn_in {
            out.push([y[0], y[1]]);
        }
    }
    Ok(out)
}

pub fn simulate_svar(config: &SimConfig) -> Result<SvarSample> {
    let rf = config.validate()?;
    let mut schedule = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..config.cycles {
        for (s, r) in config.regimes.iter().enumerate() {
            schedule.extend(std::iter::repeat_n((r.omega_r, r.omega_f), r.length));
            labels.extend(std::iter::repeat_n(s, r.length));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let series = simulate_svar_schedule(&rf, &schedule, config.innovation, config.burn_in(), &mut rng)?;
    Ok(SvarSample {
        series,
        regimes: labels,
        truth: SvarTruth {
            b_r: config.b_r,
            b_f: config.b_f,
            omega_r: config.regimes.iter().map(|r| r.omega_r).collect(),
            omega_f: config.regimes.iter().map(|r| r.omega_f).collect(),
            regime_lengths: config.regimes.iter().map(|r| r.length).collect(),
            cycles: config.cycles,
            b_inverse: from_matrix(&rf.b_inv),
            reduced_intercept: [rf.intercept[0], rf.intercept[1]],
            reduced_coefs: rf.coefs.iter().map(from_matrix).collect(),
            seed: config.seed,
        },
    })
}

/// Best-quote dynamics of the synthetic book.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BookSimConfig {
    pub tick_size: f64,
    pub initial_price: f64,
    /// Typical queue size at the best quotes, contracts.
    pub base_depth: u64,
    /// Mean number of book events per second.
    pub event_rate: f64,
    /// Probability that an event moves a best price.
    pub price_move_prob: f64,
    /// Largest size change of a pure size update.
    pub size_step: u64,
    pub seed: u64,
}

impl Default for BookSimConfig {
    fn default() -> Self {
        Self {
            tick_size: 0.25,
            initial_price: 1400.0,
            base_depth: 600,
            event_rate: 20.0,
            price_move_prob: 0.05,
            size_step: 40,
            seed: 7,
        }
    }
}

impl BookSimConfig {
    /// Quotes never change.
    pub fn zero_volatility(seed: u64) -> Self {
        Self {
            price_move_prob: 0.0,
            size_step: 0,
            seed,
            ..Self::default()
        }
    }
}

/// Generator bookkeeping for one second.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct SecondTruth {
    /// Σ e_n in contracts.
    pub flow: i64,
    pub events: u32,
    pub depth: Option<f64>,
    /// Event-weighted mean spread; `None` without events.
    pub spread: Option<f64>,
}

impl SecondTruth {
    pub fn flow_thousands(&self) -> f64 {
        self.flow as f64 / 1000.0
    }
}

/// Writes per-second generator bookkeeping; undefined fields are empty.
pub fn write_second_truth_csv<W: Write>(out: W, truth: &[SecondTruth]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "flow", "events", "depth_thousands", "spread"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (t, s) in truth.iter().enumerate() {
        w.write_record([t.to_string(), s.flow.to_string(), s.events.to_string(), opt(s.depth), opt(s.spread)])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct Book {
    bid: i64,
    ask: i64,
    bid_size: u64,
    ask_size: u64,
}

#[derive(Default)]
struct SecondLedger {
    flow: i64,
    events: u32,
    bid_depth: i64,
    bid_changes: u32,
    ask_depth: i64,
    ask_changes: u32,
    spread_sum: f64,
}

/// Random walk of best quotes with known per-second flow, depth and spread.
///
/// The stream starts with an opening snapshot at time 0. Flow and depth are
/// booked from the type of each generated move (queue added, queue depleted,
/// size revised), not by comparing consecutive quotes.
pub fn simulate_bbo(config: &BookSimConfig, duration_secs: usize) -> Result<(Vec<BboEvent>, Vec<SecondTruth>)> {
    if !(config.tick_size > 0.0) {
        return Err(Error::Config("tick size must be positive".into()));
    }
    if config.base_depth == 0 {
        return Err(Error::Config("base depth must be positive".into()));
    }
    if !(config.event_rate >= 0.0) || !(0.0..=1.0).contains(&config.price_move_prob) {
        return Err(Error::Config("event rate must be ≥ 0 and move probability in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let tick = config.tick_size;
    let base = (config.initial_price / tick).round() as i64;
    let mut book = Book {
        bid: base,
        ask: base + 1,
        bid_size: config.base_depth,
        ask_size: config.base_depth,
    };
    let price = |ticks: i64| ticks as f64 * tick;
    let mut seq = 1u64;
    let snapshot = |ts: f64, seq: u64, b: &Book| BboEvent {
        timestamp: ts,
        sequence: seq,
        bid_price: price(b.bid),
        bid_size: b.bid_size,
        ask_price: price(b.ask),
        ask_size: b.ask_size,
    };
    let mut events = vec![snapshot(0.0, seq, &book)];
    let mut truth = Vec::with_capacity(duration_secs);
    let poisson = (config.event_rate > 0.0)
        .then(|| Poisson::new(config.event_rate).map_err(|e| Error::Config(e.to_string())))
        .transpose()?;
    let fresh_size = |rng: &mut ChaCha8Rng| rng.random_range(1..=2 * config.base_depth);

    for t in 0..duration_secs {
        let n = poisson.as_ref().map(|p| p.sample(&mut rng) as usize).unwrap_or(0);
        let mut stamps: Vec<f64> = (0..n).map(|_| t as f64 + rng.random::<f64>()).collect();
        stamps.sort_by(f64::total_cmp);
        let mut ledger = SecondLedger::default();
        for ts in stamps {
            let prev = book;
            let mut flow = 0i64;
            let moved = config.price_move_prob > 0.0 && rng.random::<f64>() < config.price_move_prob;
            let wide = book.ask - book.bid > 1;
            if moved || wide {
                let kind = if wide { rng.random_range(0..2) * 2 } else { rng.random_range(0..6) };
                let (bid_up, bid_down, ask_down, ask_up) = match kind {
                    0 => (true, false, false, false),
                    1 => (false, true, false, false),
                    2 => (false, false, true, false),
                    3 => (false, false, false, true),
                    4 => (true, false, false, true),
                    _ => (false, true, true, false),
                };
                if bid_up && book.bid + 1 < book.ask {
                    book.bid += 1;
                    book.bid_size = fresh_size(&mut rng);
                    flow += book.bid_size as i64;
                    ledger.bid_depth += prev.bid_size as i64;
                    ledger.bid_changes += 1;
                } else if bid_up && ask_up {
                    // Whole quote shifts up: new bid joins at the old ask level.
                    book.bid += 1;
                    book.bid_size = fresh_size(&mut rng);
                    flow += book.bid_size as i64;
                    ledger.bid_depth += prev.bid_size as i64;
                    ledger.bid_changes += 1;
                }
                if bid_down {
                    book.bid -= 1;
                    book.bid_size = fresh_size(&mut rng);
                    flow -= prev.bid_size as i64;
                    ledger.bid_depth += book.bid_size as i64;
                    ledger.bid_changes += 1;
                }
                // The ask may only touch the old bid if the bid moved away.
                if ask_down && (book.ask - 1 > book.bid || bid_down) {
                    book.ask -= 1;
                    book.ask_size = fresh_size(&mut rng);
                    flow -= book.ask_size as i64;
                    ledger.ask_depth += prev.ask_size as i64;
                    ledger.ask_changes += 1;
                }
                if ask_up {
                    book.ask += 1;
                    book.ask_size = fresh_size(&mut rng);
                    flow += prev.ask_size as i64;
                    ledger.ask_depth += book.ask_size as i64;
                    ledger.ask_changes += 1;
                }
            } else if config.size_step > 0 {
                let step = config.size_step as i64;
                let delta = rng.random_range(-step..=step);
                if rng.random::<bool>() {
                    let new = (book.bid_size as i64 + delta).max(1);
                    flow += new - book.bid_size as i64;
                    book.bid_size = new as u64;
                } else {
                    let new = (book.ask_size as i64 + delta).max(1);
                    flow -= new - book.ask_size as i64;
                    book.ask_size = new as u64;
                }
            }
            seq += 1;
            let ev = snapshot(ts, seq, &book);
            ledger.flow += flow;
            ledger.events += 1;
            ledger.spread_sum += ev.spread();
            events.push(ev);
        }
        truth.push(SecondTruth {
            flow: ledger.flow,
            events: ledger.events,
            depth: depth_from_sums(ledger.bid_depth, ledger.bid_changes, ledger.ask_depth, ledger.ask_changes),
            spread: (ledger.events > 0).then(|| ledger.spread_sum / ledger.events as f64),
        });
    }
    Ok((events, truth))
}

/// Multi-day panel of one-second bars driven by a structural VAR.
///
/// Innovation scales follow a per-regime pattern inside every estimation
/// window (so each window is heteroskedastic), multiplied by per-slot
/// log-normal jitter. On announcement days the release slot has its scales
/// multiplied by `announcement_scale_r` / `announcement_scale_f`. Activity
/// measures are drawn independently of returns and flows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PanelSimConfig {
    pub days: usize,
    pub start_date: String,
    pub session_open: u32,
    pub session_close: u32,
    pub window_secs: usize,
    pub regime_secs: usize,
    pub b_r: f64,
    pub b_f: f64,
    pub phi: Vec<[[f64; 2]; 2]>,
    pub omega_r: f64,
    pub omega_f: f64,
    pub regime_pattern_r: Vec<f64>,
    pub regime_pattern_f: Vec<f64>,
    /// Standard deviation of the log jitter applied per regime slot.
    pub slot_jitter: f64,
    /// Fraction of days with an announcement.
    pub announcement_share: f64,
    /// Release time, seconds of day.
    pub announcement_time: u32,
    pub announcement_scale_r: f64,
    pub announcement_scale_f: f64,
    pub events_per_second: f64,
    pub innovation: Innovation,
    pub seed: u64,
}

impl Default for PanelSimConfig {
    fn default() -> Self {
        Self {
            days: 2,
            start_date: "2024-01-02".into(),
            session_open: SessionBounds::default().open,
            session_close: SessionBounds::default().close,
            window_secs: 900,
            regime_secs: 300,
            b_r: 0.8,
            b_f: 0.3,
            phi: vec![[[-0.1, 0.05], [0.02, 0.1]]],
            omega_r: 0.8,
            omega_f: 0.5,
            regime_pattern_r: vec![1.0, 0.35, 0.6],
            regime_pattern_f: vec![1.15, 2.5, 1.5],
            slot_jitter: 0.05,
            announcement_share: 0.0,
            announcement_time: 9 * 3600,
            announcement_scale_r: 1.0,
            announcement_scale_f: 1.0,
            events_per_second: 40.0,
            innovation: Innovation::Gaussian,
            seed: 11,
        }
    }
}

/// Simulated panel and what generated it.
#[derive(Debug, Clone)]
pub struct PanelSample {
    pub days: Vec<SessionSeries>,
    pub calendar: AnnouncementCalendar,
    pub truth: PanelTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelTruth {
    pub b_r: f64,
    pub b_f: f64,
    pub reduced_coefs: Vec<[[f64; 2]; 2]>,
    /// Per day, per regime slot `(ω_r, ω_f)`.
    pub slot_omegas: Vec<Vec<(f64, f64)>>,
    pub announcement_days: Vec<String>,
    pub seed: u64,
}

/// Consecutive weekdays starting at `start` (inclusive if a weekday).
pub fn trading_dates(start: &str, days: usize) -> Result<Vec<String>> {
    let mut d = NaiveDate::parse_from_str(start, "%Y-%m-%d")
        .map_err(|e| Error::Config(format!("start date `{start}`: {e}")))?;
    let mut out = Vec::with_capacity(days);
    while out.len() < days {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d.format("%Y-%m-%d").to_string());
        }
        d = d.succ_opt().ok_or_else(|| Error::Config("date overflow".into()))?;
    }
    Ok(out)
}

pub fn simulate_panel(config: &PanelSimConfig) -> Result<PanelSample> {
    let bounds = SessionBounds::new(config.session_open, config.session_close)?;
    if config.regime_secs == 0 || config.window_secs % config.regime_secs != 0 {
        return Err(Error::Config("regime length must divide the window length".into()));
    }
    let per_window = config.window_secs / config.regime_secs;
    if config.regime_pattern_r.len() != per_window || config.regime_pattern_f.len() != per_window {
        return Err(Error::Config(format!("regime patterns need {per_window} entries")));
    }
    let rf = reduced_form(config.b_r, config.b_f, &config.phi, [0.0, 0.0])?;
    if companion_spectral_radius(&rf.coefs) >= 1.0 {
        return Err(Error::Config("panel VAR is not stationary".into()));
    }
    let dates = trading_dates(&config.start_date, config.days)?;
    let n_secs = bounds.len();
    let n_slots = n_secs.div_ceil(config.regime_secs);
    let release_slot = config
        .announcement_time
        .checked_sub(bounds.open)
        .filter(|&s| (s as usize) < n_secs)
        .map(|s| s as usize / config.regime_secs);

    let mut days = Vec::with_capacity(dates.len());
    let mut slot_omegas = Vec::with_capacity(dates.len());
    let mut announcement_days = Vec::new();
    let mut entries = Vec::new();
    for (d, date) in dates.iter().enumerate() {
        let mut rng = rng_for(config.seed, d as u64);
        let announce = rng.random::<f64>() < config.announcement_share;
        let mut omegas = Vec::with_capacity(n_slots);
        for slot in 0..n_slots {
            let k = slot % per_window;
            let jr: f64 = StandardNormal.sample(&mut rng);
            let jf: f64 = StandardNormal.sample(&mut rng);
            let mut wr = config.omega_r * config.regime_pattern_r[k] * (config.slot_jitter * jr).exp();
            let mut wf = config.omega_f * config.regime_pattern_f[k] * (config.slot_jitter * jf).exp();
            if announce && release_slot == Some(slot) {
                wr *= config.announcement_scale_r;
                wf *= config.announcement_scale_f;
            }
            omegas.push((wr, wf));
        }
        if announce {
            let consensus = 50.0;
            let surprise: f64 = StandardNormal.sample(&mut rng);
            entries.push(Announcement {
                date: date.clone(),
                time: config.announcement_time,
                name: "ISM Manufacturing".into(),
                actual: Some(consensus + surprise),
                consensus: Some(consensus),
            });
            announcement_days.push(date.clone());
        }
        let schedule: Vec<(f64, f64)> = (0..n_secs).map(|t| omegas[t / config.regime_secs]).collect();
        let burn = 100 * rf.coefs.len();
        let series = simulate_svar_schedule(&rf, &schedule, config.innovation, burn, &mut rng)?;
        let events = Poisson::new(config.events_per_second.max(1e-9)).map_err(|e| Error::Config(e.to_string()))?;
        let bars = series
            .iter()
            .enumerate()
            .map(|(t, y)| {
                let ne = events.sample(&mut rng) as u32;
                let ase = (ne > 0).then(|| 0.15 * (0.4 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).exp());
                let spr = if rng.random::<f64>() < 0.02 { 0.5 } else { 0.25 };
                let depth = (rng.random::<f64>() < 0.2).then(|| 0.6 * (0.3 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).exp());
                SecondBar {
                    t: t as u32,
                    r: y[0],
                    f: y[1],
                    ne,
                    ase,
                    spr,
                    depth,
                }
            })
            .collect();
        days.push(SessionSeries {
            date: date.clone(),
            bars,
            gap_policy: GapPolicy::ZeroFill,
        });
        slot_omegas.push(omegas);
    }
    Ok(PanelSample {
        days,
        calendar: AnnouncementCalendar::new(entries),
        truth: PanelTruth {
            b_r: config.b_r,
            b_f: config.b_f,
            reduced_coefs: rf.coefs.iter().map(from_matrix).collect(),
            slot_omegas,
            announcement_days,
            seed: config.seed,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::aggregate_seconds;

    #[test]
    fn fixed_seed_is_bit_identical() {
        let cfg = SimConfig {
            phi: vec![[[0.2, 0.1], [0.0, 0.3]]],
            ..SimConfig::default()
        };
        let a = simulate_svar(&cfg).unwrap();
        let b = simulate_svar(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.series.len(), 900);
        assert_eq!(a.regimes.iter().filter(|&&s| s == 1).count(), 300);
    }

    #[test]
    fn diagonal_iid_case_has_scaled_identity_covariance() {
        let cfg = SimConfig {
            b_r: 0.0,
            b_f: 0.0,
            regimes: vec![RegimeSpec { omega_r: 0.7, omega_f: 0.7, length: 200_000 }],
            ..SimConfig::default()
        };
        let s = simulate_svar(&cfg).unwrap();
        let n = s.series.len() as f64;
        let (mut rr, mut ff, mut rf) = (0.0, 0.0, 0.0);
        for y in &s.series {
            rr += y[0] * y[0];
            ff += y[1] * y[1];
            rf += y[0] * y[1];
        }
        // Standard error of a variance estimate is about σ²·sqrt(2/n) ≈ 0.0015.
        assert!((rr / n - 0.49).abs() < 0.01);
        assert!((ff / n - 0.49).abs() < 0.01);
        assert!((rf / n).abs() < 0.01);
    }

    #[test]
    fn non_stationary_config_is_rejected() {
        let cfg = SimConfig {
            b_r: 0.0,
            b_f: 0.0,
            phi: vec![[[1.0, 0.0], [0.0, 0.5]]],
            ..SimConfig::default()
        };
        assert!(matches!(simulate_svar(&cfg), Err(Error::Config(_))));
        let singular = SimConfig {
            b_r: 2.0,
            b_f: 0.5,
            ..SimConfig::default()
        };
        assert!(matches!(simulate_svar(&singular), Err(Error::Config(_))));
    }

    #[test]
    fn zero_volatility_book_has_no_flow() {
        let (events, truth) = simulate_bbo(&BookSimConfig::zero_volatility(3), 60).unwrap();
        assert!(events.windows(2).all(|w| w[0].bid_price == w[1].bid_price && w[0].ask_size == w[1].ask_size));
        assert!(truth.iter().all(|t| t.flow == 0));
        let bars = aggregate_seconds("d", &events, SessionBounds::new(0, 60).unwrap()).unwrap();
        assert!(bars.bars.iter().all(|b| b.f == 0.0 && b.r == 0.0));
    }

    #[test]
    fn spread_never_below_one_tick() {
        let cfg = BookSimConfig {
            price_move_prob: 0.4,
            ..BookSimConfig::default()
        };
        let (events, truth) = simulate_bbo(&cfg, 300).unwrap();
        assert!(events.iter().all(|e| e.spread() >= cfg.tick_size - 1e-9));
        assert!(truth.iter().filter_map(|t| t.spread).all(|s| s >= cfg.tick_size - 1e-9));
    }

    #[test]
    fn trading_dates_skip_weekends() {
        let d = trading_dates("2024-01-05", 3).unwrap();
        assert_eq!(d, vec!["2024-01-05", "2024-01-08", "2024-01-09"]);
    }

    #[test]
    fn population_rank_condition_holds_for_distinct_ratios() {
        assert!(SimConfig::default().check_identifiable().unwrap().passed);
        let homo = SimConfig {
            regimes: vec![RegimeSpec { omega_r: 1.0, omega_f: 0.5, length: 300 }; 3],
            ..SimConfig::default()
        };
        assert!(!homo.check_identifiable().unwrap().passed);
    }
}
