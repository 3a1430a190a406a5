//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Runs as a plain binary (`harness = false`) so the per-criterion lines are
//! always printed. `cargo test --test acceptance` runs it alone.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Matrix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ofi_svar::dynamics::{irf_sequence, long_run_from, long_run_impact};
use ofi_svar::ith::{
    estimate_gmm, moment_conditions, pooled_ols_slope, solve_two_state, GmmConfig, RegimePartition, StateMoments,
    StructuralEstimate, StructuralParams,
};
use ofi_svar::linalg::companion_spectral_radius;
use ofi_svar::market_data::{aggregate_seconds, compute_event, BboEvent, SessionBounds};
use ofi_svar::panel::{
    announcement_regressions, clustered_ols, run_protocol, ExclusionReason, ProtocolConfig, RegressionOptions,
    WindowSpec,
};
use ofi_svar::sim::{simulate_bbo, simulate_panel, simulate_svar, BookSimConfig, PanelSimConfig, SimConfig};
use ofi_svar::var::{fit_var, residual_moments, VarFit};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mc_se(v: &[f64]) -> f64 {
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (var / v.len() as f64).sqrt()
}

/// S = 3 design shared by criteria 1 and 7: VAR(1) dynamics, 300 seconds
/// per regime.
fn recovery_config(seed: u64) -> SimConfig {
    SimConfig {
        phi: vec![[[0.1, 0.05], [0.0, 0.2]]],
        seed,
        ..SimConfig::default()
    }
}

fn estimate_replication(seed: u64) -> Result<(StructuralEstimate, Vec<StateMoments>), String> {
    let cfg = recovery_config(seed);
    let sample = simulate_svar(&cfg).map_err(|e| e.to_string())?;
    let fit = fit_var(&sample.series, 10).map_err(|e| e.to_string())?;
    let part = RegimePartition::consecutive(&[300, 300, 300]).map_err(|e| e.to_string())?;
    let moments = residual_moments(&fit, &part).map_err(|e| e.to_string())?;
    let est = estimate_gmm(&moments, &GmmConfig::default()).map_err(|e| e.to_string())?;
    Ok((est, moments))
}

fn criterion_1() -> Outcome {
    let reps = 200u64;
    let mut params: Vec<Vec<f64>> = Vec::new();
    let mut times = Vec::new();
    let mut failures = 0;
    for rep in 0..reps {
        let t0 = Instant::now();
        match estimate_replication(10_000 + rep) {
            Ok((est, _)) => params.push(est.params()),
            Err(_) => failures += 1,
        }
        times.push(t0.elapsed());
    }
    times.sort();
    let median = times[times.len() / 2];
    let cfg = recovery_config(0);
    let mut truth = vec![cfg.b_r, cfg.b_f];
    truth.extend(cfg.regimes.iter().map(|r| r.omega_r));
    truth.extend(cfg.regimes.iter().map(|r| r.omega_f));
    let names = ofi_svar::ith::param_names(3);
    let mut worst = (0.0f64, String::new());
    let mut all_within = true;
    for (i, name) in names.iter().enumerate() {
        let col: Vec<f64> = params.iter().map(|p| p[i]).collect();
        let z = (mean(&col) - truth[i]).abs() / mc_se(&col);
        all_within &= z <= 3.0;
        if z > worst.0 {
            worst = (z, name.clone());
        }
    }
    let b_r: Vec<f64> = params.iter().map(|p| p[0]).collect();
    let b_f: Vec<f64> = params.iter().map(|p| p[1]).collect();
    Outcome::new(
        failures == 0 && all_within && median < Duration::from_secs(60),
        format!(
            "{} replications, mean b_r {:.4} (truth 0.8, MC SE {:.4}), mean b_f {:.4} (truth 0.3, MC SE {:.4}), \
             largest |bias|/SE {:.2} ({}), failures {failures}, median run {:.1?}",
            params.len(),
            mean(&b_r),
            mc_se(&b_r),
            mean(&b_f),
            mc_se(&b_f),
            worst.0,
            worst.1,
            median
        ),
    )
}

/// Structural parameters with `|1 − b_r b_f| ≥ 0.3` and positive scales.
fn random_truth(rng: &mut ChaCha8Rng, states: usize) -> StructuralParams {
    loop {
        let b_r: f64 = rng.random_range(0.05..1.2);
        let b_f: f64 = rng.random_range(-0.5..0.5);
        if (1.0 - b_r * b_f).abs() < 0.3 {
            continue;
        }
        return StructuralParams {
            b_r,
            b_f,
            omega_r: (0..states).map(|_| rng.random_range(0.2..2.0)).collect(),
            omega_f: (0..states).map(|_| rng.random_range(0.2..2.0)).collect(),
        };
    }
}

fn population(p: &StructuralParams, n: usize) -> Vec<StateMoments> {
    (0..p.omega_r.len())
        .map(|s| StateMoments::population(s, p.b_r, p.b_f, p.omega_r[s], p.omega_f[s], n))
        .collect()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut max_diff = 0.0f64;
    let mut sets = 0;
    let mut failures = Vec::new();
    while sets < 1000 {
        let truth = random_truth(&mut rng, 2);
        let moments = population(&truth, 300);
        // Admissible: the pair is well separated and the closed form exists.
        if !ofi_svar::ith::check_rank(&moments, 1e-2).map(|c| c.passed).unwrap_or(false) {
            continue;
        }
        let Ok(closed) = solve_two_state(&moments) else {
            continue;
        };
        sets += 1;
        match estimate_gmm(&moments, &GmmConfig::default()) {
            Ok(gmm) => {
                for (a, b) in gmm.params().iter().zip(closed.params()) {
                    max_diff = max_diff.max((a - b).abs());
                }
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    Outcome::new(
        failures.is_empty() && max_diff <= 1e-6,
        format!("{sets} moment sets, max |GMM − closed form| {max_diff:.2e}, GMM failures {}", failures.len()),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut max_abs = 0.0f64;
    let mut cases = 0;
    let anchor = StructuralParams {
        b_r: 0.8,
        b_f: 0.3,
        omega_r: vec![0.6, 1.2, 0.9],
        omega_f: vec![0.3, 0.35, 0.5],
    };
    let mut all = vec![anchor];
    for i in 0..1000 {
        all.push(random_truth(&mut rng, 2 + i % 4));
    }
    for p in &all {
        let g = moment_conditions(p, &population(p, 300));
        max_abs = max_abs.max(g.amax());
        cases += 1;
    }
    Outcome::new(
        max_abs <= 1e-12,
        format!("{cases} parameter sets (S = 2..5), max |g| {max_abs:.2e}"),
    )
}

fn criterion_4() -> Outcome {
    let spec = WindowSpec::default();
    let config = ProtocolConfig::default();
    let mut lines = Vec::new();
    let mut pass = true;
    let cases = [
        ("homoskedastic", vec![1.0, 1.0, 1.0], vec![1.0, 1.0, 1.0]),
        ("proportional", vec![0.5, 1.5, 1.0], vec![0.5, 1.5, 1.0]),
    ];
    for (name, pr, pf) in cases {
        let mut total = 0;
        let mut rank = 0;
        for seed in 0..2u64 {
            let sim = PanelSimConfig {
                days: 5,
                regime_pattern_r: pr.clone(),
                regime_pattern_f: pf.clone(),
                slot_jitter: 0.0,
                seed: 40 + seed,
                ..PanelSimConfig::default()
            };
            let panel = match simulate_panel(&sim) {
                Ok(p) => p,
                Err(e) => return Outcome::new(false, format!("simulation failed: {e}")),
            };
            let out = match run_protocol(&panel.days, &spec, &config) {
                Ok(o) => o,
                Err(e) => return Outcome::new(false, format!("protocol failed: {e}")),
            };
            total += out.report.attempted();
            rank += out
                .report
                .entries
                .iter()
                .filter(|e| e.reason == ExclusionReason::Rank)
                .count();
        }
        pass &= rank == total && total > 0;
        lines.push(format!("{name}: {rank}/{total} windows excluded for rank"));
    }
    Outcome::new(pass, lines.join(", "))
}

fn random_stationary_system(rng: &mut ChaCha8Rng) -> (Vec<Matrix2<f64>>, Matrix2<f64>, f64) {
    let p = rng.random_range(1..=4);
    let raw: Vec<Matrix2<f64>> = (0..p)
        .map(|_| Matrix2::from_fn(|_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let rho0 = companion_spectral_radius(&raw);
    let target = rng.random_range(0.05..=0.9);
    // Scaling Φ_j by c^j scales every companion eigenvalue by c.
    let c = target / rho0;
    let coefs: Vec<Matrix2<f64>> = raw.iter().enumerate().map(|(j, m)| m * c.powi(j as i32 + 1)).collect();
    let b_r = rng.random_range(0.0..1.2);
    let b_f = rng.random_range(-0.5..0.5);
    let b_inv = Matrix2::new(1.0, b_r, b_f, 1.0) / (1.0 - b_r * b_f);
    let rho = companion_spectral_radius(&coefs);
    (coefs, b_inv, rho)
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut max_err = 0.0f64;
    let mut max_rho = 0.0f64;
    for _ in 0..100 {
        let (coefs, b_inv, rho) = random_stationary_system(&mut rng);
        max_rho = max_rho.max(rho);
        let lr = long_run_from(&coefs, b_inv);
        let Some(closed) = lr.matrix else {
            return Outcome::new(false, format!("stationary system (radius {rho:.3}) flagged non-stationary"));
        };
        let truncated: Matrix2<f64> = irf_sequence(&coefs, b_inv, 200).iter().sum();
        max_err = max_err.max((closed - truncated).amax());
    }

    let fit = VarFit {
        window_id: None,
        lag_order: 1,
        intercept: Default::default(),
        coefs: vec![Matrix2::zeros()],
        residuals: Vec::new(),
        r_squared: [0.0; 2],
        aic: Vec::new(),
        window_len: 0,
    };
    let est = StructuralEstimate {
        b_r: 0.5,
        b_f: 0.2,
        omega_r: vec![1.0, 1.0],
        omega_f: vec![1.0, 1.0],
        std_errors: None,
        objective: 0.0,
        j_stat: None,
        j_df: 0,
        j_pvalue: None,
        n_total: 0,
    };
    let hand = long_run_impact(&fit, &est).ok().and_then(|l| l.matrix).map(|m| m[(0, 1)]);
    let expected = 0.5 / 0.9;
    let hand_ok = hand.is_some_and(|v| (v - expected).abs() <= f64::EPSILON * expected);
    Outcome::new(
        max_err <= 1e-8 && hand_ok,
        format!(
            "100 systems (max radius {max_rho:.3}), max |closed − truncated K=200| {max_err:.2e}; \
             hand case I_rf = {} vs 0.5/0.9 = {expected}",
            hand.map(|v| v.to_string()).unwrap_or_else(|| "unavailable".into())
        ),
    )
}

/// Literal four-indicator evaluation of `e_n`.
fn event_oracle(p: &BboEvent, c: &BboEvent) -> i64 {
    let ind = |b: bool| if b { 1i64 } else { 0 };
    let (qb0, qb1, qa0, qa1) = (p.bid_size as i64, c.bid_size as i64, p.ask_size as i64, c.ask_size as i64);
    qb1 * ind(c.bid_price >= p.bid_price) - qb0 * ind(c.bid_price <= p.bid_price)
        - qa1 * ind(c.ask_price <= p.ask_price)
        + qa0 * ind(c.ask_price >= p.ask_price)
}

fn random_quote(rng: &mut ChaCha8Rng, seq: u64) -> BboEvent {
    let bid_ticks: i64 = rng.random_range(3996..=4000);
    let spread: i64 = rng.random_range(0..=2);
    BboEvent {
        timestamp: 0.0,
        sequence: seq,
        bid_price: bid_ticks as f64 * 0.25,
        bid_size: rng.random_range(0..=1000),
        ask_price: (bid_ticks + spread) as f64 * 0.25,
        ask_size: rng.random_range(0..=1000),
    }
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for i in 0..10_000u64 {
        let prev = random_quote(&mut rng, 2 * i);
        let curr = random_quote(&mut rng, 2 * i + 1);
        match compute_event(&prev, &curr) {
            Ok(e) if e == event_oracle(&prev, &curr) => {}
            _ => mismatches += 1,
        }
    }
    let mut seconds = 0;
    let mut stream_mismatches = 0;
    for (seed, move_prob) in [(1u64, 0.05), (2, 0.3), (3, 0.8), (4, 0.0)] {
        let cfg = BookSimConfig {
            price_move_prob: move_prob,
            seed,
            ..BookSimConfig::default()
        };
        let duration = 1800;
        let bounds = SessionBounds::new(0, duration as u32).expect("bounds");
        let (events, truth) = simulate_bbo(&cfg, duration).expect("book simulation");
        let series = aggregate_seconds("sim", &events, bounds).expect("aggregation");
        for (bar, t) in series.bars.iter().zip(&truth) {
            seconds += 1;
            if bar.f != t.flow_thousands() || bar.depth != t.depth {
                stream_mismatches += 1;
            }
        }
    }
    Outcome::new(
        mismatches == 0 && stream_mismatches == 0,
        format!(
            "10000 event pairs, {mismatches} mismatches vs indicator oracle; \
             {seconds} simulated seconds, {stream_mismatches} flow/depth mismatches vs generator"
        ),
    )
}

fn criterion_7() -> Outcome {
    let cfg = recovery_config(0);
    let (mut num, mut den) = (0.0, 0.0);
    for r in &cfg.regimes {
        let (wr, wf) = (r.omega_r.powi(2), r.omega_f.powi(2));
        num += r.length as f64 * (cfg.b_f * wr + cfg.b_r * wf);
        den += r.length as f64 * (cfg.b_f * cfg.b_f * wr + wf);
    }
    let analytic = num / den;
    let mut ols = Vec::new();
    let mut ith = Vec::new();
    for rep in 0..200u64 {
        if let Ok((est, moments)) = estimate_replication(70_000 + rep) {
            ols.push(pooled_ols_slope(&moments));
            ith.push(est.b_r);
        }
    }
    let (m_ols, se_ols) = (mean(&ols), mc_se(&ols));
    let (m_ith, se_ith) = (mean(&ith), mc_se(&ith));
    let ols_matches_bias = (m_ols - analytic).abs() <= 3.0 * se_ols;
    let ols_biased = (m_ols - cfg.b_r).abs() > 3.0 * se_ols;
    let ith_unbiased = (m_ith - cfg.b_r).abs() <= 3.0 * se_ith;
    Outcome::new(
        ith.len() == 200 && ols_matches_bias && ols_biased && ith_unbiased,
        format!(
            "OLS slope {m_ols:.4} (MC SE {se_ols:.4}) vs analytic {analytic:.4}, true b_r {}; ITH b_r {m_ith:.4} (MC SE {se_ith:.4})",
            cfg.b_r
        ),
    )
}

fn criterion_8() -> Outcome {
    // Three dates with two observations each, intercept and one regressor.
    let xs = [0.3, 1.1, -0.4, 0.9, 2.0, 1.5];
    let ys = [1.2, 2.9, 0.1, 1.7, 4.4, 2.6];
    let cluster = [0usize, 0, 1, 1, 2, 2];
    let x = DMatrix::from_fn(6, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
    let y = DVector::from_row_slice(&ys);
    let fit = match clustered_ols(&y, &x, &cluster) {
        Ok(f) => f,
        Err(e) => return Outcome::new(false, format!("clustered_ols failed: {e}")),
    };

    // Hand evaluation with scalar sums and the explicit 2 × 2 inverse.
    let n = 6.0;
    let sx: f64 = xs.iter().sum();
    let sxx: f64 = xs.iter().map(|v| v * v).sum();
    let sy: f64 = ys.iter().sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(a, b)| a * b).sum();
    let det = n * sxx - sx * sx;
    let inv = [[sxx / det, -sx / det], [-sx / det, n / det]];
    let b0 = inv[0][0] * sy + inv[0][1] * sxy;
    let b1 = inv[1][0] * sy + inv[1][1] * sxy;
    let mut meat = [[0.0; 2]; 2];
    for g in 0..3 {
        let (mut s0, mut s1) = (0.0, 0.0);
        for i in 0..6 {
            if cluster[i] == g {
                let u = ys[i] - b0 - b1 * xs[i];
                s0 += u;
                s1 += xs[i] * u;
            }
        }
        meat[0][0] += s0 * s0;
        meat[0][1] += s0 * s1;
        meat[1][0] += s1 * s0;
        meat[1][1] += s1 * s1;
    }
    let factor = (3.0 / 2.0) * ((n - 1.0) / (n - 2.0));
    let mut v = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            for c in 0..2 {
                for d in 0..2 {
                    v[a][b] += inv[a][c] * meat[c][d] * inv[d][b];
                }
            }
            v[a][b] *= factor;
        }
    }
    let se_hand = [v[0][0].sqrt(), v[1][1].sqrt()];
    let diff = (fit.std_errors[0] - se_hand[0]).abs().max((fit.std_errors[1] - se_hand[1]).abs());
    Outcome::new(
        diff <= 1e-10,
        format!(
            "clustered SEs ({:.10}, {:.10}) vs hand ({:.10}, {:.10}), max diff {diff:.2e}",
            fit.std_errors[0], fit.std_errors[1], se_hand[0], se_hand[1]
        ),
    )
}

fn criterion_9() -> Outcome {
    let spec = WindowSpec::default();
    let reps = 50u64;
    let mut both = 0;
    let mut pos = 0;
    let mut neg = 0;
    for rep in 0..reps {
        let sim = PanelSimConfig {
            days: 20,
            announcement_share: 0.5,
            announcement_scale_r: 1.5,
            announcement_scale_f: 0.7,
            seed: 90_000 + rep,
            ..PanelSimConfig::default()
        };
        let Ok(panel) = simulate_panel(&sim) else { continue };
        let Ok(out) = run_protocol(&panel.days, &spec, &ProtocolConfig::default()) else {
            continue;
        };
        let Ok(set) = announcement_regressions(&out.rows, &panel.calendar, &spec, &RegressionOptions::default()) else {
            continue;
        };
        let ann = |dep: &str| {
            set.regressions
                .iter()
                .find(|r| r.dependent == dep)
                .and_then(|r| r.term("ANN_t"))
                .map(|t| (t.coef, t.p))
        };
        let up = ann("omega_r").is_some_and(|(c, p)| c > 0.0 && p < 0.05);
        let down = ann("omega_f").is_some_and(|(c, p)| c < 0.0 && p < 0.05);
        pos += up as usize;
        neg += down as usize;
        both += (up && down) as usize;
    }
    let share = both as f64 / reps as f64;
    Outcome::new(
        share >= 0.95,
        format!(
            "{both}/{reps} replications with ANN_t > 0 in ω_r and < 0 in ω_f at p < 0.05 \
             (ω_r alone {pos}, ω_f alone {neg})"
        ),
    )
}

fn criterion_10() -> Outcome {
    let spec = WindowSpec::default();
    let per_day = spec.windows_per_day();
    let mut days = Vec::new();
    for (seed, pattern) in [(1u64, None), (2, Some(vec![1.0, 1.0, 1.0]))] {
        let mut sim = PanelSimConfig {
            days: 2,
            seed,
            start_date: if seed == 1 { "2024-03-04".into() } else { "2024-03-11".into() },
            ..PanelSimConfig::default()
        };
        if let Some(p) = pattern {
            sim.regime_pattern_r = p.clone();
            sim.regime_pattern_f = p;
            sim.slot_jitter = 0.0;
        }
        match simulate_panel(&sim) {
            Ok(p) => days.extend(p.days),
            Err(e) => return Outcome::new(false, format!("simulation failed: {e}")),
        }
    }
    // One truncated day: every window is attempted and excluded.
    let mut broken = days[0].clone();
    broken.date = "2024-03-18".into();
    broken.bars.truncate(1000);
    days.push(broken);
    let out = match run_protocol(&days, &spec, &ProtocolConfig::default()) {
        Ok(o) => o,
        Err(e) => return Outcome::new(false, format!("protocol failed: {e}")),
    };
    let balanced = out
        .report
        .per_day
        .values()
        .all(|d| d.attempted == per_day && d.attempted == d.estimated + d.excluded);
    let rows_match = out.rows.len() == out.report.estimated() && out.report.entries.len() == out.report.excluded();
    Outcome::new(
        per_day == 26 && balanced && rows_match && out.report.attempted() == 26 * days.len(),
        format!(
            "{per_day} windows per day; {} days: attempted {}, estimated {}, excluded {}",
            days.len(),
            out.report.attempted(),
            out.report.estimated(),
            out.report.excluded()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("oracle parameter recovery (S = 3, 200 replications)", criterion_1),
        ("closed-form equivalence (S = 2, 1000 moment sets)", criterion_2),
        ("moment identity at population moments", criterion_3),
        ("rank-condition detection", criterion_4),
        ("long-run identity", criterion_5),
        ("ingestion brute-force equivalence", criterion_6),
        ("endogeneity bias of pooled OLS", criterion_7),
        ("clustered standard errors vs hand sandwich", criterion_8),
        ("planted announcement effect", criterion_9),
        ("protocol accounting", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = run();
        let status = if outcome.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!outcome.pass);
        println!(
            "criterion {:>2} {status}  {name}: {} [{:.1?}]",
            i + 1,
            outcome.detail,
            t0.elapsed()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
