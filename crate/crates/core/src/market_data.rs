//! Best-bid-offer events and their one-second aggregates.
//!
//! Each BBO update `n` is turned into a signed order-flow contribution
//!
//! ```text
//! e_n = q_n^b 1{P_n^b >= P_{n-1}^b} - q_{n-1}^b 1{P_n^b <= P_{n-1}^b}
//!     - q_n^a 1{P_n^a <= P_{n-1}^a} + q_{n-1}^a 1{P_n^a >= P_{n-1}^a}
//! ```
//!
//! and one-second bars collect the order flow imbalance, the mid-quote log
//! return, activity measures and best-level depth around price changes.
//!
//! Conventions:
//! * The first event of a session is the opening snapshot. It fixes the
//!   reference book and mid-quote and does not count as an event.
//! * Seconds without events carry the previous mid forward (`r = 0`,
//!   `f = 0`, `ne = 0`) and report the prevailing spread. Seconds before the
//!   first event report the snapshot spread.
//! * Units: `r` in basis points, `f` and depth in thousands of contracts,
//!   average event size in hundreds of contracts, spread in index points.
//! * The displaced size of an event is `|bid-side term| + |ask-side term|`
//!   of `e_n`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::stats::SummaryRow;

/// One update of the best bid and offer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BboEvent {
    /// Seconds since session open; the integer part selects the bar.
    pub timestamp: f64,
    pub sequence: u64,
    pub bid_price: f64,
    pub bid_size: u64,
    pub ask_price: f64,
    pub ask_size: u64,
}

impl BboEvent {
    pub fn mid(&self) -> f64 {
        0.5 * (self.bid_price + self.ask_price)
    }

    pub fn spread(&self) -> f64 {
        self.ask_price - self.bid_price
    }

    fn check_uncrossed(&self) -> Result<()> {
        if self.ask_price < self.bid_price {
            return Err(Error::CrossedBook {
                sequence: self.sequence,
                bid: self.bid_price,
                ask: self.ask_price,
            });
        }
        Ok(())
    }
}

/// Bid-side and ask-side parts of `e_n`; their sum is the event.
fn event_terms(prev: &BboEvent, curr: &BboEvent) -> (i64, i64) {
    let (qb, qb0) = (curr.bid_size as i64, prev.bid_size as i64);
    let (qa, qa0) = (curr.ask_size as i64, prev.ask_size as i64);
    let mut bid = 0;
    if curr.bid_price >= prev.bid_price {
        bid += qb;
    }
    if curr.bid_price <= prev.bid_price {
        bid -= qb0;
    }
    let mut ask = 0;
    if curr.ask_price <= prev.ask_price {
        ask -= qa;
    }
    if curr.ask_price >= prev.ask_price {
        ask += qa0;
    }
    (bid, ask)
}

/// Signed order-flow contribution `e_n` of the transition `prev -> curr`.
pub fn compute_event(prev: &BboEvent, curr: &BboEvent) -> Result<i64> {
    prev.check_uncrossed()?;
    curr.check_uncrossed()?;
    if curr.sequence <= prev.sequence {
        return Err(Error::Unsorted {
            sequence: curr.sequence,
            reason: format!("sequence does not increase after {}", prev.sequence),
        });
    }
    let (bid, ask) = event_terms(prev, curr);
    Ok(bid + ask)
}

/// Depth in thousands of contracts from per-second sums of sizes posted
/// around price changes and the number of such changes per side.
///
/// A side enters only when its count is positive; with one side the depth is
/// that side's average, with none it is undefined.
pub fn depth_from_sums(bid_sum: i64, bid_changes: u32, ask_sum: i64, ask_changes: u32) -> Option<f64> {
    let bid = (bid_changes > 0).then(|| bid_sum as f64 / bid_changes as f64);
    let ask = (ask_changes > 0).then(|| ask_sum as f64 / ask_changes as f64);
    let contracts = match (bid, ask) {
        (Some(b), Some(a)) => 0.5 * (b + a),
        (Some(b), None) => b,
        (None, Some(a)) => a,
        (None, None) => return None,
    };
    Some(contracts / 1000.0)
}

/// Trading session bounds in seconds of the day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct SessionBounds {
    pub open: u32,
    pub close: u32,
}

impl Default for SessionBounds {
    /// 8:30 to 15:00.
    fn default() -> Self {
        Self {
            open: 8 * 3600 + 30 * 60,
            close: 15 * 3600,
        }
    }
}

impl SessionBounds {
    pub fn new(open: u32, close: u32) -> Result<Self> {
        if close <= open {
            return Err(Error::Config(format!("session close {close} not after open {open}")));
        }
        Ok(Self { open, close })
    }

    /// Number of one-second bars in the session.
    pub fn len(&self) -> usize {
        (self.close - self.open) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.close <= self.open
    }
}

/// One-second aggregate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecondBar {
    /// Second index within the session.
    pub t: u32,
    /// Mid-quote log return, basis points.
    pub r: f64,
    /// Order flow imbalance, thousands of contracts.
    pub f: f64,
    /// Number of order book events.
    pub ne: u32,
    /// Average displaced size per event, hundreds of contracts; `None` when `ne = 0`.
    pub ase: Option<f64>,
    /// Event-weighted mean spread, index points.
    pub spr: f64,
    /// Depth around price changes, thousands of contracts.
    pub depth: Option<f64>,
}

impl SecondBar {
    pub fn empty(t: u32, spr: f64) -> Self {
        Self {
            t,
            r: 0.0,
            f: 0.0,
            ne: 0,
            ase: None,
            spr,
            depth: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GapPolicy {
    /// Empty seconds are present with zero return and zero flow.
    #[default]
    ZeroFill,
}

/// Gapless one-second series for one trading day.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionSeries {
    pub date: String,
    pub bars: Vec<SecondBar>,
    pub gap_policy: GapPolicy,
}

impl SessionSeries {
    /// Checks that every session second is present exactly once, in order.
    pub fn check_gapless(&self, bounds: &SessionBounds) -> Result<()> {
        if self.bars.len() != bounds.len() {
            return Err(Error::InvalidInput(format!(
                "{}: {} bars for a {}-second session",
                self.date,
                self.bars.len(),
                bounds.len()
            )));
        }
        for (i, bar) in self.bars.iter().enumerate() {
            if bar.t as usize != i {
                return Err(Error::InvalidInput(format!(
                    "{}: bar {} carries second {}",
                    self.date, i, bar.t
                )));
            }
        }
        Ok(())
    }

    /// `(r, f)` pairs for bars `start..end`.
    pub fn returns_flows(&self, start: usize, end: usize) -> Vec<[f64; 2]> {
        self.bars[start..end].iter().map(|b| [b.r, b.f]).collect()
    }
}

#[derive(Default)]
struct SecondAccumulator {
    flow: i64,
    events: u32,
    displaced: i64,
    spread_sum: f64,
    bid_depth: i64,
    bid_changes: u32,
    ask_depth: i64,
    ask_changes: u32,
    last_mid: Option<f64>,
    last_spread: f64,
}

/// Builds the gapless one-second series of a session from its BBO events.
pub fn aggregate_seconds(date: &str, events: &[BboEvent], bounds: SessionBounds) -> Result<SessionSeries> {
    let first = events
        .first()
        .ok_or_else(|| Error::Empty(format!("no events for session {date}")))?;
    let n_secs = bounds.len();
    let horizon = n_secs as f64;
    for ev in events {
        ev.check_uncrossed()?;
        if !(ev.timestamp >= 0.0 && ev.timestamp < horizon) {
            return Err(Error::OutOfSession {
                sequence: ev.sequence,
                timestamp: ev.timestamp,
            });
        }
    }
    for w in events.windows(2) {
        if w[1].sequence <= w[0].sequence {
            return Err(Error::Unsorted {
                sequence: w[1].sequence,
                reason: format!("follows sequence {}", w[0].sequence),
            });
        }
        if w[1].timestamp < w[0].timestamp {
            return Err(Error::Unsorted {
                sequence: w[1].sequence,
                reason: format!("timestamp {} precedes {}", w[1].timestamp, w[0].timestamp),
            });
        }
    }

    let mut acc: Vec<SecondAccumulator> = (0..n_secs).map(|_| SecondAccumulator::default()).collect();
    acc[first.timestamp as usize].last_mid = Some(first.mid());
    for w in events.windows(2) {
        let (prev, curr) = (&w[0], &w[1]);
        let a = &mut acc[curr.timestamp as usize];
        let (bid, ask) = event_terms(prev, curr);
        a.flow += bid + ask;
        a.events += 1;
        a.displaced += bid.abs() + ask.abs();
        a.spread_sum += curr.spread();
        if curr.bid_price < prev.bid_price {
            a.bid_depth += curr.bid_size as i64;
            a.bid_changes += 1;
        } else if curr.bid_price > prev.bid_price {
            a.bid_depth += prev.bid_size as i64;
            a.bid_changes += 1;
        }
        if curr.ask_price > prev.ask_price {
            a.ask_depth += curr.ask_size as i64;
            a.ask_changes += 1;
        } else if curr.ask_price < prev.ask_price {
            a.ask_depth += prev.ask_size as i64;
            a.ask_changes += 1;
        }
        a.last_mid = Some(curr.mid());
        a.last_spread = curr.spread();
    }

    let mut bars = Vec::with_capacity(n_secs);
    let mut mid = first.mid();
    let mut spread = first.spread();
    for (t, a) in acc.iter().enumerate() {
        let mut bar = SecondBar::empty(t as u32, spread);
        if let Some(m) = a.last_mid {
            bar.r = (m.ln() - mid.ln()) * 1e4;
            mid = m;
        }
        if a.events > 0 {
            bar.f = a.flow as f64 / 1000.0;
            bar.ne = a.events;
            bar.ase = Some(a.displaced as f64 / a.events as f64 / 100.0);
            bar.spr = a.spread_sum / a.events as f64;
            bar.depth = depth_from_sums(a.bid_depth, a.bid_changes, a.ask_depth, a.ask_changes);
            spread = a.last_spread;
        }
        bars.push(bar);
    }
    Ok(SessionSeries {
        date: date.to_string(),
        bars,
        gap_policy: GapPolicy::ZeroFill,
    })
}

/// Labels of the market-data summary rows.
pub const SUMMARY_LABELS: [&str; 6] = [
    "Mid-Quote Return (bps)",
    "Order Flow Imbalance (1000s)",
    "Number of Events (100s)",
    "Average Size of Events (100s)",
    "Average Spread",
    "Depth (1000s)",
];

/// Pooled descriptive statistics over a collection of sessions.
///
/// Event counts are reported in hundreds. Average event size and depth use
/// only the seconds in which they are defined.
pub fn summary_stats(series: &[SessionSeries]) -> Result<Vec<SummaryRow>> {
    if series.iter().all(|s| s.bars.is_empty()) {
        return Err(Error::Empty("no bars to summarise".into()));
    }
    let bars = || series.iter().flat_map(|s| s.bars.iter());
    let columns: [Vec<f64>; 6] = [
        bars().map(|b| b.r).collect(),
        bars().map(|b| b.f).collect(),
        bars().map(|b| b.ne as f64 / 100.0).collect(),
        bars().filter_map(|b| b.ase).collect(),
        bars().map(|b| b.spr).collect(),
        bars().filter_map(|b| b.depth).collect(),
    ];
    Ok(SUMMARY_LABELS
        .iter()
        .zip(columns.iter())
        .filter_map(|(label, values)| SummaryRow::from_values(*label, values))
        .collect())
}

/// Per-bucket intraday statistics across days.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntradayBucket {
    pub start_second: u32,
    pub sd_return: f64,
    pub sd_flow: f64,
    pub mean_events: f64,
    pub mean_event_size: Option<f64>,
    pub mean_spread: f64,
    pub mean_depth: Option<f64>,
}

/// Standard deviations of `r` and `f` and means of the activity measures for
/// each `bucket_secs`-long slice of the session, pooled across days.
pub fn intraday_profile(series: &[SessionSeries], bucket_secs: usize) -> Vec<IntradayBucket> {
    use crate::stats::{mean, std_dev};
    let len = series.iter().map(|s| s.bars.len()).max().unwrap_or(0);
    let mut out = Vec::new();
    let mut start = 0;
    while bucket_secs > 0 && start < len {
        let end = (start + bucket_secs).min(len);
        let slice = || {
            series
                .iter()
                .flat_map(move |s| s.bars.get(start..end.min(s.bars.len())).unwrap_or(&[]).iter())
        };
        let r: Vec<f64> = slice().map(|b| b.r).collect();
        let f: Vec<f64> = slice().map(|b| b.f).collect();
        let ne: Vec<f64> = slice().map(|b| b.ne as f64 / 100.0).collect();
        let ase: Vec<f64> = slice().filter_map(|b| b.ase).collect();
        let spr: Vec<f64> = slice().map(|b| b.spr).collect();
        let depth: Vec<f64> = slice().filter_map(|b| b.depth).collect();
        out.push(IntradayBucket {
            start_second: start as u32,
            sd_return: std_dev(&r),
            sd_flow: std_dev(&f),
            mean_events: mean(&ne),
            mean_event_size: (!ase.is_empty()).then(|| mean(&ase)),
            mean_spread: mean(&spr),
            mean_depth: (!depth.is_empty()).then(|| mean(&depth)),
        });
        start = end;
    }
    out
}

pub fn write_intraday_csv<W: Write>(out: W, buckets: &[IntradayBucket], bounds: SessionBounds) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "start",
        "sd_r_bps",
        "sd_f_thousands",
        "mean_ne_hundreds",
        "mean_ase_hundreds",
        "mean_spr",
        "mean_depth_thousands",
    ])?;
    for b in buckets {
        w.write_record([
            format_clock(bounds.open as f64 + b.start_second as f64),
            b.sd_return.to_string(),
            b.sd_flow.to_string(),
            b.mean_events.to_string(),
            opt(b.mean_event_size),
            b.mean_spread.to_string(),
            opt(b.mean_depth),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses `HH:MM:SS` or `HH:MM:SS.ffffff` into seconds of the day.
pub fn parse_clock(s: &str) -> Option<f64> {
    let mut parts = s.trim().split(':');
    let h: u32 = parts.next()?.parse().ok()?;
    let m: u32 = parts.next()?.parse().ok()?;
    let sec = parts.next()?;
    if parts.next().is_some() || m >= 60 {
        return None;
    }
    let (whole, frac) = match sec.split_once('.') {
        Some((w, f)) => (w, Some(f)),
        None => (sec, None),
    };
    let whole: u32 = whole.parse().ok()?;
    if whole >= 60 {
        return None;
    }
    let mut value = (h * 3600 + m * 60 + whole) as f64;
    if let Some(f) = frac {
        if f.is_empty() || !f.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        value += format!("0.{f}").parse::<f64>().ok()?;
    }
    Some(value)
}

/// Formats seconds of the day as `HH:MM:SS[.ffffff]`.
pub fn format_clock(seconds_of_day: f64) -> String {
    let whole = seconds_of_day.floor();
    let micros = ((seconds_of_day - whole) * 1e6).round() as u64;
    let w = whole as u64;
    let base = format!("{:02}:{:02}:{:02}", w / 3600, (w / 60) % 60, w % 60);
    if micros == 0 {
        base
    } else {
        format!("{base}.{micros:06}")
    }
}

/// Header of the BBO input format.
pub const BBO_HEADER: [&str; 7] = ["date", "timestamp", "sequence", "bid_price", "bid_size", "ask_price", "ask_size"];

/// Header of the one-second bar format.
pub const BAR_HEADER: [&str; 8] = ["date", "t", "r_bps", "f_thousands", "ne", "ase_hundreds", "spr", "depth_thousands"];

fn field(rec: &csv::StringRecord, i: usize, line: usize) -> Result<&str> {
    rec.get(i).map(str::trim).ok_or_else(|| Error::Parse {
        line,
        message: format!("missing column {i}"),
    })
}

fn parse_num<T: std::str::FromStr>(s: &str, name: &str, line: usize) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {name} `{s}`"),
    })
}

fn check_header(rdr: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<()> {
    let header = rdr.headers()?.clone();
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(input)
}

/// Reads BBO events grouped by date (dates in ascending order, events in
/// file order). Timestamps are converted to seconds since session open.
pub fn read_bbo_csv<R: Read>(input: R, bounds: SessionBounds) -> Result<BTreeMap<String, Vec<BboEvent>>> {
    let mut rdr = csv_reader(input);
    check_header(&mut rdr, &BBO_HEADER)?;
    let mut out: BTreeMap<String, Vec<BboEvent>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let date = field(&rec, 0, line)?.to_string();
        let clock = field(&rec, 1, line)?;
        let tod = parse_clock(clock).ok_or_else(|| Error::Parse {
            line,
            message: format!("invalid timestamp `{clock}`"),
        })?;
        let ev = BboEvent {
            timestamp: tod - bounds.open as f64,
            sequence: parse_num(field(&rec, 2, line)?, "sequence", line)?,
            bid_price: parse_num(field(&rec, 3, line)?, "bid_price", line)?,
            bid_size: parse_num(field(&rec, 4, line)?, "bid_size", line)?,
            ask_price: parse_num(field(&rec, 5, line)?, "ask_price", line)?,
            ask_size: parse_num(field(&rec, 6, line)?, "ask_size", line)?,
        };
        if !ev.bid_price.is_finite() || !ev.ask_price.is_finite() {
            return Err(Error::Parse {
                line,
                message: "non-finite price".into(),
            });
        }
        if ev.ask_price < ev.bid_price {
            return Err(Error::Parse {
                line,
                message: format!("crossed book at sequence {}", ev.sequence),
            });
        }
        out.entry(date).or_default().push(ev);
    }
    if out.is_empty() {
        return Err(Error::Empty("BBO file has no events".into()));
    }
    Ok(out)
}

/// Writes BBO events in the input format.
pub fn write_bbo_csv<W: Write>(out: W, date: &str, events: &[BboEvent], bounds: SessionBounds) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BBO_HEADER)?;
    for ev in events {
        w.write_record([
            date.to_string(),
            format_clock(bounds.open as f64 + ev.timestamp),
            ev.sequence.to_string(),
            ev.bid_price.to_string(),
            ev.bid_size.to_string(),
            ev.ask_price.to_string(),
            ev.ask_size.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes bars for one or more sessions. Undefined fields are left empty.
pub fn write_bars_csv<W: Write>(out: W, series: &[SessionSeries]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BAR_HEADER)?;
    for s in series {
        for b in &s.bars {
            w.write_record([
                s.date.clone(),
                b.t.to_string(),
                b.r.to_string(),
                b.f.to_string(),
                b.ne.to_string(),
                opt(b.ase),
                b.spr.to_string(),
                opt(b.depth),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads bars grouped by date, in ascending date order.
pub fn read_bars_csv<R: Read>(input: R) -> Result<Vec<SessionSeries>> {
    let mut rdr = csv_reader(input);
    check_header(&mut rdr, &BAR_HEADER)?;
    let mut days: BTreeMap<String, Vec<SecondBar>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let opt_num = |i: usize, name: &str| -> Result<Option<f64>> {
            let s = field(&rec, i, line)?;
            if s.is_empty() {
                Ok(None)
            } else {
                parse_num(s, name, line).map(Some)
            }
        };
        let bar = SecondBar {
            t: parse_num(field(&rec, 1, line)?, "t", line)?,
            r: parse_num(field(&rec, 2, line)?, "r_bps", line)?,
            f: parse_num(field(&rec, 3, line)?, "f_thousands", line)?,
            ne: parse_num(field(&rec, 4, line)?, "ne", line)?,
            ase: opt_num(5, "ase_hundreds")?,
            spr: parse_num(field(&rec, 6, line)?, "spr", line)?,
            depth: opt_num(7, "depth_thousands")?,
        };
        days.entry(field(&rec, 0, line)?.to_string()).or_default().push(bar);
    }
    if days.is_empty() {
        return Err(Error::Empty("bar file has no rows".into()));
    }
    Ok(days
        .into_iter()
        .map(|(date, bars)| SessionSeries {
            date,
            bars,
            gap_policy: GapPolicy::ZeroFill,
        })
        .collect())
}
