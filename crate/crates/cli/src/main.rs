//! `ofi-svar` command-line driver.
//!
//! Every output file starts with `# manifest_sha256=<hash>` (JSON files carry
//! a `manifest_sha256` field instead). The hash covers the tool version, the
//! subcommand, its arguments, the resolved settings and the input file
//! contents, so equal hashes mean byte-identical outputs.

mod output;
mod settings;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use ofi_svar::market_data::{
    aggregate_seconds, intraday_profile, read_bars_csv, read_bbo_csv, summary_stats, write_bars_csv, write_bbo_csv,
    write_intraday_csv, SessionSeries,
};
use ofi_svar::panel::{
    announcement_regressions, pool_summaries, render_regressions, run_protocol, window_profile, write_exclusions_csv,
    write_irf_csv, write_panel_csv, write_profile_csv, write_regressions_csv, write_window_irfs_csv,
    AnnouncementCalendar,
};
use ofi_svar::sim::{
    simulate_bbo, simulate_panel, simulate_svar, trading_dates, write_second_truth_csv, write_svar_csv,
};
use ofi_svar::stats::{render_table, write_summary_csv};

use output::{InputFile, Manifest, Outputs};
use settings::{Overrides, Settings};

#[derive(Debug, Parser)]
#[command(name = "ofi-svar", version, about = "Order-flow structural VAR estimation")]
struct Cli {
    /// TOML file with settings; flags given on the command line take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Estimation window length in minutes.
    #[arg(long, global = true)]
    window_min: Option<usize>,
    /// Equal-length regimes per window.
    #[arg(long, global = true)]
    regimes: Option<usize>,
    #[arg(long, global = true)]
    max_lag: Option<usize>,
    /// Relative tolerance of the rank condition.
    #[arg(long, global = true)]
    rank_tol: Option<f64>,
    /// Suppress the run report on stdout.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Aggregate BBO event files into one-second bars and summary statistics.
    Ingest(IngestArgs),
    /// Run the window protocol, pooling and announcement regressions.
    Estimate(EstimateArgs),
    /// Generate synthetic data with a ground-truth sidecar.
    Simulate(SimulateArgs),
    /// Summary statistics and intraday profile of existing bar files.
    Summarize(SummarizeArgs),
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// BBO CSV files (`date,timestamp,sequence,bid_price,bid_size,ask_price,ask_size`).
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// One-second bar CSV files.
    #[arg(required = true)]
    bars: Vec<PathBuf>,
    /// Announcement calendar CSV (`date,time,name,actual,consensus`).
    #[arg(long)]
    calendar: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
enum SimKind {
    /// Multi-day bar panel with announcement calendar.
    Panel,
    /// One regime-switching structural VAR sample.
    Svar,
    /// BBO event stream of a synthetic book.
    Book,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(value_enum, default_value = "panel")]
    kind: SimKind,
    /// Trading days (panel only).
    #[arg(long)]
    days: Option<usize>,
    /// Stream length in seconds (book only; defaults to one session).
    #[arg(long)]
    duration: Option<usize>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SummarizeArgs {
    #[arg(required = true)]
    bars: Vec<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let flags = Overrides {
        seed: cli.seed,
        threads: cli.threads,
        window_min: cli.window_min,
        regimes: cli.regimes,
        max_lag: cli.max_lag,
        rank_tol: cli.rank_tol,
    };
    let settings = Settings::load(cli.config.as_deref(), &flags)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(settings.threads)
        .build_global()
        .context("starting worker threads")?;
    let mut report = Vec::new();
    let (out_dir, outputs) = match &cli.command {
        Command::Ingest(args) => (&args.out, ingest(args, &settings, &mut report)?),
        Command::Estimate(args) => (&args.out, estimate(args, &settings, &mut report)?),
        Command::Simulate(args) => (&args.out, simulate(args, &settings, &mut report)?),
        Command::Summarize(args) => (&args.out, summarize(args, &settings, &mut report)?),
    };
    let names: Vec<String> = outputs.names().map(String::from).collect();
    let hash = outputs.hash().to_string();
    outputs.commit(out_dir)?;
    if !cli.quiet {
        let mut stdout = std::io::stdout().lock();
        for line in &report {
            writeln!(stdout, "{line}")?;
        }
        writeln!(stdout, "manifest {hash}")?;
        writeln!(stdout, "wrote {} to {}", names.join(", "), out_dir.display())?;
    }
    Ok(())
}

/// Reads inputs up front so their hashes enter the manifest.
fn read_inputs(paths: &[PathBuf]) -> Result<(Vec<InputFile>, Vec<Vec<u8>>)> {
    let mut files = Vec::new();
    let mut contents = Vec::new();
    for p in paths {
        let (f, bytes) = InputFile::read(p)?;
        if bytes.is_empty() {
            bail!("{} is empty", p.display());
        }
        files.push(f);
        contents.push(bytes);
    }
    Ok((files, contents))
}

fn start(command: &str, arguments: Value, settings: &Settings, inputs: Vec<InputFile>) -> Result<Outputs> {
    let manifest = Manifest::new(command, arguments, settings, inputs);
    let mut outputs = Outputs::new(manifest.hash()?);
    let mut fields = Map::new();
    fields.insert("manifest".into(), serde_json::to_value(&manifest)?);
    outputs.json("manifest.json", fields)?;
    Ok(outputs)
}

fn summary_outputs(outputs: &mut Outputs, series: &[SessionSeries], settings: &Settings) -> Result<()> {
    let rows = summary_stats(series)?;
    outputs.text("summary.txt", |w| {
        w.extend_from_slice(render_table("Summary statistics", &rows, None).as_bytes());
        Ok(())
    })?;
    outputs.text("summary.csv", |w| Ok(write_summary_csv(w, &rows)?))?;
    let profile = intraday_profile(series, settings.bucket_min * 60);
    outputs.text("intraday.csv", |w| Ok(write_intraday_csv(w, &profile, settings.session)?))
}

fn ingest(args: &IngestArgs, settings: &Settings, report: &mut Vec<String>) -> Result<Outputs> {
    let (files, contents) = read_inputs(&args.inputs)?;
    let mut days: BTreeMap<String, SessionSeries> = BTreeMap::new();
    for (path, bytes) in args.inputs.iter().zip(&contents) {
        let by_date = read_bbo_csv(bytes.as_slice(), settings.session).with_context(|| format!("{}", path.display()))?;
        for (date, events) in by_date {
            if days.contains_key(&date) {
                bail!("{}: date {date} appears in more than one input", path.display());
            }
            let series = aggregate_seconds(&date, &events, settings.session)
                .with_context(|| format!("{}: aggregating {date}", path.display()))?;
            report.push(format!("{date}: {} events, {} bars", events.len(), series.bars.len()));
            days.insert(date, series);
        }
    }
    let series: Vec<SessionSeries> = days.into_values().collect();
    let mut outputs = start("ingest", json!({}), settings, files)?;
    outputs.text("bars.csv", |w| Ok(write_bars_csv(w, &series)?))?;
    summary_outputs(&mut outputs, &series, settings)?;
    Ok(outputs)
}

fn read_bar_files(paths: &[PathBuf], contents: &[Vec<u8>]) -> Result<Vec<SessionSeries>> {
    let mut days: BTreeMap<String, SessionSeries> = BTreeMap::new();
    for (path, bytes) in paths.iter().zip(contents) {
        for s in read_bars_csv(bytes.as_slice()).with_context(|| format!("{}", path.display()))? {
            if days.contains_key(&s.date) {
                bail!("{}: date {} appears more than once", path.display(), s.date);
            }
            days.insert(s.date.clone(), s);
        }
    }
    Ok(days.into_values().collect())
}

fn summarize(args: &SummarizeArgs, settings: &Settings, report: &mut Vec<String>) -> Result<Outputs> {
    let (files, contents) = read_inputs(&args.bars)?;
    let series = read_bar_files(&args.bars, &contents)?;
    report.push(format!("{} day(s)", series.len()));
    let mut outputs = start("summarize", json!({}), settings, files)?;
    summary_outputs(&mut outputs, &series, settings)?;
    Ok(outputs)
}

fn estimate(args: &EstimateArgs, settings: &Settings, report: &mut Vec<String>) -> Result<Outputs> {
    let mut paths = args.bars.clone();
    paths.extend(args.calendar.iter().cloned());
    let (files, contents) = read_inputs(&paths)?;
    let series = read_bar_files(&args.bars, &contents[..args.bars.len()])?;
    let calendar = match &args.calendar {
        Some(path) => AnnouncementCalendar::read_csv(contents[args.bars.len()].as_slice())
            .with_context(|| format!("{}", path.display()))?,
        None => AnnouncementCalendar::new(Vec::new()),
    };
    let spec = settings.window_spec()?;
    let protocol = run_protocol(&series, &spec, &settings.protocol())?;
    let rows = &protocol.rows;
    let accounting = &protocol.report;
    report.push(format!(
        "{} windows attempted, {} estimated, {} excluded",
        accounting.attempted(),
        accounting.estimated(),
        accounting.excluded()
    ));

    let mut warnings = Vec::new();
    let mut outputs = start(
        "estimate",
        json!({ "calendar": args.calendar.is_some() }),
        settings,
        files,
    )?;
    outputs.text("panel.csv", |w| Ok(write_panel_csv(w, rows)?))?;
    outputs.text("window_irfs.csv", |w| Ok(write_window_irfs_csv(w, rows)?))?;
    outputs.text("exclusions.csv", |w| Ok(write_exclusions_csv(w, accounting)?))?;
    let profile = window_profile(rows);
    outputs.text("profile.csv", |w| Ok(write_profile_csv(w, &profile, &spec)?))?;
    match pool_summaries(rows) {
        Ok(pooled) => {
            outputs.text("pooled.txt", |w| {
                w.extend_from_slice(pooled.render_structural().as_bytes());
                w.push(b'\n');
                w.extend_from_slice(pooled.render_long_run().as_bytes());
                Ok(())
            })?;
            outputs.text("pooled_structural.csv", |w| Ok(write_summary_csv(w, &pooled.structural)?))?;
            outputs.text("pooled_long_run.csv", |w| Ok(write_summary_csv(w, &pooled.long_run)?))?;
            outputs.text("irf_bands.csv", |w| Ok(write_irf_csv(w, &pooled.irf_bands)?))?;
        }
        Err(e) => warnings.push(format!("pooled summaries skipped: {e}")),
    }
    match announcement_regressions(rows, &calendar, &spec, &settings.regression) {
        Ok(set) => {
            warnings.extend(set.warnings.iter().cloned());
            outputs.text("regressions.txt", |w| {
                w.extend_from_slice(render_regressions(&set).as_bytes());
                Ok(())
            })?;
            outputs.text("regressions.csv", |w| Ok(write_regressions_csv(w, &set)?))?;
        }
        Err(e) => warnings.push(format!("announcement regressions skipped: {e}")),
    }
    for w in &warnings {
        report.push(format!("warning: {w}"));
    }

    let by_reason: BTreeMap<&str, usize> = accounting.by_reason().into_iter().map(|(r, n)| (r.as_str(), n)).collect();
    let per_day: BTreeMap<&str, Value> = accounting
        .per_day
        .iter()
        .map(|(d, a)| (d.as_str(), serde_json::to_value(a).unwrap_or(Value::Null)))
        .collect();
    let mut fields = Map::new();
    fields.insert(
        "accounting".into(),
        json!({
            "attempted": accounting.attempted(),
            "estimated": accounting.estimated(),
            "excluded": accounting.excluded(),
            "by_reason": by_reason,
            "per_day": per_day,
            "trailing_remainder_secs": accounting.trailing_remainder_secs,
        }),
    );
    fields.insert("warnings".into(), json!(warnings));
    outputs.json("run_report.json", fields)?;
    Ok(outputs)
}

fn simulate(args: &SimulateArgs, settings: &Settings, report: &mut Vec<String>) -> Result<Outputs> {
    let arguments = json!({ "kind": args.kind, "days": args.days, "duration": args.duration });
    let mut outputs;
    match args.kind {
        SimKind::Panel => {
            let mut config = settings.panel.clone();
            if let Some(d) = args.days {
                config.days = d;
            }
            let sample = simulate_panel(&config)?;
            report.push(format!(
                "{} day(s), {} announcement(s)",
                sample.days.len(),
                sample.calendar.entries().len()
            ));
            outputs = start("simulate", arguments, settings, Vec::new())?;
            outputs.text("bars.csv", |w| Ok(write_bars_csv(w, &sample.days)?))?;
            outputs.text("calendar.csv", |w| Ok(sample.calendar.write_csv(w)?))?;
            let mut fields = Map::new();
            fields.insert("config".into(), serde_json::to_value(&config)?);
            fields.insert("truth".into(), serde_json::to_value(&sample.truth)?);
            outputs.json("truth.json", fields)?;
        }
        SimKind::Svar => {
            let sample = simulate_svar(&settings.svar)?;
            report.push(format!("{} observations", sample.series.len()));
            outputs = start("simulate", arguments, settings, Vec::new())?;
            outputs.text("series.csv", |w| Ok(write_svar_csv(w, &sample)?))?;
            let mut fields = Map::new();
            fields.insert("config".into(), serde_json::to_value(&settings.svar)?);
            fields.insert("truth".into(), serde_json::to_value(&sample.truth)?);
            outputs.json("truth.json", fields)?;
        }
        SimKind::Book => {
            let duration = args.duration.unwrap_or(settings.session.len());
            if duration > settings.session.len() {
                bail!("duration {duration} s exceeds the {} s session", settings.session.len());
            }
            let (events, truth) = simulate_bbo(&settings.book, duration)?;
            let date = trading_dates(&settings.panel.start_date, 1)?.remove(0);
            report.push(format!("{} events over {duration} s", events.len()));
            outputs = start("simulate", arguments, settings, Vec::new())?;
            outputs.text("bbo.csv", |w| Ok(write_bbo_csv(w, &date, &events, settings.session)?))?;
            outputs.text("truth.csv", |w| Ok(write_second_truth_csv(w, &truth)?))?;
            let mut fields = Map::new();
            fields.insert("config".into(), serde_json::to_value(&settings.book)?);
            fields.insert("date".into(), date.into());
            outputs.json("truth.json", fields)?;
        }
    }
    Ok(outputs)
}
