//! Descriptive statistics in the layout used by the summary tables.

use serde::Serialize;

/// Percentile levels reported in every summary table.
pub const PERCENTILES: [f64; 7] = [1.0, 5.0, 25.0, 50.0, 75.0, 95.0, 99.0];

/// Column headers of a summary table: mean, SD and the seven percentiles.
pub const SUMMARY_COLUMNS: [&str; 9] = ["Mean", "SD", "1%", "5%", "25%", "50%", "75%", "95%", "99%"];

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 divisor); zero for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Percentile of already sorted data, linear interpolation between order
/// statistics (`(n − 1)·q` positioning).
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * pct / 100.0;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// One row of a summary table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub label: String,
    pub count: usize,
    pub mean: f64,
    pub sd: f64,
    pub percentiles: [f64; 7],
}

impl SummaryRow {
    /// Summarises `values`; `None` when there is nothing to summarise.
    /// Non-finite values are ignored.
    pub fn from_values(label: impl Into<String>, values: &[f64]) -> Option<Self> {
        let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if sorted.is_empty() {
            return None;
        }
        sorted.sort_by(f64::total_cmp);
        let mut percentiles = [0.0; 7];
        for (slot, &p) in percentiles.iter_mut().zip(PERCENTILES.iter()) {
            *slot = percentile_sorted(&sorted, p);
        }
        Some(Self {
            label: label.into(),
            count: sorted.len(),
            mean: mean(&sorted),
            sd: std_dev(&sorted),
            percentiles,
        })
    }

    /// The nine numeric cells in column order.
    pub fn cells(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        out[0] = self.mean;
        out[1] = self.sd;
        out[2..].copy_from_slice(&self.percentiles);
        out
    }
}

/// Renders rows as an aligned text table, optionally with extra trailing columns.
pub fn render_table(title: &str, rows: &[SummaryRow], extra: Option<(&str, &[f64])>) -> String {
    let mut out = String::new();
    out.push_str(title);
    out.push('\n');
    let mut header = format!("{:<24}", "");
    for c in SUMMARY_COLUMNS {
        header.push_str(&format!("{c:>10}"));
    }
    if let Some((name, _)) = extra {
        header.push_str(&format!("{name:>8}"));
    }
    out.push_str(&header);
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        let mut line = format!("{:<24}", row.label);
        for v in row.cells() {
            line.push_str(&format!("{v:>10.3}"));
        }
        if let Some((_, values)) = extra {
            line.push_str(&format!("{:>8.2}", values[i]));
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Writes rows with a `variable,count` prefix and the nine summary columns.
pub fn write_summary_csv<W: std::io::Write>(out: W, rows: &[SummaryRow]) -> crate::error::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["variable".to_string(), "count".to_string()];
    header.extend(SUMMARY_COLUMNS.iter().map(|c| c.to_string()));
    w.write_record(&header)?;
    for row in rows {
        let mut rec = vec![row.label.clone(), row.count.to_string()];
        rec.extend(row.cells().iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
