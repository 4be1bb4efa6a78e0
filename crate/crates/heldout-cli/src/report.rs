//! Report and CSV emission. Markdown tables round to percent with two
//! decimals; CSV keeps full precision (17 significant digits round-trips
//! every f64 exactly).

use heldout_core::metrics::PrPoint;
use heldout_core::score::ScoredExample;

use crate::error::{CliError, Result};
use crate::experiment::{ExperimentRecord, MetricSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markdown" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(CliError::Usage(format!(
                "unknown report format {other:?}; expected markdown or csv"
            ))),
        }
    }
}

/// Full-precision decimal text for one f64; parses back bit-identically.
pub fn full_precision(v: f64) -> String {
    format!("{v:.16e}")
}

fn percent_pair(mean: f64, std: f64) -> String {
    format!("{:.2} ± {:.2}", 100.0 * mean, 100.0 * std)
}

// ---------------------------------------------------------------------------
// Scores and PR curves
// ---------------------------------------------------------------------------

pub fn scores_csv(scored: &[ScoredExample]) -> String {
    let mut out = String::from("example_index,score,is_anomaly\n");
    for (i, s) in scored.iter().enumerate() {
        out.push_str(&format!(
            "{i},{},{}\n",
            full_precision(s.score),
            u8::from(s.is_anomaly)
        ));
    }
    out
}

fn split_line(line: &str, want: usize, lineno: usize) -> Result<Vec<&str>> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != want {
        return Err(CliError::Config(format!(
            "line {lineno}: expected {want} comma-separated fields, got {}",
            fields.len()
        )));
    }
    Ok(fields)
}

fn parse_f64(s: &str, lineno: usize) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| CliError::Config(format!("line {lineno}: {s:?} is not a number")))
}

fn parse_flag(s: &str, lineno: usize) -> Result<bool> {
    match s.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(CliError::Config(format!(
            "line {lineno}: is_anomaly must be 0 or 1, got {other:?}"
        ))),
    }
}

/// Parse a scores CSV as written by [`scores_csv`]; the header is required.
pub fn parse_scores_csv(text: &str) -> Result<Vec<ScoredExample>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "example_index,score,is_anomaly" => {}
        _ => {
            return Err(CliError::Config(
                "scores csv must start with header example_index,score,is_anomaly".into(),
            ))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_line(line, 3, i + 1)?;
        out.push(ScoredExample {
            score: parse_f64(fields[1], i + 1)?,
            is_anomaly: parse_flag(fields[2], i + 1)?,
        });
    }
    Ok(out)
}

/// Parse a flags CSV (`example_index,is_anomaly`), returning flags in row
/// order.
pub fn parse_flags_csv(text: &str) -> Result<Vec<bool>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "example_index,is_anomaly" => {}
        _ => {
            return Err(CliError::Config(
                "flags csv must start with header example_index,is_anomaly".into(),
            ))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_line(line, 2, i + 1)?;
        out.push(parse_flag(fields[1], i + 1)?);
    }
    Ok(out)
}

pub fn pr_csv(points: &[PrPoint]) -> String {
    let mut out = String::from("threshold,precision,recall\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{}\n",
            full_precision(p.threshold),
            full_precision(p.precision),
            full_precision(p.recall)
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Per-trial cells
// ---------------------------------------------------------------------------

/// Every persisted cell as CSV; aggregates in the record are recomputable
/// from these rows alone.
pub fn cells_csv(record: &ExperimentRecord) -> String {
    let mut out = String::from("split,held_out,trial,metric,value\n");
    for (k, split) in record.splits.iter().enumerate() {
        for trial in &split.trials {
            let Some(result) = trial.result() else {
                continue;
            };
            for ap in &result.aps {
                out.push_str(&format!(
                    "{k},{},{},{},{}\n",
                    split.held_out_name,
                    trial.trial,
                    ap.scorer,
                    full_precision(ap.ap)
                ));
            }
            if let Some(acc) = result.test_accuracy {
                out.push_str(&format!(
                    "{k},{},{},accuracy,{}\n",
                    split.held_out_name,
                    trial.trial,
                    full_precision(acc)
                ));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Report tables
// ---------------------------------------------------------------------------

fn summary_cell(summary: &MetricSummary, split_idx: usize) -> String {
    match summary.per_split.get(split_idx).and_then(|a| a.as_ref()) {
        Some(a) => percent_pair(a.mean, a.std),
        None => "—".to_string(),
    }
}

fn grand_cell(summary: &MetricSummary) -> String {
    match (summary.grand_mean, summary.grand_std) {
        (Some(m), Some(s)) => percent_pair(m, s),
        (Some(m), None) => format!("{:.2} ± —", 100.0 * m),
        _ => "—".to_string(),
    }
}

pub fn emit_report(record: &ExperimentRecord, format: ReportFormat) -> String {
    match format {
        ReportFormat::Markdown => markdown_report(record),
        ReportFormat::Csv => csv_report(record),
    }
}

fn markdown_report(record: &ExperimentRecord) -> String {
    let skew_col = record.has_baseline();
    let mut header = vec!["Held-out".to_string()];
    if skew_col {
        header.push("Skew".to_string());
    }
    for s in &record.summaries {
        header.push(s.metric.clone());
    }

    let mut out = String::from("# Hold-one-class-out results\n\n");
    out.push_str(&format!(
        "{} splits × {} trials; cells are AP (accuracy where labeled) as percent, mean ± std over trials.\n\n",
        record.splits.len(),
        record.config.trials_per_split
    ));
    out.push_str(&format!("| {} |\n", header.join(" | ")));
    out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for (k, split) in record.splits.iter().enumerate() {
        let mut row = vec![split.held_out_name.clone()];
        if skew_col {
            row.push(format!("{:.2}", 100.0 * split.skew));
        }
        for s in &record.summaries {
            row.push(summary_cell(s, k));
        }
        out.push_str(&format!("| {} |\n", row.join(" | ")));
    }
    let mut avg = vec!["Average".to_string()];
    if skew_col {
        let mean_skew =
            record.splits.iter().map(|s| s.skew).sum::<f64>() / record.splits.len().max(1) as f64;
        avg.push(format!("{:.2}", 100.0 * mean_skew));
    }
    for s in &record.summaries {
        avg.push(grand_cell(s));
    }
    out.push_str(&format!("| {} |\n", avg.join(" | ")));
    out
}

fn csv_report(record: &ExperimentRecord) -> String {
    let mut out = String::from("scope,held_out,skew,metric,mean,std,n\n");
    for (k, split) in record.splits.iter().enumerate() {
        for s in &record.summaries {
            let (mean, std, n) = match s.per_split.get(k).and_then(|a| a.as_ref()) {
                Some(a) => (full_precision(a.mean), full_precision(a.std), a.n.to_string()),
                None => (String::new(), String::new(), "0".to_string()),
            };
            out.push_str(&format!(
                "split,{},{},{},{mean},{std},{n}\n",
                split.held_out_name,
                full_precision(split.skew),
                s.metric
            ));
        }
    }
    for s in &record.summaries {
        let mean = s.grand_mean.map(full_precision).unwrap_or_default();
        let std = s.grand_std.map(full_precision).unwrap_or_default();
        let n = s.per_split.iter().flatten().count();
        out.push_str(&format!("average,,,{},{mean},{std},{n}\n", s.metric));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use heldout_core::metrics::{average_precision, pr_curve};
    use heldout_core::score::scored;

    fn sample_scored() -> Vec<ScoredExample> {
        scored([(0.9, true), (0.8, false), (0.7, true), (0.6, false)])
    }

    #[test]
    fn scores_csv_round_trips_exactly() {
        let examples = scored([
            (0.1234567890123456789, true),
            (-3.0e-300, false),
            (1.0 / 3.0, true),
        ]);
        let text = scores_csv(&examples);
        let back = parse_scores_csv(&text).unwrap();
        assert_eq!(back.len(), examples.len());
        for (a, b) in back.iter().zip(&examples) {
            assert_eq!(a.score.to_bits(), b.score.to_bits());
            assert_eq!(a.is_anomaly, b.is_anomaly);
        }
    }

    #[test]
    fn scores_csv_has_the_documented_header_and_flag_encoding() {
        let text = scores_csv(&scored([(0.5, true), (0.25, false)]));
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("example_index,score,is_anomaly"));
        let row = lines.next().unwrap();
        assert!(row.starts_with("0,"), "{row}");
        assert!(row.ends_with(",1"), "{row}");
        let row = lines.next().unwrap();
        assert!(row.starts_with("1,"), "{row}");
        assert!(row.ends_with(",0"), "{row}");
    }

    #[test]
    fn flags_csv_parses_in_row_order() {
        let flags = parse_flags_csv("example_index,is_anomaly\n0,1\n1,0\n2,1\n").unwrap();
        assert_eq!(flags, vec![true, false, true]);
    }

    #[test]
    fn malformed_rows_are_rejected_with_line_numbers() {
        let err = parse_scores_csv("example_index,score,is_anomaly\n0,notanumber,1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = parse_scores_csv("wrong,header\n").unwrap_err();
        assert!(err.to_string().contains("header"), "{err}");
        let err = parse_flags_csv("example_index,is_anomaly\n0,2\n").unwrap_err();
        assert!(err.to_string().contains("0 or 1"), "{err}");
    }

    #[test]
    fn pr_csv_lists_curve_points_at_full_precision() {
        let points = pr_curve(&sample_scored()).unwrap();
        let text = pr_csv(&points);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "threshold,precision,recall");
        assert_eq!(lines.len(), 1 + points.len());
        let first: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(first[0].parse::<f64>().unwrap(), points[0].threshold);
        assert_eq!(first[1].parse::<f64>().unwrap(), points[0].precision);
    }

    #[test]
    fn ap_survives_a_csv_round_trip() {
        let scored = sample_scored();
        let direct = average_precision(&scored).unwrap().average_precision;
        let back = parse_scores_csv(&scores_csv(&scored)).unwrap();
        let reloaded = average_precision(&back).unwrap().average_precision;
        assert_eq!(direct.to_bits(), reloaded.to_bits());
    }
}
