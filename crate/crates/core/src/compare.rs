//! Percentage-error comparison of predictions against measurements.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::distributed::DIST_CSV_HEADER;
use crate::report::{csv_field, REPORT_CSV_HEADER};

/// `|predicted - measured| / measured * 100`.
pub fn pct_error(predicted: f64, measured: f64) -> f64 {
    (predicted - measured).abs() / measured * 100.0
}

/// One-decimal rendering used in every human-facing error column.
pub fn format_pct(e: f64) -> String {
    format!("{e:.1}")
}

/// A measured latency keyed by a report label.
#[derive(Debug, Clone, PartialEq)]
pub struct Expected {
    pub label: String,
    pub measured: f64,
}

#[derive(Debug, Deserialize)]
struct LatencyRecord {
    label: String,
    measured_s: Option<f64>,
    measured_ms: Option<f64>,
    measured_us: Option<f64>,
    predicted_s: Option<f64>,
    predicted_ms: Option<f64>,
    predicted_us: Option<f64>,
}

impl LatencyRecord {
    fn pick(&self, column: Column) -> [(Option<f64>, f64); 3] {
        match column {
            Column::Measured => [(self.measured_s, 1.0), (self.measured_ms, 1e-3), (self.measured_us, 1e-6)],
            Column::Predicted => [(self.predicted_s, 1.0), (self.predicted_ms, 1e-3), (self.predicted_us, 1e-6)],
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Column {
    Measured,
    Predicted,
}

impl Column {
    fn name(self) -> &'static str {
        match self {
            Column::Measured => "measured",
            Column::Predicted => "predicted",
        }
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::parse(path, line, e.to_string())
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

fn read_records<T: for<'de> Deserialize<'de>>(text: &str, path: &Path) -> Result<Vec<(usize, T)>> {
    let mut rd = reader(text);
    let mut out = Vec::new();
    let headers = rd.headers().map_err(|e| csv_error(path, e))?.clone();
    let mut rec = csv::StringRecord::new();
    while rd.read_record(&mut rec).map_err(|e| csv_error(path, e))? {
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let row = rec.deserialize(Some(&headers)).map_err(|e| csv_error(path, e))?;
        out.push((line, row));
    }
    Ok(out)
}

/// Labelled latencies from one `<column>_{s,ms,us}` group; exactly one
/// unit must be set per row and values must be positive. Other columns
/// are ignored.
fn parse_column(text: &str, path: &Path, column: Column) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (line, r) in read_records::<LatencyRecord>(text, path)? {
        let set: Vec<f64> = r.pick(column).iter().filter_map(|(v, scale)| v.map(|v| v * scale)).collect();
        let c = column.name();
        let value = match set.as_slice() {
            [v] => *v,
            _ => {
                return Err(Error::parse(
                    path,
                    line,
                    format!("exactly one of {c}_s, {c}_ms, {c}_us must be set"),
                ))
            }
        };
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::parse(path, line, format!("{c} latency must be positive (got {value})")));
        }
        out.push((r.label, value));
    }
    Ok(out)
}

/// Parse expected measurements, stored in seconds.
pub fn parse_expected(text: &str, path: &Path) -> Result<Vec<Expected>> {
    Ok(parse_column(text, path, Column::Measured)?
        .into_iter()
        .map(|(label, measured)| Expected { label, measured })
        .collect())
}

/// Parse predicted latencies in seconds. Accepts `label,predicted_*`
/// files as well as the CSV reports written by `predict` and
/// `distributed`, labelled as in [`LatencyReport::labelled`] and
/// [`DistributedReport::labelled`].
///
/// [`LatencyReport::labelled`]: crate::report::LatencyReport::labelled
/// [`DistributedReport::labelled`]: crate::distributed::DistributedReport::labelled
pub fn parse_predicted(text: &str, path: &Path) -> Result<Vec<(String, f64)>> {
    let header = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .unwrap_or("");
    if header == REPORT_CSV_HEADER {
        report_labels(text, path, 1, 11, |kind, name| match kind {
            "total" => "total".into(),
            _ => name.to_string(),
        })
    } else if header == DIST_CSV_HEADER {
        report_labels(text, path, 1, 4, |kind, name| match kind {
            "total" => "total".into(),
            _ => format!("{kind}:{name}"),
        })
    } else {
        parse_column(text, path, Column::Predicted)
    }
}

fn report_labels(
    text: &str,
    path: &Path,
    name_col: usize,
    latency_col: usize,
    label: impl Fn(&str, &str) -> String,
) -> Result<Vec<(String, f64)>> {
    let mut rd = reader(text);
    let mut out = Vec::new();
    let mut rec = csv::StringRecord::new();
    while rd.read_record(&mut rec).map_err(|e| csv_error(path, e))? {
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let (Some(kind), Some(name), Some(lat)) = (rec.get(0), rec.get(name_col), rec.get(latency_col)) else {
            return Err(Error::parse(path, line, "truncated report row"));
        };
        let v: f64 = lat
            .parse()
            .map_err(|_| Error::parse(path, line, format!("latency `{lat}` is not a number")))?;
        out.push((label(kind, name), v));
    }
    Ok(out)
}

pub fn load_expected(path: &Path) -> Result<Vec<Expected>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_expected(&text, path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub label: String,
    pub measured: f64,
    pub predicted: f64,
    pub error_pct: f64,
}

/// Match every expected label against `(label, predicted)` pairs. An
/// expected label with no prediction is an error; extra predictions are
/// ignored.
pub fn compare(expected: &[Expected], predicted: &[(String, f64)]) -> Result<Vec<Comparison>> {
    let by_label: BTreeMap<&str, f64> = predicted.iter().map(|(l, v)| (l.as_str(), *v)).collect();
    expected
        .iter()
        .map(|e| {
            let p = *by_label
                .get(e.label.as_str())
                .ok_or_else(|| Error::MissingLabel(e.label.clone()))?;
            Ok(Comparison {
                label: e.label.clone(),
                measured: e.measured,
                predicted: p,
                error_pct: pct_error(p, e.measured),
            })
        })
        .collect()
}

pub const COMPARISON_CSV_HEADER: &str = "label,measured_s,predicted_s,error_pct";

pub fn comparison_csv(rows: &[Comparison]) -> String {
    let mut out = String::from(COMPARISON_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{:e},{:e},{:e}", csv_field(&r.label), r.measured, r.predicted, r.error_pct);
    }
    out
}

/// Measured and predicted in milliseconds, error to one decimal.
pub fn comparison_table(rows: &[Comparison]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$} {:>12} {:>12} {:>8}", "label", "measured_ms", "predicted_ms", "error_%");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$} {:>12.1} {:>12.1} {:>8}",
            r.label,
            r.measured * 1e3,
            r.predicted * 1e3,
            format_pct(r.error_pct)
        );
    }
    if !rows.is_empty() {
        let mean = rows.iter().map(|r| r.error_pct).sum::<f64>() / rows.len() as f64;
        let _ = writeln!(out, "{:<width$} {:>12} {:>12} {:>8}", "mean", "", "", format_pct(mean));
    }
    out
}

/// A published measured/predicted pair with the error as printed next to it.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ReferenceRow {
    pub label: String,
    pub measured_ms: f64,
    pub predicted_ms: f64,
    pub printed_error_pct: f64,
}

impl ReferenceRow {
    pub fn as_expected(&self) -> Expected {
        Expected {
            label: self.label.clone(),
            measured: self.measured_ms * 1e-3,
        }
    }

    pub fn as_prediction(&self) -> (String, f64) {
        (self.label.clone(), self.predicted_ms * 1e-3)
    }
}

pub fn load_predicted(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predicted(&text, path)
}

pub fn parse_reference(text: &str, path: &Path) -> Result<Vec<ReferenceRow>> {
    let rows: Vec<ReferenceRow> = read_records(text, path)?.into_iter().map(|(_, r)| r).collect();
    for r in &rows {
        if !(r.measured_ms > 0.0 && r.predicted_ms > 0.0) {
            return Err(Error::InvalidConfig(format!("{}: latencies must be positive", r.label)));
        }
    }
    Ok(rows)
}

pub fn load_reference(path: &Path) -> Result<Vec<ReferenceRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_reference(&text, path)
}

/// Run reference rows through the expected-vs-predicted pipeline.
pub fn replay_reference(rows: &[ReferenceRow]) -> Result<Vec<Comparison>> {
    let expected: Vec<Expected> = rows.iter().map(ReferenceRow::as_expected).collect();
    let predicted: Vec<(String, f64)> = rows.iter().map(ReferenceRow::as_prediction).collect();
    compare(&expected, &predicted)
}

/// Gap between our printed error and the printed reference, in tenths of
/// a percentage point. Both sides are one-decimal strings, so this is an
/// exact integer comparison.
pub fn printed_gap_tenths(ours: f64, printed: f64) -> u64 {
    let tenths = |x: f64| (x * 10.0).round() as i64;
    tenths(format_pct(ours).parse().unwrap_or(f64::NAN)).abs_diff(tenths(printed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_is_relative_to_measured() {
        assert_eq!(pct_error(150.0, 100.0), 50.0);
        assert_eq!(pct_error(50.0, 100.0), 50.0);
        assert_eq!(format_pct(12.868), "12.9");
    }

    #[test]
    fn units_are_normalised() {
        let text = "label,measured_ms\ntotal,250\n";
        let e = parse_expected(text, Path::new("x")).unwrap();
        assert_eq!(e[0].measured, 0.25);
        let text = "label,measured_s,measured_us\ntotal,1,\nfc,,500\n";
        let e = parse_expected(text, Path::new("x")).unwrap();
        assert_eq!(e[1].measured, 500e-6);
    }

    #[test]
    fn ambiguous_or_missing_units_rejected() {
        let text = "label,measured_s,measured_ms\ntotal,1,1000\n";
        assert!(parse_expected(text, Path::new("x")).is_err());
        let text = "label,measured_ms\ntotal,0\n";
        assert!(parse_expected(text, Path::new("x")).is_err());
    }

    #[test]
    fn reference_files_double_as_inputs() {
        let text = "label,measured_ms,predicted_ms,printed_error_pct\na,100,112.5,12.5\n";
        let e = parse_expected(text, Path::new("x")).unwrap();
        let p = parse_predicted(text, Path::new("x")).unwrap();
        let c = compare(&e, &p).unwrap();
        assert_eq!(format_pct(c[0].error_pct), "12.5");
    }

    #[test]
    fn report_csv_labels() {
        let text = format!("{REPORT_CSV_HEADER}\nnode,fc1,fc,2-3-4,fp32,1,1-4,1,,,,2.5e-3,predictor\nrollup,fc,,,,1,,,,,,2.5e-3,\ntotal,,,,,1,,,,,,2.5e-3,\n");
        let p = parse_predicted(&text, Path::new("x")).unwrap();
        let labels: Vec<&str> = p.iter().map(|(l, _)| l.as_str()).collect();
        assert_eq!(labels, ["fc1", "fc", "total"]);
        let text = format!("{DIST_CSV_HEADER}\ncompute,device,1,0e0,1e-1\nallreduce,gradients,1,8e0,2e-2\ntotal,datax2,,,1.2e-1\n");
        let p = parse_predicted(&text, Path::new("x")).unwrap();
        assert_eq!(p[1], ("allreduce:gradients".to_string(), 2e-2));
        assert_eq!(p[2], ("total".to_string(), 1.2e-1));
    }

    #[test]
    fn missing_label_is_an_error() {
        let e = vec![Expected {
            label: "nope".into(),
            measured: 1.0,
        }];
        assert!(matches!(compare(&e, &[]), Err(Error::MissingLabel(_))));
    }

    #[test]
    fn printed_gap_counts_last_digit_steps() {
        assert_eq!(printed_gap_tenths(24.462, 24.6), 1);
        assert_eq!(printed_gap_tenths(12.868, 12.9), 0);
        assert_eq!(printed_gap_tenths(23.496, 23.4), 1);
    }
}
