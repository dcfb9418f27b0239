//! Report serialization and table rendering.
//!
//! Each run emits one CSV row keyed by (bundle, method, config, seed).
//! `render_pivot` lays rows out the way benchmark tables usually go:
//! methods down the side, datasets across the top, plus an average column.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Result, TtaError};
use crate::metrics::MetricReport;

const HEADERS: [&str; 13] = [
    "method",
    "bundle",
    "mode",
    "template_mode",
    "config_hash",
    "seed",
    "n_evaluated",
    "accuracy",
    "ece",
    "auroc",
    "per_class_accuracy",
    "per_class_counts",
    "evaluated_digest",
];

/// Append-or-create a report CSV with one row per report.
pub fn write_reports_csv(reports: &[MetricReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| TtaError::io(path, std::io::Error::other(e)))?;
    w.write_record(HEADERS)
        .map_err(|e| TtaError::io(path, std::io::Error::other(e)))?;
    for r in reports {
        w.write_record([
            r.method_tag.clone(),
            r.bundle_name.clone(),
            r.mode.clone(),
            r.template_mode.clone(),
            r.config_hash.clone(),
            r.seed.to_string(),
            r.n_evaluated.to_string(),
            format!("{:.17e}", r.accuracy),
            r.ece.map(|v| format!("{v:.17e}")).unwrap_or_default(),
            r.auroc.map(|v| format!("{v:.17e}")).unwrap_or_default(),
            join_f64(&r.per_class_accuracy),
            r.per_class_counts
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(";"),
            r.evaluated_digest.clone(),
        ])
        .map_err(|e| TtaError::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| TtaError::io(path, e))
}

fn join_f64(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:.17e}"))
        .collect::<Vec<_>>()
        .join(";")
}

/// Read every report row of one CSV file.
pub fn read_reports_csv(path: &Path) -> Result<Vec<MetricReport>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| TtaError::io(path, std::io::Error::other(e)))?;
    let headers = reader
        .headers()
        .map_err(|e| TtaError::io(path, std::io::Error::other(e)))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| TtaError::Manifest(format!("report csv lacks column '{name}'")))
    };
    let idx: Vec<usize> = HEADERS.iter().map(|h| col(h)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| TtaError::io(path, std::io::Error::other(e)))?;
        let field = |i: usize| record.get(idx[i]).unwrap_or_default().to_string();
        let parse_f64 = |s: &str, name: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| TtaError::Manifest(format!("bad {name} value '{s}'")))
        };
        let opt_f64 = |s: String, name: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                parse_f64(&s, name).map(Some)
            }
        };
        out.push(MetricReport {
            method_tag: field(0),
            bundle_name: field(1),
            mode: field(2),
            template_mode: field(3),
            config_hash: field(4),
            seed: field(5)
                .parse()
                .map_err(|_| TtaError::Manifest("bad seed".into()))?,
            n_evaluated: field(6)
                .parse()
                .map_err(|_| TtaError::Manifest("bad n_evaluated".into()))?,
            accuracy: parse_f64(&field(7), "accuracy")?,
            ece: opt_f64(field(8), "ece")?,
            auroc: opt_f64(field(9), "auroc")?,
            per_class_accuracy: split_f64(&field(10))?,
            per_class_counts: split_usize(&field(11))?,
            evaluated_digest: field(12),
        });
    }
    Ok(out)
}

fn split_f64(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|p| {
            p.parse()
                .map_err(|_| TtaError::Manifest(format!("bad float '{p}'")))
        })
        .collect()
}

fn split_usize(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|p| {
            p.parse()
                .map_err(|_| TtaError::Manifest(format!("bad count '{p}'")))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for TableFormat {
    type Err = TtaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TableFormat::Csv),
            "markdown" => Ok(TableFormat::Markdown),
            other => Err(TtaError::InvalidInput(format!(
                "report format must be 'csv' or 'markdown', got '{other}'"
            ))),
        }
    }
}

/// Pivot reports into a methods-by-datasets accuracy table (percent, two
/// decimals) with a trailing average column. Multiple reports of one
/// (method, dataset) cell average their accuracies (e.g. across seeds).
pub fn render_pivot(reports: &[MetricReport], format: TableFormat) -> Result<String> {
    if reports.is_empty() {
        return Err(TtaError::InvalidInput("no reports to render".into()));
    }
    let mut datasets: Vec<String> = reports.iter().map(|r| r.bundle_name.clone()).collect();
    datasets.sort();
    datasets.dedup();
    let mut methods: Vec<String> = reports.iter().map(|r| r.method_tag.clone()).collect();
    methods.sort();
    methods.dedup();

    let mut cells: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in reports {
        cells
            .entry((r.method_tag.clone(), r.bundle_name.clone()))
            .or_default()
            .push(r.accuracy);
    }
    let cell = |method: &str, dataset: &str| -> Option<f64> {
        cells
            .get(&(method.to_string(), dataset.to_string()))
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };

    let mut lines = Vec::new();
    match format {
        TableFormat::Csv => {
            let mut header = vec!["method".to_string()];
            header.extend(datasets.iter().cloned());
            header.push("avg".into());
            lines.push(header.join(","));
            for m in &methods {
                let mut row = vec![m.clone()];
                let mut values = Vec::new();
                for d in &datasets {
                    match cell(m, d) {
                        Some(v) => {
                            values.push(v);
                            row.push(format!("{:.2}", v * 100.0));
                        }
                        None => row.push(String::new()),
                    }
                }
                let avg = values.iter().sum::<f64>() / values.len().max(1) as f64;
                row.push(format!("{:.2}", avg * 100.0));
                lines.push(row.join(","));
            }
        }
        TableFormat::Markdown => {
            let mut header = vec!["method".to_string()];
            header.extend(datasets.iter().cloned());
            header.push("avg".into());
            lines.push(format!("| {} |", header.join(" | ")));
            lines.push(format!(
                "|{}|",
                header.iter().map(|_| " --- ").collect::<Vec<_>>().join("|")
            ));
            for m in &methods {
                let mut row = vec![m.clone()];
                let mut values = Vec::new();
                for d in &datasets {
                    match cell(m, d) {
                        Some(v) => {
                            values.push(v);
                            row.push(format!("{:.2}", v * 100.0));
                        }
                        None => row.push("-".into()),
                    }
                }
                let avg = values.iter().sum::<f64>() / values.len().max(1) as f64;
                row.push(format!("{:.2}", avg * 100.0));
                lines.push(format!("| {} |", row.join(" | ")));
            }
        }
    }
    lines.push(String::new());
    Ok(lines.join("\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(method: &str, bundle: &str, accuracy: f64) -> MetricReport {
        MetricReport {
            method_tag: method.into(),
            bundle_name: bundle.into(),
            mode: "episodic".into(),
            config_hash: "h".into(),
            seed: 0,
            template_mode: "single".into(),
            accuracy,
            ece: Some(0.1),
            auroc: None,
            n_evaluated: 10,
            per_class_accuracy: vec![accuracy, accuracy],
            per_class_counts: vec![5, 5],
            evaluated_digest: "d".into(),
        }
    }

    #[test]
    fn csv_round_trip_preserves_values() {
        let reports = vec![report("tpt", "a", 0.512345), report("zero", "b", 0.25)];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_reports_csv(&reports, &path).unwrap();
        let loaded = read_reports_csv(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].accuracy, 0.512345);
        assert_eq!(loaded[0].ece, Some(0.1));
        assert_eq!(loaded[1].auroc, None);
        assert_eq!(loaded[0].per_class_counts, vec![5, 5]);
    }

    #[test]
    fn pivot_matches_hand_layout() {
        let reports = vec![
            report("tpt", "ds_a", 0.50),
            report("tpt", "ds_b", 0.70),
            report("zero_shot", "ds_a", 0.40),
        ];
        let out = render_pivot(&reports, TableFormat::Csv).unwrap();
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines[0], "method,ds_a,ds_b,avg");
        assert_eq!(lines[1], "tpt,50.00,70.00,60.00");
        assert_eq!(lines[2], "zero_shot,40.00,,40.00");
    }

    #[test]
    fn pivot_averages_multiple_seeds() {
        let reports = vec![report("tpt", "ds", 0.4), report("tpt", "ds", 0.6)];
        let out = render_pivot(&reports, TableFormat::Markdown).unwrap();
        assert!(out.contains("| tpt | 50.00 | 50.00 |"), "{out}");
    }

    #[test]
    fn empty_reports_error() {
        assert!(render_pivot(&[], TableFormat::Csv).is_err());
    }
}
