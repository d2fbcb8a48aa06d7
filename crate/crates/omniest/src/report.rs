//! Table rendering and merging.
//!
//! Simulation summaries and fitted-model coefficients leave the tool in two
//! shapes: a rectangular CSV for machines and an aligned text block for
//! reading. Metric values are already on the x100 scale when they arrive
//! here; text tables print two decimals, CSV keeps full precision so
//! identical runs produce byte-identical files.

use std::fmt::Write as _;

use csv::{ReaderBuilder, Trim};
use thiserror::Error;

use crate::simulation::{MonteCarloReport, StabilizationComparison};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report has no data rows")]
    EmptyReport,
    #[error("missing column {0:?}")]
    MissingColumn(&'static str),
    #[error("row {row}: {message}")]
    MalformedRow { row: usize, message: String },
    #[error("incompatible reports: {0}")]
    IncompatibleReports(String),
}

/// One fitted coefficient as it appears in a coefficient table. `ase` and
/// `p_value` are present for estimators with a variance estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientRow {
    pub estimator: String,
    pub coefficient: String,
    pub estimate: f64,
    pub ase: Option<f64>,
    pub p_value: Option<f64>,
}

fn fmt2(value: f64) -> String {
    format!("{value:.2}")
}

fn opt_full(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

/// Right-aligns every column after the first `left` ones; two spaces between
/// columns, trailing whitespace trimmed per line.
fn align(rows: &[Vec<String>], left: usize) -> String {
    let columns = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut widths = vec![0usize; columns];
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    for row in rows {
        let mut line = String::new();
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            if i < left {
                let _ = write!(line, "{cell:<width$}", width = widths[i]);
            } else {
                let _ = write!(line, "{cell:>width$}", width = widths[i]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

fn failures_line(failures: &std::collections::BTreeMap<String, usize>) -> String {
    if failures.is_empty() {
        return "Failures: none".into();
    }
    let total: usize = failures.values().sum();
    let parts: Vec<String> = failures
        .iter()
        .map(|(kind, n)| format!("{kind} x{n}"))
        .collect();
    format!("Failures: {total} ({})", parts.join(", "))
}

pub fn simulation_report_csv(report: &MonteCarloReport) -> String {
    let mut out = String::from("estimator,coefficient,bias100,mcsd100,ase100,cp\n");
    for est in &report.estimators {
        for (c, name) in report.coefficient_names.iter().enumerate() {
            let ase = opt_full(est.ase100.as_ref().map(|v| v[c]));
            let cp = opt_full(est.cp.as_ref().map(|v| v[c]));
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                est.label, name, est.bias100[c], est.mcsd100[c], ase, cp
            );
        }
    }
    out
}

pub fn simulation_report_text(report: &MonteCarloReport) -> String {
    let mut out = format!(
        "Replicates: {} ({} ok)\n",
        report.n_replicates, report.n_success
    );
    let _ = writeln!(
        out,
        "Mean cluster size: {:.2}   Truncated fraction: {:.3}",
        report.mean_cluster_size, report.mean_truncated_fraction
    );
    if let Some(k) = report.mean_k_chosen {
        let _ = writeln!(out, "Mean chosen k: {k:.2}");
    }
    out.push_str(&failures_line(&report.failures));
    out.push_str("\n\n");

    let mut rows = Vec::new();
    let mut header = vec![String::new(), String::new()];
    header.extend(report.coefficient_names.iter().cloned());
    rows.push(header);
    for est in &report.estimators {
        let p = report.coefficient_names.len();
        let bias: Vec<String> = (0..p).map(|c| fmt2(est.bias100[c])).collect();
        let mcsd: Vec<String> = (0..p).map(|c| fmt2(est.mcsd100[c])).collect();
        let ase: Vec<String> = (0..p)
            .map(|c| est.ase100.as_ref().map_or("--".into(), |v| fmt2(v[c])))
            .collect();
        let cp: Vec<String> = (0..p)
            .map(|c| est.cp.as_ref().map_or("--".into(), |v| fmt2(v[c])))
            .collect();
        let metrics = [("Bias", bias), ("MCSD", mcsd), ("ASE", ase), ("CP", cp)];
        for (m, (label, cells)) in metrics.into_iter().enumerate() {
            let mut row = vec![
                if m == 0 { est.label.clone() } else { String::new() },
                label.into(),
            ];
            row.extend(cells);
            rows.push(row);
        }
    }
    out.push_str(&align(&rows, 2));
    out
}

pub fn comparison_report_csv(cmp: &StabilizationComparison) -> String {
    let mut out = String::from(
        "coefficient,bias100,mcsd100,ase100_raw,cp_raw,ase100_stabilized,cp_stabilized\n",
    );
    for (c, name) in cmp.coefficient_names.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            name,
            cmp.bias100[c],
            cmp.mcsd100[c],
            cmp.ase100_raw[c],
            cmp.cp_raw[c],
            cmp.ase100_stabilized[c],
            cmp.cp_stabilized[c]
        );
    }
    out
}

pub fn comparison_report_text(cmp: &StabilizationComparison) -> String {
    let mut out = format!("Replicates: {} ({} ok)\n", cmp.n_replicates, cmp.n_success);
    let _ = writeln!(
        out,
        "Mean cluster size: {:.2}   Truncated fraction: {:.3}   Mean chosen k: {:.2}",
        cmp.mean_cluster_size, cmp.mean_truncated_fraction, cmp.mean_k_chosen
    );
    out.push_str(&failures_line(&cmp.failures));
    out.push_str("\n\n");

    let mut rows = vec![
        vec![
            String::new(),
            String::new(),
            String::new(),
            "no k-means".into(),
            String::new(),
            "k-means".into(),
            String::new(),
        ],
        vec![
            String::new(),
            "Bias".into(),
            "MCSD".into(),
            "ASE".into(),
            "CP".into(),
            "ASE".into(),
            "CP".into(),
        ],
    ];
    for (c, name) in cmp.coefficient_names.iter().enumerate() {
        rows.push(vec![
            name.clone(),
            fmt2(cmp.bias100[c]),
            fmt2(cmp.mcsd100[c]),
            fmt2(cmp.ase100_raw[c]),
            fmt2(cmp.cp_raw[c]),
            fmt2(cmp.ase100_stabilized[c]),
            fmt2(cmp.cp_stabilized[c]),
        ]);
    }
    out.push_str(&align(&rows, 1));
    out
}

pub fn coefficient_table_csv(rows: &[CoefficientRow]) -> String {
    let mut out = String::from("estimator,coefficient,estimate,ase,p_value\n");
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            row.estimator,
            row.coefficient,
            row.estimate,
            opt_full(row.ase),
            opt_full(row.p_value)
        );
    }
    out
}

pub fn parse_coefficient_table(text: &str) -> Result<Vec<CoefficientRow>, ReportError> {
    let mut reader = ReaderBuilder::new()
        .has_headers(true)
        .trim(Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| ReportError::MalformedRow {
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    let find = |name: &'static str| -> Result<usize, ReportError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or(ReportError::MissingColumn(name))
    };
    let col_estimator = find("estimator")?;
    let col_coefficient = find("coefficient")?;
    let col_estimate = find("estimate")?;
    let col_ase = headers.iter().position(|h| h == "ase");
    let col_p = headers.iter().position(|h| h == "p_value");

    let parse_required = |row: usize, field: &str| -> Result<f64, ReportError> {
        field.parse().map_err(|_| ReportError::MalformedRow {
            row,
            message: format!("cannot parse {field:?} as a number"),
        })
    };
    let parse_optional = |row: usize, field: Option<&str>| -> Result<Option<f64>, ReportError> {
        match field {
            None | Some("") => Ok(None),
            Some(text) => parse_required(row, text).map(Some),
        }
    };

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| ReportError::MalformedRow {
            row,
            message: e.to_string(),
        })?;
        let get = |col: usize| record.get(col).unwrap_or("");
        rows.push(CoefficientRow {
            estimator: get(col_estimator).to_string(),
            coefficient: get(col_coefficient).to_string(),
            estimate: parse_required(row, get(col_estimate))?,
            ase: parse_optional(row, col_ase.map(get))?,
            p_value: parse_optional(row, col_p.map(get))?,
        });
    }
    Ok(rows)
}

/// One estimator column entry of a merged table.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedCell {
    pub estimate: f64,
    pub p_value: Option<f64>,
}

impl MergedCell {
    /// Star convention: two-sided p below 0.05.
    pub fn significant(&self) -> bool {
        self.p_value.is_some_and(|p| p < 0.05)
    }
}

/// Side-by-side coefficient comparison; `cells[c][e]` pairs coefficient `c`
/// with estimator `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedComparison {
    pub coefficients: Vec<String>,
    pub estimators: Vec<String>,
    pub cells: Vec<Vec<MergedCell>>,
}

/// Merges coefficient tables into one comparison. Every estimator must cover
/// the same coefficient set; the first table fixes the row order.
pub fn merged_comparison(tables: &[Vec<CoefficientRow>]) -> Result<MergedComparison, ReportError> {
    let rows: Vec<&CoefficientRow> = tables.iter().flatten().collect();
    if rows.is_empty() {
        return Err(ReportError::EmptyReport);
    }

    let mut coefficients: Vec<String> = Vec::new();
    for row in &rows {
        if !coefficients.contains(&row.coefficient) {
            coefficients.push(row.coefficient.clone());
        }
    }
    let mut estimators: Vec<String> = Vec::new();
    let mut cells: Vec<Vec<MergedCell>> = vec![Vec::new(); coefficients.len()];
    let mut seen: std::collections::BTreeSet<(String, String)> = std::collections::BTreeSet::new();
    for row in &rows {
        if !estimators.contains(&row.estimator) {
            estimators.push(row.estimator.clone());
        }
        if !seen.insert((row.estimator.clone(), row.coefficient.clone())) {
            return Err(ReportError::IncompatibleReports(format!(
                "estimator {:?} lists coefficient {:?} more than once",
                row.estimator, row.coefficient
            )));
        }
    }
    for estimator in &estimators {
        let mut covered: Vec<&str> = Vec::new();
        for row in &rows {
            if &row.estimator == estimator {
                covered.push(&row.coefficient);
            }
        }
        if covered.len() != coefficients.len() {
            let missing: Vec<&str> = coefficients
                .iter()
                .map(String::as_str)
                .filter(|c| !covered.contains(c))
                .collect();
            return Err(ReportError::IncompatibleReports(format!(
                "estimator {:?} is missing coefficients: {}",
                estimator,
                missing.join(", ")
            )));
        }
    }
    for (c, coefficient) in coefficients.iter().enumerate() {
        for estimator in &estimators {
            let row = rows
                .iter()
                .find(|r| &r.estimator == estimator && &r.coefficient == coefficient)
                .expect("coverage checked above");
            cells[c].push(MergedCell {
                estimate: row.estimate,
                p_value: row.p_value,
            });
        }
    }
    Ok(MergedComparison {
        coefficients,
        estimators,
        cells,
    })
}

pub fn merged_comparison_text(merged: &MergedComparison) -> String {
    let mut rows = Vec::new();
    let mut header = vec![String::new()];
    header.extend(merged.estimators.iter().cloned());
    rows.push(header);
    for (c, coefficient) in merged.coefficients.iter().enumerate() {
        let mut row = vec![coefficient.clone()];
        for cell in &merged.cells[c] {
            let star = if cell.significant() { "*" } else { "" };
            row.push(format!("{:.4}{star}", cell.estimate));
        }
        rows.push(row);
    }
    let mut out = align(&rows, 1);
    out.push_str("\n* two-sided p < 0.05\n");
    out
}

pub fn merged_comparison_csv(merged: &MergedComparison) -> String {
    let mut out = String::from("coefficient");
    for estimator in &merged.estimators {
        let _ = write!(out, ",{estimator},{estimator}_p");
    }
    out.push('\n');
    for (c, coefficient) in merged.coefficients.iter().enumerate() {
        let _ = write!(out, "{coefficient}");
        for cell in &merged.cells[c] {
            let _ = write!(out, ",{},{}", cell.estimate, opt_full(cell.p_value));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::EstimatorSummary;
    use std::collections::BTreeMap;

    fn tiny_report() -> MonteCarloReport {
        MonteCarloReport {
            coefficient_names: vec!["x1".into(), "x2".into()],
            estimators: vec![
                EstimatorSummary {
                    label: "OMNI".into(),
                    bias100: vec![0.125, -0.25],
                    mcsd100: vec![1.5, 2.0],
                    ase100: Some(vec![1.25, 1.75]),
                    cp: Some(vec![94.5, 95.0]),
                },
                EstimatorSummary {
                    label: "GEE".into(),
                    bias100: vec![17.5, 3.0],
                    mcsd100: vec![2.5, 3.5],
                    ase100: None,
                    cp: None,
                },
            ],
            n_replicates: 10,
            n_success: 9,
            failures: BTreeMap::from([("dropout: separation".to_string(), 1)]),
            mean_cluster_size: 54.5,
            mean_truncated_fraction: 0.3,
            mean_k_chosen: Some(4.0),
        }
    }

    #[test]
    fn simulation_csv_layout() {
        let csv = simulation_report_csv(&tiny_report());
        let expected = "estimator,coefficient,bias100,mcsd100,ase100,cp\n\
                        OMNI,x1,0.125,1.5,1.25,94.5\n\
                        OMNI,x2,-0.25,2,1.75,95\n\
                        GEE,x1,17.5,2.5,,\n\
                        GEE,x2,3,3.5,,\n";
        assert_eq!(csv, expected);
    }

    #[test]
    fn simulation_text_has_summary_and_placeholders() {
        let text = simulation_report_text(&tiny_report());
        assert!(text.contains("Replicates: 10 (9 ok)"));
        assert!(text.contains("Mean cluster size: 54.50"));
        assert!(text.contains("Failures: 1 (dropout: separation x1)"));
        assert!(text.contains("Mean chosen k: 4.00"));
        let lines: Vec<&str> = text.lines().collect();
        let bias = lines
            .iter()
            .find(|l| l.starts_with("OMNI"))
            .expect("bias row");
        assert!(bias.contains("Bias") && bias.contains("0.12") && bias.contains("-0.25"));
        let ase_gap = lines
            .iter()
            .find(|l| l.trim_start().starts_with("ASE") && l.contains("--"))
            .is_some();
        assert!(ase_gap, "baseline ASE shows placeholders:\n{text}");
        // The header names sit above the numeric columns.
        let header = lines.iter().find(|l| l.trim_start().starts_with("x1")).unwrap();
        assert!(header.find("x1").unwrap() < header.find("x2").unwrap());
    }

    fn tiny_comparison() -> StabilizationComparison {
        StabilizationComparison {
            coefficient_names: vec!["x1".into()],
            bias100: vec![0.5],
            mcsd100: vec![1.5],
            ase100_raw: vec![1.25],
            cp_raw: vec![92.0],
            ase100_stabilized: vec![1.5],
            cp_stabilized: vec![94.0],
            mean_k_chosen: 3.25,
            mean_cluster_size: 6.5,
            mean_truncated_fraction: 0.2,
            n_replicates: 4,
            n_success: 4,
            failures: BTreeMap::new(),
        }
    }

    #[test]
    fn comparison_csv_layout() {
        let csv = comparison_report_csv(&tiny_comparison());
        let expected =
            "coefficient,bias100,mcsd100,ase100_raw,cp_raw,ase100_stabilized,cp_stabilized\n\
             x1,0.5,1.5,1.25,92,1.5,94\n";
        assert_eq!(csv, expected);
    }

    #[test]
    fn comparison_text_pairs_both_variance_paths() {
        let text = comparison_report_text(&tiny_comparison());
        assert!(text.contains("no k-means"));
        assert!(text.contains("Failures: none"));
        let row = text
            .lines()
            .find(|l| l.starts_with("x1"))
            .expect("coefficient row");
        assert!(row.contains("92.00") && row.contains("94.00"));
    }

    #[test]
    fn coefficient_table_round_trips() {
        let rows = vec![
            CoefficientRow {
                estimator: "OMNI".into(),
                coefficient: "x1".into(),
                estimate: 1.0625,
                ase: Some(0.125),
                p_value: Some(0.04),
            },
            CoefficientRow {
                estimator: "GEE".into(),
                coefficient: "x1".into(),
                estimate: -0.5,
                ase: None,
                p_value: None,
            },
        ];
        let parsed = parse_coefficient_table(&coefficient_table_csv(&rows)).unwrap();
        assert_eq!(parsed, rows);
    }

    #[test]
    fn parse_reports_missing_columns_and_bad_numbers() {
        let err = parse_coefficient_table("coefficient,estimate\nx1,1.0\n").unwrap_err();
        assert!(matches!(err, ReportError::MissingColumn("estimator")));
        let err = parse_coefficient_table(
            "estimator,coefficient,estimate\nOMNI,x1,1.0\nGEE,x1,abc\n",
        )
        .unwrap_err();
        match err {
            ReportError::MalformedRow { row, .. } => assert_eq!(row, 3),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn merge_stars_significant_cells() {
        let omni = vec![
            CoefficientRow {
                estimator: "OMNI".into(),
                coefficient: "x1".into(),
                estimate: 1.0,
                ase: Some(0.1),
                p_value: Some(0.04),
            },
            CoefficientRow {
                estimator: "OMNI".into(),
                coefficient: "x2".into(),
                estimate: 0.5,
                ase: Some(0.3),
                p_value: Some(0.12),
            },
        ];
        let gee = vec![
            CoefficientRow {
                estimator: "GEE".into(),
                coefficient: "x1".into(),
                estimate: 0.9,
                ase: None,
                p_value: None,
            },
            CoefficientRow {
                estimator: "GEE".into(),
                coefficient: "x2".into(),
                estimate: 0.4,
                ase: None,
                p_value: None,
            },
        ];
        let merged = merged_comparison(&[omni, gee]).unwrap();
        assert_eq!(merged.estimators, vec!["OMNI", "GEE"]);
        assert_eq!(merged.coefficients, vec!["x1", "x2"]);
        assert!(merged.cells[0][0].significant());
        assert!(!merged.cells[1][0].significant());
        assert!(!merged.cells[0][1].significant());
        let text = merged_comparison_text(&merged);
        let x1 = text.lines().find(|l| l.starts_with("x1")).unwrap();
        assert!(x1.contains("1.0000*") && x1.contains("0.9000"));
        let csv = merged_comparison_csv(&merged);
        assert!(csv.starts_with("coefficient,OMNI,OMNI_p,GEE,GEE_p\n"));
        assert!(csv.contains("x1,1,0.04,0.9,\n"));
    }

    #[test]
    fn merge_rejects_mismatched_and_duplicated_sets() {
        let a = vec![CoefficientRow {
            estimator: "OMNI".into(),
            coefficient: "x1".into(),
            estimate: 1.0,
            ase: None,
            p_value: None,
        }];
        let b = vec![CoefficientRow {
            estimator: "GEE".into(),
            coefficient: "x9".into(),
            estimate: 1.0,
            ase: None,
            p_value: None,
        }];
        match merged_comparison(&[a.clone(), b]).unwrap_err() {
            ReportError::IncompatibleReports(msg) => {
                assert!(msg.contains("missing"), "{msg}")
            }
            other => panic!("unexpected error {other:?}"),
        }
        match merged_comparison(&[a.clone(), a.clone()]).unwrap_err() {
            ReportError::IncompatibleReports(msg) => {
                assert!(msg.contains("more than once"), "{msg}")
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert!(matches!(
            merged_comparison(&[]).unwrap_err(),
            ReportError::EmptyReport
        ));
    }
}
