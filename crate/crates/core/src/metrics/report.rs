//! Report emission in the benchmark table layout: per-fold columns plus
//! an average column, one row per (method-variant, N-way K-shot, metric).
//!
//! The text table carries one-decimal percent; CSV and JSON carry full
//! precision. Partial runs render explicit em-dash cells and a partial
//! flag instead of inventing an average.

use serde::{Deserialize, Serialize};

use super::{fold_average, render_percent, FoldReport, MetricError};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvgMetrics {
    pub er: f64,
    pub miou: Option<f64>,
}

/// One run (one method-variant at one N/K) across its configured folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub variant: String,
    pub n_ways: u32,
    pub k_shots: u32,
    /// Folds the run was configured to evaluate.
    pub configured_folds: Vec<u32>,
    /// Folds actually present in the results.
    pub folds: Vec<FoldReport>,
    /// Present only when every configured fold reported.
    pub avg: Option<AvgMetrics>,
    pub partial: bool,
}

impl RunReport {
    pub fn assemble(
        method: String,
        variant: String,
        n_ways: u32,
        k_shots: u32,
        configured_folds: Vec<u32>,
        folds: Vec<FoldReport>,
    ) -> Result<Self, MetricError> {
        let partial = configured_folds
            .iter()
            .any(|f| !folds.iter().any(|r| r.fold == *f));
        let avg = if partial {
            None
        } else {
            let ers: Vec<f64> = folds.iter().map(|f| f.er).collect();
            let er = fold_average(&ers, configured_folds.len())?;
            let mious: Vec<f64> = folds.iter().filter_map(|f| f.miou).collect();
            let miou = (mious.len() == folds.len())
                .then(|| fold_average(&mious, configured_folds.len()))
                .transpose()?;
            Some(AvgMetrics { er, miou })
        };
        Ok(Self {
            method,
            variant,
            n_ways,
            k_shots,
            configured_folds,
            folds,
            avg,
            partial,
        })
    }

    fn fold_report(&self, fold: u32) -> Option<&FoldReport> {
        self.folds.iter().find(|f| f.fold == fold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: u32,
    pub runs: Vec<RunReport>,
}

impl Report {
    pub fn new(runs: Vec<RunReport>) -> Self {
        Self {
            schema: REPORT_SCHEMA_VERSION,
            runs,
        }
    }

    /// Union of every run's configured folds, sorted.
    fn fold_columns(&self) -> Vec<u32> {
        let mut folds: Vec<u32> = self
            .runs
            .iter()
            .flat_map(|r| r.configured_folds.iter().copied())
            .collect();
        folds.sort_unstable();
        folds.dedup();
        folds
    }
}

/// Full-precision JSON, schema-versioned.
pub fn report_to_json(report: &Report) -> String {
    let mut text = serde_json::to_string_pretty(report).expect("report encodes");
    text.push('\n');
    text
}

pub fn report_from_json(text: &str) -> Result<Report, MetricError> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| MetricError::Contract(format!("report parse: {e}")))?;
    let schema = value.get("schema").and_then(|v| v.as_u64());
    if schema != Some(REPORT_SCHEMA_VERSION as u64) {
        return Err(MetricError::Contract(format!(
            "report schema {:?} does not match version {REPORT_SCHEMA_VERSION}; migrate the file",
            schema
        )));
    }
    serde_json::from_value(value).map_err(|e| MetricError::Contract(format!("report parse: {e}")))
}

const DASH: &str = "—";

/// Text table, one-decimal percent cells, folds as 5^i columns.
pub fn render_table(report: &Report) -> String {
    let folds = report.fold_columns();
    let mut header: Vec<String> = vec![
        "method".into(),
        "variant".into(),
        "n".into(),
        "k".into(),
        "metric".into(),
    ];
    header.extend(folds.iter().map(|f| format!("5^{f}")));
    header.push("avg.".into());

    let mut rows: Vec<Vec<String>> = vec![header];
    for run in &report.runs {
        for metric in ["ER", "mIoU"] {
            let mut row = vec![
                run.method.clone(),
                run.variant.clone(),
                run.n_ways.to_string(),
                run.k_shots.to_string(),
                metric.to_string(),
            ];
            for fold in &folds {
                let cell = match run.fold_report(*fold) {
                    None => DASH.to_string(),
                    Some(f) => match metric {
                        "ER" => render_percent(f.er),
                        _ => f.miou.map(render_percent).unwrap_or_else(|| DASH.into()),
                    },
                };
                row.push(cell);
            }
            let avg_cell = match (&run.avg, metric) {
                (Some(avg), "ER") => render_percent(avg.er),
                (Some(avg), _) => avg.miou.map(render_percent).unwrap_or_else(|| DASH.into()),
                (None, _) => DASH.to_string(),
            };
            row.push(avg_cell);
            rows.push(row);
        }
    }

    let columns = rows[0].len();
    let widths: Vec<usize> = (0..columns)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| format!("{cell:<width$}", width = widths[c]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    if report.runs.iter().any(|r| r.partial) {
        out.push_str("(partial: some configured folds have no results)\n");
    }
    out
}

/// CSV at full precision: method,variant,n_ways,k_shots,fold,metric,value,episodes,failed.
pub fn render_csv(report: &Report) -> String {
    let mut out = String::from("method,variant,n_ways,k_shots,fold,metric,value,episodes,failed\n");
    for run in &report.runs {
        for fold in &run.folds {
            for (metric, value) in [("er", Some(fold.er)), ("miou", fold.miou)] {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    csv_field(&run.method),
                    csv_field(&run.variant),
                    run.n_ways,
                    run.k_shots,
                    fold.fold,
                    metric,
                    value.map(|v| v.to_string()).unwrap_or_default(),
                    fold.episodes,
                    fold.failed
                ));
            }
        }
        if let Some(avg) = &run.avg {
            let episodes: u64 = run.folds.iter().map(|f| f.episodes).sum();
            let failed: u64 = run.folds.iter().map(|f| f.failed).sum();
            for (metric, value) in [("er", Some(avg.er)), ("miou", avg.miou)] {
                out.push_str(&format!(
                    "{},{},{},{},avg,{},{},{},{}\n",
                    csv_field(&run.method),
                    csv_field(&run.variant),
                    run.n_ways,
                    run.k_shots,
                    metric,
                    value.map(|v| v.to_string()).unwrap_or_default(),
                    episodes,
                    failed
                ));
            }
        }
    }
    out
}

fn csv_field(text: &str) -> String {
    if text.contains([',', '"', '\n']) {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fold(id: u32, er: f64, miou: f64) -> FoldReport {
        FoldReport {
            fold: id,
            episodes: 50,
            failed: 0,
            er,
            miou: Some(miou),
            per_class_iou: vec![Some(miou)],
        }
    }

    fn sample_report() -> Report {
        let run = RunReport::assemble(
            "vise".into(),
            "full".into(),
            2,
            1,
            vec![0, 1, 2, 3],
            vec![
                fold(0, 0.923, 0.619),
                fold(1, 0.815, 0.553),
                fold(2, 0.867, 0.567),
                fold(3, 0.915, 0.575),
            ],
        )
        .unwrap();
        Report::new(vec![run])
    }

    #[test]
    fn averages_match_fold_average() {
        let report = sample_report();
        let avg = report.runs[0].avg.as_ref().unwrap();
        assert!((avg.er - 0.88).abs() < 1e-12);
        assert_eq!(render_percent(avg.er), "88.0");
        assert_eq!(render_percent(avg.miou.unwrap()), "57.9");
    }

    #[test]
    fn json_roundtrips_at_full_precision() {
        let report = sample_report();
        let text = report_to_json(&report);
        let back = report_from_json(&text).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn schema_mismatch_is_a_migration_error() {
        let mut value: serde_json::Value =
            serde_json::from_str(&report_to_json(&sample_report())).unwrap();
        value["schema"] = serde_json::json!(99);
        let err = report_from_json(&value.to_string()).unwrap_err();
        assert!(err.to_string().contains("migrate"), "{err}");
    }

    #[test]
    fn partial_run_renders_dashes() {
        let run = RunReport::assemble(
            "vise".into(),
            "full".into(),
            1,
            1,
            vec![0, 1, 2, 3],
            vec![fold(0, 1.0, 1.0), fold(1, 1.0, 1.0)],
        )
        .unwrap();
        assert!(run.partial);
        assert!(run.avg.is_none());
        let table = render_table(&Report::new(vec![run]));
        assert!(table.contains('—'));
        assert!(table.contains("partial"));
    }

    #[test]
    fn table_cells_round_from_full_precision() {
        let report = sample_report();
        let table = render_table(&report);
        for f in &report.runs[0].folds {
            assert!(table.contains(&render_percent(f.er)));
        }
        let header = table.lines().next().unwrap();
        assert!(header.contains("5^0") && header.contains("avg."));
    }

    #[test]
    fn csv_shape() {
        let csv = render_csv(&sample_report());
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "method,variant,n_ways,k_shots,fold,metric,value,episodes,failed"
        );
        // 4 folds x 2 metrics + 2 avg rows
        assert_eq!(csv.lines().count(), 1 + 8 + 2);
        assert!(csv.contains("vise,full,2,1,0,er,0.923,50,0"));
        assert!(csv.contains(",avg,er,"));
    }
}
