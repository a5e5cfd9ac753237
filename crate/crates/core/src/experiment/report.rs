use serde::{Deserialize, Serialize};

use super::ResultsManifest;
use crate::eval::MetricsReport;

pub const REPORT_METRICS: [&str; 6] = ["overall", "many", "medium", "few", "mean_max_conf", "ece"];

fn metric(report: &MetricsReport, name: &str) -> Option<f64> {
    match name {
        "overall" => Some(report.overall_acc),
        "many" => report.many_acc,
        "medium" => report.medium_acc,
        "few" => report.few_acc,
        "mean_max_conf" => Some(report.mean_max_confidence),
        "ece" => Some(report.ece),
        _ => None,
    }
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for a single
/// value). `None` for an empty slice.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    /// `mean` minus the baseline method's mean.
    pub delta: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub completed: usize,
    pub failed: usize,
    /// One entry per [`REPORT_METRICS`] name; `None` when no completed
    /// seed defines the metric.
    pub metrics: Vec<Option<MetricSummary>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// First method of the experiment; delta columns are relative to it.
    pub baseline: String,
    pub rows: Vec<MethodSummary>,
}

/// Per-method mean and std over seeds for every reported metric.
pub fn report(manifest: &ResultsManifest) -> Report {
    let mut order: Vec<String> = manifest.experiment.methods.iter().map(|m| m.name.clone()).collect();
    for r in &manifest.records {
        if !order.contains(&r.method) {
            order.push(r.method.clone());
        }
    }
    let mut rows: Vec<MethodSummary> = order
        .iter()
        .map(|name| {
            let records: Vec<_> = manifest.records.iter().filter(|r| &r.method == name).collect();
            let done: Vec<&MetricsReport> = records.iter().filter_map(|r| r.metrics()).collect();
            MethodSummary {
                method: name.clone(),
                completed: done.len(),
                failed: records.len() - done.len(),
                metrics: REPORT_METRICS
                    .iter()
                    .map(|m| {
                        let values: Vec<f64> = done.iter().filter_map(|r| metric(r, m)).collect();
                        mean_std(&values).map(|(mean, std)| MetricSummary {
                            mean,
                            std,
                            delta: None,
                            n: values.len(),
                        })
                    })
                    .collect(),
            }
        })
        .collect();
    let baseline: Vec<Option<f64>> = rows
        .first()
        .map(|r| r.metrics.iter().map(|m| m.map(|s| s.mean)).collect())
        .unwrap_or_default();
    for row in &mut rows {
        for (m, base) in row.metrics.iter_mut().zip(&baseline) {
            if let (Some(s), Some(b)) = (m.as_mut(), base) {
                s.delta = Some(s.mean - b);
            }
        }
    }
    Report {
        baseline: order.first().cloned().unwrap_or_default(),
        rows,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Report {
    /// One row per method; `<metric>_delta` columns are relative to the
    /// baseline named in the column header.
    pub fn to_csv(&self) -> String {
        let mut header = vec!["method".to_string(), "completed".into(), "failed".into()];
        for m in REPORT_METRICS {
            header.push(format!("{m}_mean"));
            header.push(format!("{m}_std"));
            header.push(format!("{m}_delta_vs_{}", self.baseline));
        }
        let mut out = header.join(",") + "\n";
        for row in &self.rows {
            let mut cols = vec![row.method.clone(), row.completed.to_string(), row.failed.to_string()];
            for s in &row.metrics {
                cols.push(opt(s.map(|s| s.mean)));
                cols.push(opt(s.map(|s| s.std)));
                cols.push(opt(s.and_then(|s| s.delta)));
            }
            out += &(cols.join(",") + "\n");
        }
        out
    }

    /// Aligned table of percentages: `mean ± std (delta)`.
    pub fn to_text(&self) -> String {
        let mut table: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["method".to_string(), "n".into()];
        header.extend(REPORT_METRICS.iter().map(|m| m.to_string()));
        table.push(header);
        for row in &self.rows {
            let mut cols = vec![
                row.method.clone(),
                if row.failed > 0 {
                    format!("{} ({} failed)", row.completed, row.failed)
                } else {
                    row.completed.to_string()
                },
            ];
            cols.extend(row.metrics.iter().map(|s| match s {
                Some(s) => format!(
                    "{:.2} ± {:.2} ({:+.2})",
                    100.0 * s.mean,
                    100.0 * s.std,
                    100.0 * s.delta.unwrap_or(0.0)
                ),
                None => "-".into(),
            }));
            table.push(cols);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = format!(
            "values in %, mean ± std over seeds (delta vs baseline `{}`)\n",
            self.baseline
        );
        for row in &table {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, &w))| {
                    if c == 0 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            out += line.join("  ").trim_end();
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{CellRecord, CellResult, ExperimentConfig, HistorySummary, MethodSpec};
    use crate::nn::TrainConfig;

    fn metrics(overall: f64, few: Option<f64>) -> MetricsReport {
        MetricsReport {
            overall_acc: overall,
            many_acc: Some(0.9),
            medium_acc: Some(0.5),
            few_acc: few,
            per_class_acc: vec![overall; 2],
            mean_max_confidence: 0.8,
            ece: 0.1,
        }
    }

    fn record(method: &str, seed: u64, m: Option<MetricsReport>) -> CellRecord {
        CellRecord {
            method: method.into(),
            seed,
            cell_hash: format!("{method}{seed}"),
            config: TrainConfig::default(),
            result: match m {
                Some(metrics) => CellResult::Completed {
                    metrics,
                    history: HistorySummary {
                        epochs: 1,
                        final_lr: 0.1,
                        final_loss: 1.0,
                        final_train_accuracy: None,
                        loss_per_epoch: vec![1.0],
                    },
                },
                None => CellResult::Failed { error: "boom".into() },
            },
        }
    }

    fn manifest(records: Vec<CellRecord>) -> ResultsManifest {
        let text = r#"
seeds = [0, 1]
[dataset]
kind = "context_shift"
num_classes = 2
n_max = 10
rho = 2.0
[[methods]]
name = "base"
[[methods]]
name = "alt"
"#;
        let experiment: ExperimentConfig = toml::from_str(text).unwrap();
        ResultsManifest {
            version: super::super::MANIFEST_VERSION,
            experiment,
            dataset_hash: "h".into(),
            histogram: vec![10, 5],
            records,
        }
    }

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[0.4, 0.5]).unwrap();
        assert!((m - 0.45).abs() < 1e-15);
        assert!((s - 0.005f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.3]), Some((0.3, 0.0)));
        assert_eq!(mean_std(&[]), None);
    }

    #[test]
    fn table_values() {
        let m = manifest(vec![
            record("base", 0, Some(metrics(0.4, Some(0.1)))),
            record("base", 1, Some(metrics(0.5, Some(0.2)))),
            record("alt", 0, Some(metrics(0.6, None))),
            record("alt", 1, None),
        ]);
        let r = report(&m);
        assert_eq!(r.baseline, "base");
        let base = &r.rows[0];
        let overall = base.metrics[0].unwrap();
        assert!((overall.mean - 0.45).abs() < 1e-15);
        assert!((overall.std - 0.005f64.sqrt()).abs() < 1e-15);
        assert_eq!(overall.delta, Some(0.0));
        let alt = &r.rows[1];
        assert_eq!((alt.completed, alt.failed), (1, 1));
        let a = alt.metrics[0].unwrap();
        assert_eq!(a.std, 0.0);
        assert!((a.delta.unwrap() - 0.15).abs() < 1e-15);
        assert_eq!(alt.metrics[3], None);

        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("method,completed,failed,overall_mean,overall_std,overall_delta_vs_base,"));
        assert!(lines[1].starts_with("base,2,0,0.45,"));
        let text = r.to_text();
        assert!(text.contains("45.00 ± 7.07 (+0.00)"), "{text}");
        assert!(text.contains("1 (1 failed)"), "{text}");
    }

    #[test]
    fn manifest_round_trip_preserves_report() {
        let mut m = manifest(vec![
            record("base", 0, Some(metrics(0.1 + 0.2, Some(1.0 / 3.0)))),
            record("alt", 0, Some(metrics(2.0f64.sqrt() / 2.0, None))),
        ]);
        m.experiment.methods.push(MethodSpec {
            name: "extra".into(),
            overrides: toml::from_str("variant = \"cmo\"\nbase_lr = 0.2").unwrap(),
        });
        let back = ResultsManifest::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(report(&back), report(&m));
        assert_eq!(report(&back).to_csv(), report(&m).to_csv());
    }
}
