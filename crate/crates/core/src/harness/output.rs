use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::ExperimentKind;
use super::experiments::{ExperimentResult, ResultRow};
use super::plot::{Chart, Series};
use crate::error::{Error, Result};
use crate::numeric;

/// Aggregate of one `(experiment, variant, n, method, target)` cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub variant: String,
    pub n: usize,
    pub method: String,
    pub target: String,
    pub target_index: usize,
    pub count: usize,
    pub mean_estimate: f64,
    pub sd_estimate: f64,
    pub mean_truth: f64,
    /// Mean of `estimate - truth`.
    pub bias: f64,
    pub sd_error: f64,
    /// Standard error of `bias`.
    pub se_bias: f64,
    pub rmse: f64,
    pub mean_relative_error: f64,
    pub sd_relative_error: f64,
}

type CellKey = (String, String, usize, String, usize, String);

/// Groups rows by everything but the replication. Output is sorted.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut cells: BTreeMap<CellKey, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        cells
            .entry((
                r.experiment.clone(),
                r.variant.clone(),
                r.n,
                r.method.clone(),
                r.target_index,
                r.target.clone(),
            ))
            .or_default()
            .push(r);
    }
    cells
        .into_iter()
        .map(|((experiment, variant, n, method, target_index, target), rs)| {
            let col = |f: fn(&ResultRow) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let est = col(|r| r.estimate);
            let truth = col(|r| r.truth);
            let err = col(|r| r.error);
            let rel = col(|r| r.relative_error);
            SummaryRow {
                experiment,
                variant,
                n,
                method,
                target,
                target_index,
                count: rs.len(),
                mean_estimate: numeric::mean(&est),
                sd_estimate: numeric::sample_std(&est),
                mean_truth: numeric::mean(&truth),
                bias: numeric::mean(&err),
                sd_error: numeric::sample_std(&err),
                se_bias: numeric::std_error(&err),
                rmse: numeric::rms(&err),
                mean_relative_error: numeric::mean(&rel),
                sd_relative_error: numeric::sample_std(&rel),
            }
        })
        .collect()
}

#[derive(Serialize)]
struct Manifest<'a> {
    experiment: &'a str,
    config_hash: &'a str,
    master_seed: u64,
    library_version: &'a str,
    rows: usize,
    files: Vec<String>,
    config: super::config::ExperimentConfig,
}

fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `<kind>.csv`, `<kind>_summary.csv`, optional `<kind>.svg` and
/// `<kind>_manifest.json` into `dir`; returns the written paths.
pub fn emit_outputs(result: &ExperimentResult, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let kind = result.kind.as_str();
    let mut written = Vec::new();

    let long = dir.join(format!("{kind}.csv"));
    write_csv(&result.rows, &long)?;
    written.push(long);

    let summary = summarize(&result.rows);
    let sum_path = dir.join(format!("{kind}_summary.csv"));
    write_csv(&summary, &sum_path)?;
    written.push(sum_path);

    if result.config.plots {
        if let Some(chart) = chart_for(result.kind, &result.rows, &summary) {
            let svg = dir.join(format!("{kind}.svg"));
            fs::write(&svg, chart.render()).map_err(|e| Error::io(&svg, e))?;
            written.push(svg);
        }
    }

    let manifest_path = dir.join(format!("{kind}_manifest.json"));
    let files = written
        .iter()
        .filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
        .collect();
    let manifest = Manifest {
        experiment: kind,
        config_hash: &result.config_hash,
        master_seed: result.config.seed,
        library_version: env!("CARGO_PKG_VERSION"),
        rows: result.rows.len(),
        files,
        config: result.config.canonical(),
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Parse(format!("manifest: {e}")))?;
    fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    written.push(manifest_path);
    Ok(written)
}

fn series_by<F>(summary: &[SummaryRow], key: F, x: fn(&SummaryRow) -> f64, y: fn(&SummaryRow) -> f64) -> Vec<Series>
where
    F: Fn(&SummaryRow) -> String,
{
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for s in summary {
        groups.entry(key(s)).or_default().push((x(s), y(s)));
    }
    groups
        .into_iter()
        .map(|(name, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series::line(name, points)
        })
        .collect()
}

fn chart_for(kind: ExperimentKind, rows: &[ResultRow], summary: &[SummaryRow]) -> Option<Chart> {
    match kind {
        ExperimentKind::RmseVsN => Some(Chart {
            title: "RMSE vs sample size".into(),
            x_label: "n".into(),
            y_label: "RMSE".into(),
            log_x: true,
            log_y: true,
            series: series_by(summary, |s| s.method.clone(), |s| s.n as f64, |s| s.rmse),
        }),
        ExperimentKind::KernelScatter => {
            let mut pairs: BTreeMap<(String, usize, usize), [Option<f64>; 2]> = BTreeMap::new();
            for r in rows {
                let slot = match r.method.as_str() {
                    "KIPS-naive" => 0,
                    "KIPS-optimal" => 1,
                    _ => continue,
                };
                pairs.entry((r.variant.clone(), r.n, r.replication)).or_default()[slot] = Some(r.estimate);
            }
            let points: Vec<(f64, f64)> = pairs
                .values()
                .filter_map(|p| Some((p[0]?, p[1]?)))
                .collect();
            let lo = points.iter().map(|p| p.0.min(p.1)).fold(f64::INFINITY, f64::min);
            let hi = points.iter().map(|p| p.0.max(p.1)).fold(f64::NEG_INFINITY, f64::max);
            let mut series = vec![Series::points("estimates", points)];
            if lo.is_finite() && hi.is_finite() {
                series.push(Series::line("diagonal", vec![(lo, lo), (hi, hi)]));
            }
            Some(Chart {
                title: "Naive vs variance-optimal kernel".into(),
                x_label: "KIPS-naive".into(),
                y_label: "KIPS-optimal".into(),
                log_x: false,
                log_y: false,
                series,
            })
        }
        ExperimentKind::Extrapolation => Some(Chart {
            title: "RMSE of constant policies".into(),
            x_label: "action".into(),
            y_label: "RMSE".into(),
            log_x: false,
            log_y: false,
            series: series_by(
                summary,
                |s| s.method.clone(),
                |s| s.target.parse().unwrap_or(f64::NAN),
                |s| s.rmse,
            ),
        }),
        ExperimentKind::PolicyGap => Some(Chart {
            title: "Mean relative gap to the oracle policy".into(),
            x_label: "method (DSL, NN, PTO)".into(),
            y_label: "relative gap".into(),
            log_x: false,
            log_y: false,
            series: series_by(
                summary,
                |s| format!("{} n={}", s.variant, s.n),
                |s| s.target_index as f64,
                |s| s.mean_relative_error,
            )
            .into_iter()
            .map(Series::into_points)
            .collect(),
        }),
        ExperimentKind::EstimatorBias => Some(Chart {
            title: "Bias of value estimates for learned policies".into(),
            x_label: "policy (DSL, NN, PTO)".into(),
            y_label: "mean estimate - truth".into(),
            log_x: false,
            log_y: false,
            series: series_by(
                summary,
                |s| format!("{} {}", s.method, s.variant),
                |s| s.target_index as f64,
                |s| s.bias,
            )
            .into_iter()
            .map(Series::into_points)
            .collect(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(rep: usize, method: &str, est: f64, truth: f64) -> ResultRow {
        ResultRow {
            experiment: "rmse-vs-n".into(),
            variant: "hx".into(),
            replication: rep,
            n: 100,
            method: method.into(),
            target: "+0.00".into(),
            target_index: 2,
            estimate: est,
            truth,
            error: est - truth,
            relative_error: (est - truth) / truth,
        }
    }

    #[test]
    fn summary_rmse_is_rms_of_errors() {
        let rows = vec![
            row(0, "IPS", 1.3, 1.0),
            row(1, "IPS", 0.6, 1.1),
            row(2, "IPS", 1.05, 0.9),
            row(0, "DM", 1.0, 1.0),
        ];
        let s = summarize(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].method, "DM");
        let ips = &s[1];
        let errs = [0.3f64, -0.5, 0.15];
        let want = (errs.iter().map(|e| e * e).sum::<f64>() / 3.0).sqrt();
        assert!((ips.rmse - want).abs() < 1e-12);
        assert_eq!(ips.count, 3);
    }
}
