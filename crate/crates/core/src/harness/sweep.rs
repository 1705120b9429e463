use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use super::run::{run_experiment_with, RunOptions, RunResult};
use crate::error::{Error, Result};

pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_SUMMARY: &str = "sweep_summary.json";

/// Scalar outcomes of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub method: Method,
    pub final_test_accuracy: f64,
    pub worst_domain_accuracy: f64,
    pub l1_trend_slope: Option<f64>,
}

impl From<&RunResult> for SeedRow {
    fn from(r: &RunResult) -> Self {
        Self {
            seed: r.seed,
            method: r.method,
            final_test_accuracy: r.final_test_accuracy,
            worst_domain_accuracy: r.worst_domain_accuracy,
            l1_trend_slope: r.l1_trend_slope,
        }
    }
}

/// Mean and sample variance (n - 1 denominator) of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub n: usize,
    pub mean: f64,
    /// Absent with fewer than two values.
    pub variance: Option<f64>,
}

impl MetricSummary {
    /// Welford accumulation, so repeated identical values give exactly zero variance.
    pub fn from_values(name: &str, values: &[f64]) -> Self {
        let (mut mean, mut m2) = (0.0, 0.0);
        for (k, &v) in values.iter().enumerate() {
            let d = v - mean;
            mean += d / (k + 1) as f64;
            m2 += d * (v - mean);
        }
        let n = values.len();
        Self {
            name: name.to_string(),
            n,
            mean: if n == 0 { f64::NAN } else { mean },
            variance: (n >= 2).then(|| m2 / (n - 1) as f64),
        }
    }

    pub fn std(&self) -> Option<f64> {
        self.variance.map(f64::sqrt)
    }
}

/// Per-method aggregate over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub method: Method,
    pub lineage_digest: String,
    pub rows: Vec<SeedRow>,
    pub metrics: Vec<MetricSummary>,
}

impl SweepSummary {
    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }
}

/// Summaries of the three scalar metrics. Runs without a slope are left out of
/// the slope summary.
pub fn summarize(rows: &[SeedRow]) -> Vec<MetricSummary> {
    let col = |f: fn(&SeedRow) -> Option<f64>| rows.iter().filter_map(f).collect::<Vec<_>>();
    let mut out = vec![
        MetricSummary::from_values("final_test_accuracy", &col(|r| Some(r.final_test_accuracy))),
        MetricSummary::from_values("worst_domain_accuracy", &col(|r| Some(r.worst_domain_accuracy))),
    ];
    let slopes = col(|r| r.l1_trend_slope);
    if !slopes.is_empty() {
        out.push(MetricSummary::from_values("l1_trend_slope", &slopes));
    }
    out
}

/// Runs `config` once per seed and summarises.
pub fn seed_sweep(
    config: &ExperimentConfig,
    seeds: &[u64],
    options: RunOptions,
) -> Result<(SweepSummary, Vec<RunResult>)> {
    if seeds.len() < 2 {
        return Err(Error::Usage("a seed sweep needs at least two seeds".into()));
    }
    let results = seeds
        .iter()
        .map(|&s| run_experiment_with(&config.clone().with_seed(s), options, None))
        .collect::<Result<Vec<_>>>()?;
    Ok((summary_of(config, &results), results))
}

fn summary_of(config: &ExperimentConfig, results: &[RunResult]) -> SweepSummary {
    let rows: Vec<SeedRow> = results.iter().map(SeedRow::from).collect();
    SweepSummary {
        method: config.method,
        lineage_digest: config.lineage_digest(),
        metrics: summarize(&rows),
        rows,
    }
}

/// Paired difference of worst-domain accuracy of `method` minus `baseline`,
/// matched by seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub method: Method,
    pub baseline: Method,
    pub diff: MetricSummary,
}

pub fn paired_comparisons(summaries: &[SweepSummary], baseline: Method) -> Vec<PairedComparison> {
    let Some(base) = summaries.iter().find(|s| s.method == baseline) else {
        return Vec::new();
    };
    summaries
        .iter()
        .filter(|s| s.method != baseline)
        .filter_map(|s| {
            let diffs: Vec<f64> = s
                .rows
                .iter()
                .filter_map(|r| {
                    base.rows
                        .iter()
                        .find(|b| b.seed == r.seed)
                        .map(|b| r.worst_domain_accuracy - b.worst_domain_accuracy)
                })
                .collect();
            (!diffs.is_empty()).then(|| PairedComparison {
                method: s.method,
                baseline,
                diff: MetricSummary::from_values("worst_domain_accuracy_diff", &diffs),
            })
        })
        .collect()
}

/// File name of one run's JSONL inside a sweep directory.
pub fn run_file_name(method: Method, seed: u64) -> String {
    format!("{}_seed{seed}.jsonl", method.name())
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub summaries: Vec<SweepSummary>,
    pub comparisons: Vec<PairedComparison>,
    pub files: Vec<PathBuf>,
}

/// Runs every `(method, seed)` pair, writing one JSONL per run, `sweep.csv` and
/// `sweep_summary.json` into `out_dir`.
pub fn run_sweep(
    config: &ExperimentConfig,
    seeds: &[u64],
    methods: &[Method],
    out_dir: &Path,
    options: RunOptions,
) -> Result<SweepOutcome> {
    if seeds.is_empty() || methods.is_empty() {
        return Err(Error::Usage("a sweep needs at least one seed and one method".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let mut summaries = Vec::new();
    for &method in methods {
        let base = config.clone().with_method(method);
        base.validate()?;
        let mut results = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = base.clone().with_seed(seed);
            let path = out_dir.join(run_file_name(method, seed));
            let mut w = BufWriter::new(fs::File::create(&path)?);
            results.push(run_experiment_with(&cfg, options, Some(&mut w))?);
            std::io::Write::flush(&mut w)?;
            files.push(path);
        }
        summaries.push(summary_of(&base, &results));
    }

    let csv_path = out_dir.join(SWEEP_CSV);
    write_rows_csv(&csv_path, summaries.iter().flat_map(|s| &s.rows))?;
    files.push(csv_path);

    let comparisons = paired_comparisons(&summaries, Method::Fedavg);
    let summary_path = out_dir.join(SWEEP_SUMMARY);
    let mut text = serde_json::to_string_pretty(&serde_json::json!({
        "lineage_digest": config.lineage_digest(),
        "seeds": seeds,
        "summaries": summaries,
        "comparisons": comparisons,
    }))?;
    text.push('\n');
    fs::write(&summary_path, text)?;
    files.push(summary_path);

    Ok(SweepOutcome {
        summaries,
        comparisons,
        files,
    })
}

/// `seed,method,final_test_accuracy,worst_domain_accuracy,l1_trend_slope`
pub fn write_rows_csv<'a>(path: &Path, rows: impl IntoIterator<Item = &'a SeedRow>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "seed",
        "method",
        "final_test_accuracy",
        "worst_domain_accuracy",
        "l1_trend_slope",
    ])?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.method.name().to_string(),
            r.final_test_accuracy.to_string(),
            r.worst_domain_accuracy.to_string(),
            r.l1_trend_slope.map(|s| s.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Plain-text table: mean ± sample std per method, then paired differences.
pub fn format_table(summaries: &[SweepSummary], comparisons: &[PairedComparison]) -> String {
    let cell = |m: Option<&MetricSummary>| match m {
        Some(m) => match m.std() {
            Some(sd) => format!("{:.4} ± {:.4}", m.mean, sd),
            None => format!("{:.4}", m.mean),
        },
        None => "-".to_string(),
    };
    let mut out = format!(
        "{:<15} {:>5}  {:>17}  {:>17}  {:>17}\n",
        "method", "runs", "final_acc", "worst_domain_acc", "l1_slope"
    );
    for s in summaries {
        out.push_str(&format!(
            "{:<15} {:>5}  {:>17}  {:>17}  {:>17}\n",
            s.method.name(),
            s.rows.len(),
            cell(s.metric("final_test_accuracy")),
            cell(s.metric("worst_domain_accuracy")),
            cell(s.metric("l1_trend_slope")),
        ));
    }
    for c in comparisons {
        out.push_str(&format!(
            "{} - {} worst_domain_acc: {}\n",
            c.method.name(),
            c.baseline.name(),
            cell(Some(&c.diff))
        ));
    }
    out
}
