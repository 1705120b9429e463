//! Reads run JSONL files back and produces per-round CSVs and a method summary.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use super::config::Method;
use super::metrics::{Record, RoundRecord};
use super::run::RunResult;
use super::sweep::{summarize, SeedRow, SweepSummary};
use crate::error::{Error, Result};

pub const L1_CSV: &str = "l1_by_round.csv";
pub const ACCURACY_CSV: &str = "accuracy_by_round.csv";
pub const SUMMARY_TXT: &str = "report.txt";

/// One run as read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub path: PathBuf,
    pub rounds: Vec<RoundRecord>,
    pub result: RunResult,
}

pub fn load_run(path: &Path) -> Result<LoadedRun> {
    let file = fs::File::open(path)?;
    let mut rounds = Vec::new();
    let mut result = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let parse_err = |detail: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail,
        };
        if line.trim().is_empty() {
            continue;
        }
        if result.is_some() {
            return Err(parse_err("record after the result record".into()));
        }
        match serde_json::from_str::<Record>(&line).map_err(|e| parse_err(e.to_string()))? {
            Record::Round(r) => rounds.push(r),
            Record::Result(r) => result = Some(r),
        }
    }
    let mut result = result.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: rounds.len() + 1,
        detail: "missing result record".into(),
    })?;
    result.rounds = rounds.iter().map(|r| r.metrics.clone()).collect();
    Ok(LoadedRun {
        path: path.to_path_buf(),
        rounds,
        result,
    })
}

/// Every `*.jsonl` in `dir`, in file-name order.
pub fn load_runs(dir: &Path) -> Result<Vec<LoadedRun>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_run(p)).collect()
}

#[derive(Debug, Clone)]
pub struct Report {
    pub runs: Vec<LoadedRun>,
    pub summaries: Vec<SweepSummary>,
    pub text: String,
}

/// Builds the report for the runs in `dir` and writes the CSVs and text summary
/// there. Refuses runs from different config lineages unless `allow_mixed`.
pub fn report(dir: &Path, allow_mixed: bool) -> Result<Report> {
    let runs = load_runs(dir)?;
    if runs.is_empty() {
        return Err(Error::Usage(format!("no run files (*.jsonl) in {}", dir.display())));
    }
    let lineages: Vec<&str> = {
        let mut v: Vec<&str> = runs.iter().map(|r| r.result.lineage_digest.as_str()).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    if lineages.len() > 1 && !allow_mixed {
        return Err(Error::Usage(format!(
            "runs come from {} different config lineages ({}); pass --allow-mixed to combine them",
            lineages.len(),
            lineages.join(", ")
        )));
    }

    let mut by_method: BTreeMap<&'static str, (Method, Vec<SeedRow>)> = BTreeMap::new();
    for run in &runs {
        by_method
            .entry(run.result.method.name())
            .or_insert_with(|| (run.result.method, Vec::new()))
            .1
            .push(SeedRow::from(&run.result));
    }
    let summaries: Vec<SweepSummary> = Method::ALL
        .iter()
        .filter_map(|m| by_method.get(m.name()))
        .map(|(method, rows)| SweepSummary {
            method: *method,
            lineage_digest: lineages.join("+"),
            metrics: summarize(rows),
            rows: rows.clone(),
        })
        .collect();

    write_round_csvs(dir, &runs)?;
    let text = summary_text(&runs, &summaries);
    fs::write(dir.join(SUMMARY_TXT), &text)?;
    Ok(Report { runs, summaries, text })
}

fn run_label(run: &LoadedRun) -> String {
    run.path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn write_round_csvs(dir: &Path, runs: &[LoadedRun]) -> Result<()> {
    let mut l1 = csv::Writer::from_path(dir.join(L1_CSV))?;
    l1.write_record(["run", "method", "seed", "round", "mean_mask_l1"])?;
    let mut acc = csv::Writer::from_path(dir.join(ACCURACY_CSV))?;
    let train_envs = runs
        .iter()
        .flat_map(|r| r.rounds.iter().map(|m| m.metrics.per_train_env_accuracy.len()))
        .max()
        .unwrap_or(0);
    let mut header = vec![
        "run".to_string(),
        "method".into(),
        "seed".into(),
        "round".into(),
        "global_test_accuracy".into(),
    ];
    header.extend((0..train_envs).map(|i| format!("train_env{i}_accuracy")));
    acc.write_record(&header)?;
    for run in runs {
        let label = run_label(run);
        for r in &run.rounds {
            let m = &r.metrics;
            l1.write_record([
                label.clone(),
                r.method.name().to_string(),
                r.seed.to_string(),
                m.round.to_string(),
                m.mean_mask_l1.to_string(),
            ])?;
            let mut rec = vec![
                label.clone(),
                r.method.name().to_string(),
                r.seed.to_string(),
                m.round.to_string(),
                m.global_test_accuracy.to_string(),
            ];
            rec.extend(m.per_train_env_accuracy.iter().map(|a| a.to_string()));
            rec.resize(header.len(), String::new());
            acc.write_record(&rec)?;
        }
    }
    l1.flush()?;
    acc.flush()?;
    Ok(())
}

fn summary_text(runs: &[LoadedRun], summaries: &[SweepSummary]) -> String {
    let mut out = String::new();
    if let [only] = runs {
        let r = &only.result;
        out.push_str(&format!(
            "run {} (method {}, seed {}, digest {})\n  rounds: {}\n  final_test_accuracy: {}\n  worst_domain_accuracy: {}\n  l1_trend_slope: {}\n",
            run_label(only),
            r.method,
            r.seed,
            r.config_digest,
            r.rounds.len(),
            r.final_test_accuracy,
            r.worst_domain_accuracy,
            r.l1_trend_slope.map_or("-".to_string(), |s| s.to_string()),
        ));
        return out;
    }
    out.push_str(&format!("{} runs\n", runs.len()));
    let comparisons = super::sweep::paired_comparisons(summaries, Method::Fedavg);
    out.push_str(&super::sweep::format_table(summaries, &comparisons));
    out
}
