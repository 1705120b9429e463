//! JSONL records written per run: one `round` record per round, then one `result`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use super::run::{RoundMetrics, RunResult};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub config_digest: String,
    pub lineage_digest: String,
    pub method: Method,
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: RoundMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Round(RoundRecord),
    Result(RunResult),
}

fn write_line<W: Write + ?Sized>(w: &mut W, record: &Record) -> Result<()> {
    serde_json::to_writer(&mut *w, record)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub(crate) fn write_round<W: Write + ?Sized>(
    w: &mut W,
    digest: &str,
    lineage: &str,
    config: &ExperimentConfig,
    metrics: &RoundMetrics,
) -> Result<()> {
    write_line(
        w,
        &Record::Round(RoundRecord {
            config_digest: digest.to_string(),
            lineage_digest: lineage.to_string(),
            method: config.method,
            seed: config.seed,
            metrics: metrics.clone(),
        }),
    )
}

pub(crate) fn write_result<W: Write + ?Sized>(w: &mut W, result: &RunResult) -> Result<()> {
    write_line(w, &Record::Result(result.clone()))
}

/// Full JSONL text of a finished run.
pub fn to_jsonl(config: &ExperimentConfig, result: &RunResult) -> Result<String> {
    let mut buf = Vec::new();
    for m in &result.rounds {
        write_round(&mut buf, &result.config_digest, &result.lineage_digest, config, m)?;
    }
    write_result(&mut buf, result)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}
