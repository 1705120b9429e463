use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use crate::client::{ClientState, LocalPlan, RoundUpload};
use crate::engine::{forward_unmasked, init_params, MlpSpec, ParamVector};
use crate::envgen::{leave_one_domain_out, Dataset, EnvId, EnvSpec};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::server::{
    aggregate_params, aggregate_sci_gradients, build_report, fedavg_weights, AggregationReport, GlobalState,
};

/// Seed-derivation tags.
const TAG_ENV: u64 = 1;
const TAG_INIT: u64 = 2;
const TAG_CLIENT: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub global_test_accuracy: f64,
    pub per_train_env_accuracy: Vec<f64>,
    pub mean_mask_l1: f64,
    pub aggregation: Option<AggregationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config_digest: String,
    pub lineage_digest: String,
    pub method: Method,
    pub seed: u64,
    /// Per-round metrics; written as separate JSONL records, not inside the result record.
    #[serde(skip_serializing, default)]
    pub rounds: Vec<RoundMetrics>,
    pub final_test_accuracy: f64,
    /// Accuracy on the least favourable held-out environment.
    pub worst_domain_accuracy: f64,
    /// Absent when fewer than five rounds were run.
    pub l1_trend_slope: Option<f64>,
}

/// Execution knobs that do not change results.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Size of the worker pool for client training; `0` means rayon's default.
    pub workers: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { workers: 1 }
    }
}

/// Argmax accuracy of the unmasked global model. Ties resolve to the lowest class index.
pub fn evaluate(spec: &MlpSpec, params: &ParamVector, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Usage("evaluation on an empty dataset".into()));
    }
    let logits = forward_unmasked(spec, params, &dataset.batch())?;
    let correct = (0..logits.rows)
        .filter(|&i| argmax(logits.row(i)) == dataset.labels[i])
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

/// Ordinary least-squares slope of `series` against its 1-based index.
pub fn ols_slope(series: &[f64]) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::Usage("a slope needs at least two points".into()));
    }
    let n = series.len() as f64;
    let mean_x = (n + 1.0) / 2.0;
    let mean_y = series.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in series.iter().enumerate() {
        let dx = (i + 1) as f64 - mean_x;
        sxy += dx * (y - mean_y);
        sxx += dx * dx;
    }
    Ok(sxy / sxx)
}

/// Slope of mean mask L1 norm against round. Needs at least five logged rounds.
pub fn l1_trend(run: &RunResult) -> Result<f64> {
    if run.rounds.len() < 5 {
        return Err(Error::Usage(format!(
            "l1 trend needs at least 5 rounds, run has {}",
            run.rounds.len()
        )));
    }
    let series: Vec<f64> = run.rounds.iter().map(|r| r.mean_mask_l1).collect();
    ols_slope(&series)
}

/// Environment definitions with seeds bound to the run seed.
pub fn effective_env_specs(config: &ExperimentConfig) -> Vec<EnvSpec> {
    config
        .env_specs
        .iter()
        .map(|e| EnvSpec {
            seed: derive_seed(config.seed, &[TAG_ENV, e.seed]),
            ..e.clone()
        })
        .collect()
}

/// Initial global parameters for the run.
pub fn initial_params(config: &ExperimentConfig) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_INIT]));
    init_params(&config.model, &mut rng)
}

/// Per-client random seed (minibatch order, penalty subsample).
pub fn client_seed(config: &ExperimentConfig, client_id: usize) -> u64 {
    derive_seed(config.seed, &[TAG_CLIENT, client_id as u64])
}

/// Training datasets (one per client, ascending env order) and the held-out test set.
pub fn build_domains(config: &ExperimentConfig) -> Result<(Vec<Dataset>, Dataset)> {
    leave_one_domain_out(&effective_env_specs(config), config.holdout)
}

/// Stateful runner; [`run_experiment`] drives it to completion.
pub struct Simulation {
    config: ExperimentConfig,
    digest: String,
    lineage: String,
    clients: Vec<ClientState>,
    test: Dataset,
    global: GlobalState,
    pool: rayon::ThreadPool,
}

impl Simulation {
    pub fn new(config: ExperimentConfig, options: RunOptions) -> Result<Self> {
        config.validate()?;
        let (train, test) = build_domains(&config)?;
        let hyper = config.client_hyper();
        let clients = train
            .into_iter()
            .enumerate()
            .map(|(id, ds)| ClientState::new(id, config.model.clone(), ds, hyper, client_seed(&config, id)))
            .collect::<Result<Vec<_>>>()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
        Ok(Self {
            digest: config.digest(),
            lineage: config.lineage_digest(),
            global: GlobalState::new(initial_params(&config), config.eta),
            config,
            clients,
            test,
            pool,
        })
    }

    pub fn global(&self) -> &GlobalState {
        &self.global
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn test_env(&self) -> EnvId {
        self.test.env_id
    }

    /// Runs one synchronous round and returns its metrics.
    pub fn step(&mut self) -> Result<RoundMetrics> {
        let round = self.global.round + 1;
        let plan = LocalPlan {
            round,
            epochs: self.config.local_epochs,
            batch_size: self.config.batch_size,
        };
        let global_params = &self.global.params;
        let grad_g = self.global.sci_grad_global.as_deref();
        let uploads: Vec<RoundUpload> = self.pool.install(|| {
            self.clients
                .par_iter_mut()
                .map(|c| c.local_train(global_params, grad_g, &plan))
                .collect::<Result<Vec<_>>>()
        })?;

        let counts: Vec<usize> = uploads.iter().map(|u| u.n_samples).collect();
        let p = fedavg_weights(&counts)?;
        let report = build_report(round, &uploads, self.config.eta)?;
        let coefficients = match self.config.method {
            Method::FedcdSciRea => report.c.clone(),
            _ => p.clone(),
        };
        let params = aggregate_params(&uploads, &coefficients)?;
        let grad_g = aggregate_sci_gradients(&uploads, &p)?;
        self.global.params = params;
        self.global.sci_grad_global = Some(grad_g);
        self.global.round = round;

        let spec = &self.config.model;
        let global_test_accuracy = evaluate(spec, &self.global.params, &self.test)?;
        let per_train_env_accuracy = self
            .clients
            .iter()
            .map(|c| evaluate(spec, &self.global.params, &c.dataset))
            .collect::<Result<Vec<_>>>()?;
        let mean_mask_l1 = uploads.iter().map(|u| u.mask_l1).sum::<f64>() / uploads.len() as f64;
        Ok(RoundMetrics {
            round,
            global_test_accuracy,
            per_train_env_accuracy,
            mean_mask_l1,
            aggregation: self.config.method.uses_mask().then_some(report),
        })
    }

    fn finish(&self, rounds: Vec<RoundMetrics>) -> RunResult {
        let final_test_accuracy = rounds.last().map_or(0.0, |r| r.global_test_accuracy);
        let mut result = RunResult {
            config_digest: self.digest.clone(),
            lineage_digest: self.lineage.clone(),
            method: self.config.method,
            seed: self.config.seed,
            rounds,
            final_test_accuracy,
            worst_domain_accuracy: final_test_accuracy,
            l1_trend_slope: None,
        };
        result.l1_trend_slope = l1_trend(&result).ok();
        result
    }
}

/// Runs the full experiment.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunResult> {
    run_experiment_with(config, RunOptions::default(), None)
}

/// Runs the full experiment, optionally streaming JSONL records to `sink`.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    options: RunOptions,
    mut sink: Option<&mut dyn Write>,
) -> Result<RunResult> {
    let mut sim = Simulation::new(config.clone(), options)?;
    let mut rounds = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        let m = sim.step()?;
        if let Some(w) = sink.as_deref_mut() {
            super::metrics::write_round(w, &sim.digest, &sim.lineage, config, &m)?;
        }
        rounds.push(m);
    }
    let result = sim.finish(rounds);
    if let Some(w) = sink {
        super::metrics::write_result(w, &result)?;
    }
    Ok(result)
}

/// Runs the experiment once per environment, holding each out in turn.
/// Worst-domain accuracy of every returned result is the minimum across all
/// held-out environments.
pub fn run_rotation(config: &ExperimentConfig, options: RunOptions) -> Result<Vec<RunResult>> {
    let mut results = config
        .env_specs
        .iter()
        .map(|e| {
            let mut c = config.clone();
            c.holdout = e.env_id;
            run_experiment_with(&c, options, None)
        })
        .collect::<Result<Vec<_>>>()?;
    let worst = results
        .iter()
        .map(|r| r.final_test_accuracy)
        .fold(f64::INFINITY, f64::min);
    for r in &mut results {
        r.worst_domain_accuracy = worst;
    }
    Ok(results)
}
