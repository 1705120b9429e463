//! Synthetic multi-environment binary classification data.
//!
//! Each sample has three feature blocks:
//!
//! * an invariant block keyed to the true class, identical in every environment;
//! * a spurious block keyed to the observed (possibly flipped) label, agreeing with
//!   it at an environment-specific rate `rho`;
//! * a pure-noise block.
//!
//! With label noise, the spurious block is more predictive than the invariant one
//! whenever `rho > 1 - label_noise`, so plain risk minimisation prefers the shortcut
//! and fails on an environment where the correlation is reversed.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`) seeded with `seed_from_u64`; normals
//! from `rand_distr::StandardNormal`. Both are value-stable across platforms, so a
//! given [`EnvSpec`] always yields the same bytes.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::Batch;
use crate::error::{Error, Result};

pub type EnvId = u32;

fn default_label_noise() -> f64 {
    0.25
}
fn default_inv_strength() -> f64 {
    1.0
}
fn default_sp_strength() -> f64 {
    1.5
}

/// Definition of one environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub env_id: EnvId,
    pub n_samples: usize,
    pub inv_dim: usize,
    pub sp_dim: usize,
    pub noise_dim: usize,
    /// Probability that the spurious block points at the observed label.
    pub rho: f64,
    #[serde(default = "default_label_noise")]
    pub label_noise: f64,
    #[serde(default = "default_inv_strength")]
    pub inv_strength: f64,
    #[serde(default = "default_sp_strength")]
    pub sp_strength: f64,
    pub seed: u64,
}

impl EnvSpec {
    pub fn new(env_id: EnvId, n_samples: usize, rho: f64, seed: u64) -> Self {
        Self {
            env_id,
            n_samples,
            inv_dim: 5,
            sp_dim: 5,
            noise_dim: 5,
            rho,
            label_noise: default_label_noise(),
            inv_strength: default_inv_strength(),
            sp_strength: default_sp_strength(),
            seed,
        }
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout {
            inv_dim: self.inv_dim,
            sp_dim: self.sp_dim,
            noise_dim: self.noise_dim,
        }
    }

    pub fn total_dim(&self) -> usize {
        self.layout().total()
    }

    /// Every violated constraint, prefixed with `path`.
    pub fn violations(&self, path: &str) -> Vec<String> {
        let mut out = Vec::new();
        if !(0.0..=1.0).contains(&self.rho) {
            out.push(format!("{path}.rho = {} must lie in [0, 1]", self.rho));
        }
        if !(0.0..=0.5).contains(&self.label_noise) {
            out.push(format!(
                "{path}.label_noise = {} must lie in [0, 0.5]",
                self.label_noise
            ));
        }
        if self.n_samples == 0 {
            out.push(format!("{path}.n_samples must be >= 1"));
        }
        if self.total_dim() == 0 {
            out.push(format!("{path}: feature dimension must be >= 1"));
        }
        if !self.inv_strength.is_finite() || !self.sp_strength.is_finite() {
            out.push(format!("{path}: signal strengths must be finite"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations(&format!("env {}", self.env_id));
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

/// Widths of the invariant, spurious and noise blocks, in that column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub inv_dim: usize,
    pub sp_dim: usize,
    pub noise_dim: usize,
}

impl FeatureLayout {
    pub fn total(&self) -> usize {
        self.inv_dim + self.sp_dim + self.noise_dim
    }

    pub fn invariant(&self) -> std::ops::Range<usize> {
        0..self.inv_dim
    }

    pub fn spurious(&self) -> std::ops::Range<usize> {
        self.inv_dim..self.inv_dim + self.sp_dim
    }
}

/// Sampled data of one environment. Labels are `0` or `1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub env_id: EnvId,
    pub layout: FeatureLayout,
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.layout.total()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.inputs[i * d..(i + 1) * d]
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch::new(&self.inputs, self.dim(), &self.labels)
            .expect("dataset rows and labels are consistent by construction")
    }

    /// Writes `f0..f{D-1},label,env_id` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        header.push("env_id".into());
        w.write_record(&header)?;
        let env = self.env_id.to_string();
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            rec.push(env.clone());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Reads a file produced by [`Dataset::write_csv`]. The block layout is not part
    /// of the file and must be supplied; it has to account for every feature column.
    pub fn read_csv<R: Read>(reader: R, layout: FeatureLayout) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        let dim = layout.total();
        let expected: Vec<String> = (0..dim)
            .map(|j| format!("f{j}"))
            .chain(["label".to_string(), "env_id".to_string()])
            .collect();
        if headers.iter().ne(expected.iter().map(String::as_str)) {
            return Err(Error::Config(format!(
                "csv header does not match a {dim}-feature dataset"
            )));
        }
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        let mut env_id = None;
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |detail: String| Error::Config(format!("csv row {}: {detail}", line + 2));
            for j in 0..dim {
                let v: f64 = rec[j].parse().map_err(|e| bad(format!("feature f{j}: {e}")))?;
                inputs.push(v);
            }
            let label: usize = rec[dim].parse().map_err(|e| bad(format!("label: {e}")))?;
            if label > 1 {
                return Err(bad(format!("label {label} is not binary")));
            }
            labels.push(label);
            let id: EnvId = rec[dim + 1].parse().map_err(|e| bad(format!("env_id: {e}")))?;
            match env_id {
                None => env_id = Some(id),
                Some(prev) if prev != id => {
                    return Err(bad(format!("mixed env ids {prev} and {id}")));
                }
                _ => {}
            }
        }
        Ok(Dataset {
            env_id: env_id.unwrap_or(0),
            layout,
            inputs,
            labels,
        })
    }

    pub fn load_csv(path: &Path, layout: FeatureLayout) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file), layout)
    }
}

#[inline]
fn signed(label: usize) -> f64 {
    if label == 1 {
        1.0
    } else {
        -1.0
    }
}

/// Samples one environment. Pure function of `spec`.
pub fn generate_environment(spec: &EnvSpec) -> Result<Dataset> {
    spec.validate()?;
    let layout = spec.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut inputs = Vec::with_capacity(spec.n_samples * layout.total());
    let mut labels = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let truth = usize::from(rng.gen_bool(0.5));
        let flipped = rng.gen::<f64>() < spec.label_noise;
        let observed = if flipped { 1 - truth } else { truth };
        let agrees = rng.gen::<f64>() < spec.rho;
        let sp_key = if agrees { observed } else { 1 - observed };

        let inv_mean = signed(truth) * spec.inv_strength;
        for _ in 0..layout.inv_dim {
            inputs.push(inv_mean + rng.sample::<f64, _>(StandardNormal));
        }
        let sp_mean = signed(sp_key) * spec.sp_strength;
        for _ in 0..layout.sp_dim {
            inputs.push(sp_mean + rng.sample::<f64, _>(StandardNormal));
        }
        for _ in 0..layout.noise_dim {
            inputs.push(rng.sample::<f64, _>(StandardNormal));
        }
        labels.push(observed);
    }
    Ok(Dataset {
        env_id: spec.env_id,
        layout,
        inputs,
        labels,
    })
}

/// Generates every environment, returning the held-out one as the test domain and
/// the rest (in their listed order, one per client) as training domains.
pub fn leave_one_domain_out(specs: &[EnvSpec], holdout: EnvId) -> Result<(Vec<Dataset>, Dataset)> {
    if specs.len() < 3 {
        return Err(Error::Config(format!(
            "leave-one-domain-out needs at least 3 environments, got {}",
            specs.len()
        )));
    }
    for (i, a) in specs.iter().enumerate() {
        if specs[..i].iter().any(|b| b.env_id == a.env_id) {
            return Err(Error::Config(format!("duplicate env_id {}", a.env_id)));
        }
    }
    if !specs.iter().any(|s| s.env_id == holdout) {
        return Err(Error::Config(format!(
            "holdout env_id {holdout} not among environments"
        )));
    }
    let mut train = Vec::with_capacity(specs.len() - 1);
    let mut test = None;
    for spec in specs {
        let ds = generate_environment(spec)?;
        if spec.env_id == holdout {
            test = Some(ds);
        } else {
            train.push(ds);
        }
    }
    Ok((train, test.expect("holdout presence checked above")))
}

/// Fraction of samples whose spurious-block mean has the sign of the label
/// (positive for class 1). `NaN` for an empty dataset.
pub fn spurious_agreement(ds: &Dataset) -> f64 {
    if ds.is_empty() {
        return f64::NAN;
    }
    let cols = ds.layout.spurious();
    let agree = (0..ds.len())
        .filter(|&i| {
            let s: f64 = ds.row(i)[cols.clone()].iter().sum();
            (s > 0.0) == (ds.labels[i] == 1)
        })
        .count();
    agree as f64 / ds.len() as f64
}
