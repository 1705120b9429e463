use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::client::ClientHyper;
use crate::engine::{Activation, MlpSpec};
use crate::envgen::{EnvId, EnvSpec};
use crate::error::{Error, Result};

/// Training/aggregation recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Sample-weighted averaging, no mask.
    Fedavg,
    /// FedAvg plus a proximal term in local training.
    Fedprox,
    /// Alignment-trained masks, FedAvg weights.
    FedcdSci,
    /// Alignment-trained masks, risk-equalising softmax coefficients.
    FedcdSciRea,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Fedavg, Method::Fedprox, Method::FedcdSci, Method::FedcdSciRea];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fedavg => "fedavg",
            Method::Fedprox => "fedprox",
            Method::FedcdSci => "fedcd_sci",
            Method::FedcdSciRea => "fedcd_sci_rea",
        }
    }

    pub fn uses_mask(self) -> bool {
        matches!(self, Method::FedcdSci | Method::FedcdSciRea)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Full description of one experiment. Serialised as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env_specs: Vec<EnvSpec>,
    /// Environment used as the unseen test domain.
    pub holdout: EnvId,
    pub model: MlpSpec,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr_theta: f64,
    pub lr_delta: f64,
    pub lambda: f64,
    pub eta: f64,
    /// Only used by `fedprox`.
    pub mu_prox: f64,
    pub method: Method,
    pub seed: u64,
    /// Ablation: let the alignment penalty update the model parameters too.
    #[serde(default)]
    pub theta_coupling: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::benchmark()
    }
}

impl ExperimentConfig {
    /// Four environments whose spurious agreement is 0.95, 0.90, 0.85 and 0.10;
    /// the last is held out.
    pub fn benchmark() -> Self {
        let rhos = [0.95, 0.90, 0.85, 0.10];
        let env_specs: Vec<EnvSpec> = rhos
            .iter()
            .enumerate()
            .map(|(i, &rho)| EnvSpec::new(i as EnvId, 2000, rho, i as u64))
            .collect();
        let input_dim = env_specs[0].total_dim();
        Self {
            env_specs,
            holdout: 3,
            model: MlpSpec::new(input_dim, vec![32, 32], 2).with_activation(Activation::Relu),
            rounds: 30,
            local_epochs: 2,
            batch_size: 32,
            lr_theta: 0.05,
            lr_delta: 0.1,
            lambda: 0.9,
            eta: 0.5,
            mu_prox: 0.01,
            method: Method::FedcdSciRea,
            seed: 0,
            theta_coupling: false,
        }
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Client settings implied by the method.
    pub fn client_hyper(&self) -> ClientHyper {
        ClientHyper {
            lr_theta: self.lr_theta,
            lr_delta: self.lr_delta,
            lambda: if self.method.uses_mask() { self.lambda } else { 0.0 },
            mu_prox: if self.method == Method::Fedprox {
                self.mu_prox
            } else {
                0.0
            },
            train_mask: self.method.uses_mask(),
            theta_coupling: self.method.uses_mask() && self.theta_coupling,
        }
    }

    /// All schema-level and cross-field violations; empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.rounds == 0 {
            out.push("rounds must be >= 1".into());
        }
        if self.local_epochs == 0 {
            out.push("local_epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            out.push("batch_size must be >= 1".into());
        }
        if !(self.lr_theta > 0.0) {
            out.push(format!("lr_theta = {} must be > 0", self.lr_theta));
        }
        if !(self.lr_delta > 0.0) {
            out.push(format!("lr_delta = {} must be > 0", self.lr_delta));
        }
        if !(self.lambda >= 0.0) {
            out.push(format!("lambda = {} must be >= 0", self.lambda));
        }
        if !(self.eta >= 0.0) {
            out.push(format!("eta = {} must be >= 0", self.eta));
        }
        if !(self.mu_prox >= 0.0) {
            out.push(format!("mu_prox = {} must be >= 0", self.mu_prox));
        }
        if self.method.uses_mask() && !(self.lambda > 0.0) {
            out.push(format!("method {} requires lambda > 0", self.method));
        }
        if self.method == Method::Fedprox && !(self.mu_prox > 0.0) {
            out.push("method fedprox requires mu_prox > 0".into());
        }
        if let Err(e) = self.model.validate() {
            out.push(format!(
                "model: {}",
                e.to_string().trim_start_matches("configuration error: ")
            ));
        }
        if self.model.output_dim != 2 {
            out.push(format!(
                "model.output_dim = {} but the environments are binary",
                self.model.output_dim
            ));
        }
        if self.env_specs.len() < 3 {
            out.push(format!(
                "env_specs needs at least 3 environments, got {}",
                self.env_specs.len()
            ));
        }
        for (i, env) in self.env_specs.iter().enumerate() {
            let path = format!("env_specs[{i}]");
            out.extend(env.violations(&path));
            if env.total_dim() != self.model.input_dim {
                out.push(format!(
                    "{path}: feature dimension {} does not match model.input_dim {}",
                    env.total_dim(),
                    self.model.input_dim
                ));
            }
            if self.env_specs[..i].iter().any(|e| e.env_id == env.env_id) {
                out.push(format!("{path}: duplicate env_id {}", env.env_id));
            }
        }
        if !self.env_specs.iter().any(|e| e.env_id == self.holdout) {
            out.push(format!("holdout {} is not an env_id in env_specs", self.holdout));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    /// Canonical JSON: keys sorted, no whitespace.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config is always representable as JSON");
        // serde_json's default map is ordered by key.
        value.to_string()
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.canonical_json().as_bytes());
        hex::encode(&hash[..8])
    }

    /// Digest with `seed` and `method` neutralised: runs that differ only in those
    /// share a lineage and may be compared.
    pub fn lineage_digest(&self) -> String {
        self.clone().with_seed(0).with_method(Method::Fedavg).digest()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    /// Applies `key=value` overrides with dotted paths (`model.hidden_dims`,
    /// `env_specs.0.rho`). Values are parsed as JSON, falling back to a bare
    /// string. Later overrides win. Unknown keys are rejected.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{raw}` is not KEY=VALUE")))?;
            let parsed: Value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
            let slot = lookup_mut(&mut root, key)?;
            *slot = parsed;
        }
        serde_json::from_value(root).map_err(|e| Error::Config(format!("override produced an invalid config: {e}")))
    }
}

fn lookup_mut<'a>(root: &'a mut Value, key: &str) -> Result<&'a mut Value> {
    let mut cur = root;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    Ok(cur)
}
