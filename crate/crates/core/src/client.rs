//! Local training of one federated client.
//!
//! Parameters are trained on the masked task loss (plus an optional proximal
//! term). The mask is trained once per epoch on the task loss plus the
//! gradient-alignment penalty `lambda * |grad_e - grad_g|^2`, where `grad_e` is
//! the client's mask gradient over its local data and `grad_g` the server's
//! weighted average from the previous round. Descending the penalty needs
//! `2 H (grad_e - grad_g)`, with `H` the mask Hessian, obtained by
//! [`hvp_mask`](crate::engine::hvp_mask).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{
    default_hvp_eps, grad_wrt_mask, hvp_mask, loss, loss_and_grads, mixed_theta_mask, Batch, MaskVector, MlpSpec,
    OwnedBatch, ParamVector,
};
use crate::envgen::Dataset;
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Largest dataset over which the mask gradient is taken exactly; bigger
/// datasets use a fixed seeded subsample of this size.
pub const PENALTY_SAMPLE_CAP: usize = 4096;

/// `|grad_e - grad_g|^2`.
pub fn sci_penalty(grad_e: &[f64], grad_g: &[f64]) -> Result<f64> {
    if grad_e.len() != grad_g.len() {
        return Err(Error::Protocol(format!(
            "client gradient has {} entries, global gradient {}",
            grad_e.len(),
            grad_g.len()
        )));
    }
    Ok(grad_e.iter().zip(grad_g).map(|(a, b)| (a - b) * (a - b)).sum())
}

pub fn mask_l1(mask: &MaskVector) -> f64 {
    mask.l1()
}

/// Per-client optimisation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientHyper {
    pub lr_theta: f64,
    /// Mask learning rate.
    pub lr_delta: f64,
    /// Weight of the alignment penalty.
    pub lambda: f64,
    /// Proximal coefficient; `0` disables it.
    pub mu_prox: f64,
    /// Whether the mask is trained at all. Off, it stays all-ones.
    pub train_mask: bool,
    /// Also push the penalty gradient into the parameters (ablation).
    pub theta_coupling: bool,
}

impl ClientHyper {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.lr_theta > 0.0) {
            bad.push(format!("lr_theta = {} must be > 0", self.lr_theta));
        }
        if !(self.lr_delta > 0.0) {
            bad.push(format!("lr_delta = {} must be > 0", self.lr_delta));
        }
        if !(self.lambda >= 0.0) {
            bad.push(format!("lambda = {} must be >= 0", self.lambda));
        }
        if !(self.mu_prox >= 0.0) {
            bad.push(format!("mu_prox = {} must be >= 0", self.mu_prox));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Everything a client sends to the server after a round. Holds no samples or
/// feature values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundUpload {
    pub client_id: usize,
    pub params: ParamVector,
    pub sci_grad: Vec<f64>,
    pub risk: f64,
    pub n_samples: usize,
    pub mask_l1: f64,
}

/// Schedule of one round of local work.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalPlan {
    pub round: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

/// Sample visiting order for one epoch.
pub fn minibatch_order(seed: u64, round: usize, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[round as u64, epoch as u64]));
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub model: MlpSpec,
    pub params: ParamVector,
    pub mask: MaskVector,
    pub dataset: Dataset,
    pub n_samples: usize,
    pub hyper: ClientHyper,
    seed: u64,
    /// Subsample used for the mask gradient when the dataset exceeds the cap.
    penalty_subset: Option<OwnedBatch>,
}

impl ClientState {
    pub fn new(client_id: usize, model: MlpSpec, dataset: Dataset, hyper: ClientHyper, seed: u64) -> Result<Self> {
        model.validate()?;
        hyper.validate()?;
        if dataset.is_empty() {
            return Err(Error::Config(format!("client {client_id} has no data")));
        }
        if dataset.dim() != model.input_dim {
            return Err(Error::Config(format!(
                "client {client_id}: data has {} features, model input_dim is {}",
                dataset.dim(),
                model.input_dim
            )));
        }
        let penalty_subset = (dataset.len() > PENALTY_SAMPLE_CAP).then(|| {
            let mut idx: Vec<usize> = (0..dataset.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[u64::MAX]));
            idx.shuffle(&mut rng);
            idx.truncate(PENALTY_SAMPLE_CAP);
            idx.sort_unstable();
            OwnedBatch::gather(&dataset.batch(), &idx)
        });
        Ok(Self {
            client_id,
            params: ParamVector::zeros_for(&model),
            mask: MaskVector::ones(model.mask_width()),
            n_samples: dataset.len(),
            model,
            dataset,
            hyper,
            seed,
            penalty_subset,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Data the mask gradient is computed over.
    fn penalty_batch(&self) -> Batch<'_> {
        match &self.penalty_subset {
            Some(sub) => sub.view(),
            None => self.dataset.batch(),
        }
    }

    fn abort(&self, round: usize, detail: impl Into<String>) -> Error {
        Error::NonFinite {
            round,
            client: self.client_id,
            detail: detail.into(),
        }
    }

    /// Mask gradient over the local data at the current state.
    pub fn sci_gradient(&self) -> Result<Vec<f64>> {
        Ok(grad_wrt_mask(&self.model, &self.params, &self.mask, &self.penalty_batch())?.into_vec())
    }

    /// One mask step; returns the parameter-space direction of the penalty when
    /// `theta_coupling` is on.
    fn update_mask(&mut self, grad_g: &[f64], round: usize) -> Result<Option<Vec<f64>>> {
        let grad_e = self.sci_gradient()?;
        let mut step = grad_e.clone();
        let mut coupling = None;
        if self.hyper.lambda > 0.0 {
            if grad_g.len() != grad_e.len() {
                return Err(Error::Protocol(format!(
                    "global mask gradient has {} entries, mask has {}",
                    grad_g.len(),
                    grad_e.len()
                )));
            }
            let diff: Vec<f64> = grad_e.iter().zip(grad_g).map(|(a, b)| a - b).collect();
            let eps = default_hvp_eps(&self.mask);
            let hv = hvp_mask(&self.model, &self.params, &self.mask, &self.penalty_batch(), &diff, eps)?;
            for (s, h) in step.iter_mut().zip(&hv) {
                *s += self.hyper.lambda * 2.0 * h;
            }
            if self.hyper.theta_coupling {
                coupling = Some(diff.iter().map(|d| 2.0 * self.hyper.lambda * d).collect());
            }
        }
        if step.iter().any(|s| !s.is_finite()) {
            return Err(self.abort(round, "mask step is not finite; lr_delta or lambda too large"));
        }
        for (d, s) in self.mask.as_mut_slice().iter_mut().zip(&step) {
            *d -= self.hyper.lr_delta * s;
        }
        Ok(coupling)
    }

    /// Runs one round of local training starting from `global` and returns the upload.
    ///
    /// `grad_g` is absent in the first round; the mask is then left untouched and
    /// the risk carries no penalty.
    pub fn local_train(
        &mut self,
        global: &ParamVector,
        grad_g: Option<&[f64]>,
        plan: &LocalPlan,
    ) -> Result<RoundUpload> {
        if plan.epochs == 0 || plan.batch_size == 0 {
            return Err(Error::Usage(
                "local training needs epochs >= 1 and batch_size >= 1".into(),
            ));
        }
        if !global.same_layout(&self.params) {
            return Err(Error::Protocol(format!(
                "client {}: global parameters do not match the model layout",
                self.client_id
            )));
        }
        self.params = global.clone();
        let n = self.dataset.len();
        let mu = self.hyper.mu_prox;

        for epoch in 0..plan.epochs {
            // The mask optimiser only runs once the server has published a target.
            let coupling = match grad_g {
                Some(g) if self.hyper.train_mask => self.update_mask(g, plan.round)?,
                _ => None,
            };
            let order = minibatch_order(self.seed, plan.round, epoch, n);
            for chunk in order.chunks(plan.batch_size) {
                let mb = OwnedBatch::gather(&self.dataset.batch(), chunk);
                let view = mb.view();
                let mut grads = loss_and_grads(&self.model, &self.params, &self.mask, &view)?;
                if !grads.loss.is_finite() {
                    return Err(self.abort(
                        plan.round,
                        format!("loss became {} in epoch {epoch}; lower lr_theta", grads.loss),
                    ));
                }
                if mu > 0.0 {
                    for ((g, t), t0) in grads
                        .theta
                        .values_mut()
                        .iter_mut()
                        .zip(self.params.values())
                        .zip(global.values())
                    {
                        *g += mu * (t - t0);
                    }
                }
                if let Some(u) = &coupling {
                    let eps = default_hvp_eps(&self.mask);
                    let extra = mixed_theta_mask(&self.model, &self.params, &self.mask, &view, u, eps)?;
                    grads.theta.axpy(1.0, &extra);
                }
                self.params.axpy(-self.hyper.lr_theta, &grads.theta);
            }
        }

        if !self.params.is_finite() {
            return Err(self.abort(plan.round, "parameters diverged"));
        }
        let sci_grad = self.sci_gradient()?;
        let task = loss(&self.model, &self.params, &self.mask, &self.dataset.batch())?;
        let penalty = match grad_g {
            Some(g) => self.hyper.lambda * sci_penalty(&sci_grad, g)?,
            None => 0.0,
        };
        let risk = task + penalty;
        if !risk.is_finite() {
            return Err(self.abort(plan.round, "final risk is not finite"));
        }
        Ok(RoundUpload {
            client_id: self.client_id,
            params: self.params.clone(),
            sci_grad,
            risk,
            n_samples: self.n_samples,
            mask_l1: mask_l1(&self.mask),
        })
    }
}
