//! Server-side aggregation.
//!
//! Besides sample-count (FedAvg) weights, the server computes risk-equalising
//! weights `w` that minimise the population variance of `w_e * R_e` over the
//! open simplex, and mixes them with the FedAvg weights `p` through
//! `c = softmax(eta * w + p)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::client::RoundUpload;
use crate::engine::ParamVector;
use crate::error::{Error, Result};

/// Floor applied to client risks before inverting them.
pub const RISK_FLOOR: f64 = 1e-8;
/// Lower bound on each weight in the iterative solver.
pub const WEIGHT_FLOOR: f64 = 1e-6;
pub const MAX_SOLVER_ITERS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    pub round: usize,
    pub params: ParamVector,
    /// Absent before the first aggregation.
    pub sci_grad_global: Option<Vec<f64>>,
    pub eta: f64,
}

impl GlobalState {
    pub fn new(params: ParamVector, eta: f64) -> Self {
        Self {
            round: 0,
            params,
            sci_grad_global: None,
            eta,
        }
    }
}

/// What the server decided in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationReport {
    pub round: usize,
    pub risks: Vec<f64>,
    pub p: Vec<f64>,
    pub w: Vec<f64>,
    pub c: Vec<f64>,
    pub variance_at_w: f64,
}

/// Population variance (divides by the count).
pub fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// `Var(w_e * R_e)` across clients.
pub fn weighted_risk_variance(w: &[f64], risks: &[f64]) -> f64 {
    let mapped: Vec<f64> = w.iter().zip(risks).map(|(a, b)| a * b).collect();
    population_variance(&mapped)
}

/// `p_e = N_e / sum N`.
pub fn fedavg_weights(n_samples: &[usize]) -> Result<Vec<f64>> {
    if n_samples.is_empty() {
        return Err(Error::Config("no clients to weight".into()));
    }
    if let Some(i) = n_samples.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!("client {i} reports zero samples")));
    }
    let total: usize = n_samples.iter().sum();
    Ok(n_samples.iter().map(|&n| n as f64 / total as f64).collect())
}

fn sorted_by_client(uploads: &[RoundUpload]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..uploads.len()).collect();
    idx.sort_by_key(|&i| uploads[i].client_id);
    idx
}

/// Coordinatewise `sum_e c_e theta_e`, summed in ascending `client_id` order.
/// `coefficients[i]` belongs to `uploads[i]`.
pub fn aggregate_params(uploads: &[RoundUpload], coefficients: &[f64]) -> Result<ParamVector> {
    let first = uploads
        .first()
        .ok_or_else(|| Error::Protocol("aggregation over zero uploads".into()))?;
    if coefficients.len() != uploads.len() {
        return Err(Error::Protocol(format!(
            "{} coefficients for {} uploads",
            coefficients.len(),
            uploads.len()
        )));
    }
    let total: f64 = coefficients.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::Protocol(format!(
            "aggregation coefficients sum to {total}, not 1"
        )));
    }
    let mut out = ParamVector::zeros(first.params.shapes().to_vec());
    for i in sorted_by_client(uploads) {
        let up = &uploads[i];
        if !up.params.same_layout(&out) || up.params.len() != out.len() {
            return Err(Error::Protocol(format!(
                "client {} uploaded parameters with a different layout",
                up.client_id
            )));
        }
        out.axpy(coefficients[i], &up.params);
    }
    Ok(out)
}

/// `grad_g = sum_e p_e grad_e`, summed in ascending `client_id` order.
pub fn aggregate_sci_gradients(uploads: &[RoundUpload], p: &[f64]) -> Result<Vec<f64>> {
    let first = uploads
        .first()
        .ok_or_else(|| Error::Protocol("aggregation over zero uploads".into()))?;
    if p.len() != uploads.len() {
        return Err(Error::Protocol(format!(
            "{} weights for {} uploads",
            p.len(),
            uploads.len()
        )));
    }
    let dim = first.sci_grad.len();
    let mut out = vec![0.0; dim];
    for i in sorted_by_client(uploads) {
        let up = &uploads[i];
        if up.sci_grad.len() != dim {
            return Err(Error::Protocol(format!(
                "client {} uploaded a mask gradient of length {}, expected {dim}",
                up.client_id,
                up.sci_grad.len()
            )));
        }
        for (o, g) in out.iter_mut().zip(&up.sci_grad) {
            *o += p[i] * g;
        }
    }
    Ok(out)
}

/// Inverse-risk weights `w_e = (1/R_e) / sum (1/R_k)`. They make every `w_e R_e`
/// equal, so the variance reaches its lower bound of zero.
pub fn rea_closed_form(risks: &[f64]) -> Vec<f64> {
    let inv: Vec<f64> = risks.iter().map(|r| 1.0 / r.max(RISK_FLOOR)).collect();
    let total: f64 = inv.iter().sum();
    inv.iter().map(|v| v / total).collect()
}

/// Result of [`rea_solve_iterative`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReaSolution {
    pub weights: Vec<f64>,
    pub iterations: usize,
    /// False when the iteration cap was hit; `weights` is then the best iterate seen.
    pub converged: bool,
}

/// Euclidean projection onto `{x : sum x = 1, x >= floor}`.
fn project_capped_simplex(v: &[f64], floor: f64) -> Vec<f64> {
    let n = v.len();
    let budget = 1.0 - floor * n as f64;
    // Project the shifted vector onto the simplex of mass `budget`.
    let shifted: Vec<f64> = v.iter().map(|x| x - floor).collect();
    let mut sorted = shifted.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (k, &s) in sorted.iter().enumerate() {
        cumsum += s;
        let t = (cumsum - budget) / (k + 1) as f64;
        if s - t > 0.0 {
            tau = t;
        }
    }
    shifted.iter().map(|x| (x - tau).max(0.0) + floor).collect()
}

/// Hessian of `Var(w .* r)`: `(2/E) (diag(r)^2 - r r^T / E)`.
fn variance_hessian(r: &[f64]) -> DMatrix<f64> {
    let e = r.len();
    let ef = e as f64;
    DMatrix::from_fn(e, e, |i, j| {
        let diag = if i == j { r[i] * r[i] } else { 0.0 };
        2.0 / ef * (diag - r[i] * r[j] / ef)
    })
}

/// Minimises `Var(w_e R_e)` over `{sum w = 1, w >= WEIGHT_FLOOR}` by sequential
/// equality-constrained least-squares steps: each iteration solves the KKT system
/// on the free coordinates (bound ones pinned at the floor), steps to that
/// solution and projects it back onto the feasible set. Stops when the step is
/// below `tol` in the max-norm.
pub fn rea_solve_iterative(risks: &[f64], tol: f64) -> Result<ReaSolution> {
    if !(tol > 0.0) {
        return Err(Error::Usage(format!("solver tolerance must be positive, got {tol}")));
    }
    let e = risks.len();
    if e == 0 {
        return Err(Error::Usage("no risks to weight".into()));
    }
    let r: Vec<f64> = risks.iter().map(|x| x.max(RISK_FLOOR)).collect();
    if e == 1 {
        return Ok(ReaSolution {
            weights: vec![1.0],
            iterations: 0,
            converged: true,
        });
    }
    let hess = variance_hessian(&r);
    let objective = |w: &[f64]| weighted_risk_variance(w, &r);

    let mut w = vec![1.0 / e as f64; e];
    let mut best = (objective(&w), w.clone());
    for iter in 1..=MAX_SOLVER_ITERS {
        let free: Vec<usize> = (0..e)
            .filter(|&i| w[i] > WEIGHT_FLOOR || gradient_pulls_up(&hess, &w, i))
            .collect();
        let target = solve_free_kkt(&hess, &free, e);
        let candidate: Vec<f64> = match target {
            Some(t) => t,
            // Singular reduced system: fall back to a projected gradient step.
            None => {
                let g = &hess * DVector::from_column_slice(&w);
                let scale = hess.norm().max(f64::MIN_POSITIVE);
                w.iter().zip(g.iter()).map(|(wi, gi)| wi - gi / scale).collect()
            }
        };
        let next = project_capped_simplex(&candidate, WEIGHT_FLOOR);
        let change = next.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        w = next;
        let f = objective(&w);
        if f <= best.0 {
            best = (f, w.clone());
        }
        if change < tol {
            return Ok(ReaSolution {
                weights: w,
                iterations: iter,
                converged: true,
            });
        }
    }
    Ok(ReaSolution {
        weights: best.1,
        iterations: MAX_SOLVER_ITERS,
        converged: false,
    })
}

/// Whether a coordinate sitting on the floor would lower the objective by
/// taking mass from the coordinates above it: its partial derivative is below
/// their average, which is the equality multiplier at a KKT point.
fn gradient_pulls_up(hess: &DMatrix<f64>, w: &[f64], i: usize) -> bool {
    let grad = hess * DVector::from_column_slice(w);
    let above: Vec<f64> = (0..w.len()).filter(|&j| w[j] > WEIGHT_FLOOR).map(|j| grad[j]).collect();
    if above.is_empty() {
        return true;
    }
    grad[i] < above.iter().sum::<f64>() / above.len() as f64
}

/// Minimiser of `0.5 w^T H w` over `sum w = 1` with the non-free coordinates
/// fixed at the floor.
fn solve_free_kkt(hess: &DMatrix<f64>, free: &[usize], e: usize) -> Option<Vec<f64>> {
    if free.is_empty() {
        return None;
    }
    let fixed: Vec<usize> = (0..e).filter(|i| !free.contains(i)).collect();
    let k = free.len();
    let mut kkt = DMatrix::<f64>::zeros(k + 1, k + 1);
    let mut rhs = DVector::<f64>::zeros(k + 1);
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            kkt[(a, b)] = hess[(i, j)];
        }
        kkt[(a, k)] = 1.0;
        kkt[(k, a)] = 1.0;
        rhs[a] = -fixed.iter().map(|&j| hess[(i, j)] * WEIGHT_FLOOR).sum::<f64>();
    }
    rhs[k] = 1.0 - WEIGHT_FLOOR * fixed.len() as f64;
    let sol = kkt.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut w = vec![WEIGHT_FLOOR; e];
    for (a, &i) in free.iter().enumerate() {
        w[i] = sol[a];
    }
    Some(w)
}

/// `c_e = exp(eta w_e + p_e) / sum_k exp(eta w_k + p_k)`, max-shifted.
pub fn final_coefficients(w: &[f64], p: &[f64], eta: f64) -> Vec<f64> {
    let logits: Vec<f64> = w.iter().zip(p).map(|(wi, pi)| eta * wi + pi).collect();
    softmax(&logits)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|v| v / total).collect()
}

/// Builds the round report from the uploads, using the closed-form REA weights.
pub fn build_report(round: usize, uploads: &[RoundUpload], eta: f64) -> Result<AggregationReport> {
    let counts: Vec<usize> = uploads.iter().map(|u| u.n_samples).collect();
    let p = fedavg_weights(&counts)?;
    let risks: Vec<f64> = uploads.iter().map(|u| u.risk).collect();
    let w = rea_closed_form(&risks);
    let c = final_coefficients(&w, &p, eta);
    let clamped: Vec<f64> = risks.iter().map(|r| r.max(RISK_FLOOR)).collect();
    Ok(AggregationReport {
        round,
        variance_at_w: weighted_risk_variance(&w, &clamped),
        risks,
        p,
        w,
        c,
    })
}
