//! Forward and reverse passes of the masked MLP.
//!
//! Layers are `z = W h + b`; every hidden layer applies the activation, the
//! designated hidden layer is additionally multiplied elementwise by the mask,
//! and the output layer is linear. The loss is mean softmax cross-entropy.

use rand::Rng;

use super::types::{Batch, MaskVector, Matrix, MlpSpec, ParamVector};
use crate::error::{Error, Result};

/// Loss and exact reverse-mode gradients for one batch.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    pub theta: ParamVector,
    pub delta: MaskVector,
}

/// Cached intermediate values of one forward pass.
struct Trace {
    /// Input to each layer (batch inputs first, then post-mask hidden activations).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<f64>>,
    /// Hidden activations before masking.
    act: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn check_shapes(spec: &MlpSpec, params: &ParamVector, mask: Option<&MaskVector>, batch: &Batch<'_>) -> Result<()> {
    spec.validate()?;
    let expected = spec.layer_shapes();
    if params.shapes().len() != expected.len() {
        return Err(Error::Shape {
            layer: params.shapes().len().min(expected.len()),
            detail: format!(
                "parameters describe {} layers, model has {}",
                params.shapes().len(),
                expected.len()
            ),
        });
    }
    for (l, (got, want)) in params.shapes().iter().zip(&expected).enumerate() {
        if got != want {
            return Err(Error::Shape {
                layer: l,
                detail: format!(
                    "weights are {}x{}, expected {}x{}",
                    got.rows, got.cols, want.rows, want.cols
                ),
            });
        }
    }
    if batch.dim() != spec.input_dim {
        return Err(Error::Shape {
            layer: 0,
            detail: format!("batch has {} features, model expects {}", batch.dim(), spec.input_dim),
        });
    }
    if let Some(label) = batch.labels().iter().find(|&&y| y >= spec.output_dim) {
        return Err(Error::Usage(format!("label {label} outside [0, {})", spec.output_dim)));
    }
    if let Some(mask) = mask {
        if mask.len() != spec.mask_width() {
            return Err(Error::Shape {
                layer: spec.mask_layer(),
                detail: format!(
                    "mask has {} entries, masked layer is {} wide",
                    mask.len(),
                    spec.mask_width()
                ),
            });
        }
    }
    Ok(())
}

/// `out[n][o] = b[o] + sum_i w[o][i] * x[n][i]`
fn dense(x: &[f64], n: usize, w: &[f64], b: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * rows];
    for s in 0..n {
        let xs = &x[s * cols..(s + 1) * cols];
        let os = &mut out[s * rows..(s + 1) * rows];
        for (o, slot) in os.iter_mut().enumerate() {
            let wr = &w[o * cols..(o + 1) * cols];
            let mut acc = b[o];
            for (wi, xi) in wr.iter().zip(xs) {
                acc += wi * xi;
            }
            *slot = acc;
        }
    }
    out
}

fn run_forward(spec: &MlpSpec, params: &ParamVector, mask: Option<&[f64]>, batch: &Batch<'_>) -> Trace {
    let n = batch.len();
    let shapes = params.shapes();
    let hidden = spec.hidden_dims.len();
    let mask_layer = spec.mask_layer();
    let mut trace = Trace {
        inputs: Vec::with_capacity(hidden + 1),
        pre: Vec::with_capacity(hidden),
        act: Vec::with_capacity(hidden),
        logits: Vec::new(),
    };
    let mut h = batch.inputs().to_vec();
    for (l, shape) in shapes.iter().enumerate() {
        let (w, b) = params.layer(l);
        let z = dense(&h, n, w, b, shape.rows, shape.cols);
        trace.inputs.push(h);
        if l == hidden {
            trace.logits = z;
            break;
        }
        let a: Vec<f64> = z.iter().map(|&v| spec.activation.apply(v)).collect();
        let next = match mask {
            Some(m) if l == mask_layer => a
                .chunks_exact(shape.rows)
                .flat_map(|row| row.iter().zip(m).map(|(x, d)| x * d))
                .collect(),
            _ => a.clone(),
        };
        trace.pre.push(z);
        trace.act.push(a);
        h = next;
    }
    trace
}

/// Logits (`n x output_dim`) with the mask applied to the designated hidden layer.
pub fn forward(spec: &MlpSpec, params: &ParamVector, mask: &MaskVector, batch: &Batch<'_>) -> Result<Matrix> {
    check_shapes(spec, params, Some(mask), batch)?;
    let trace = run_forward(spec, params, Some(mask.as_slice()), batch);
    Ok(Matrix {
        rows: batch.len(),
        cols: spec.output_dim,
        data: trace.logits,
    })
}

/// Logits of the plain network, no mask anywhere.
pub fn forward_unmasked(spec: &MlpSpec, params: &ParamVector, batch: &Batch<'_>) -> Result<Matrix> {
    check_shapes(spec, params, None, batch)?;
    let trace = run_forward(spec, params, None, batch);
    Ok(Matrix {
        rows: batch.len(),
        cols: spec.output_dim,
        data: trace.logits,
    })
}

/// Per-row `log-sum-exp(z) - z[y]`, averaged, plus `softmax - onehot` scaled by `1/n`.
fn cross_entropy(logits: &[f64], labels: &[usize], classes: usize, want_grad: bool) -> (f64, Vec<f64>) {
    let n = labels.len();
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = if want_grad { vec![0.0; logits.len()] } else { Vec::new() };
    for (s, &y) in labels.iter().enumerate() {
        let row = &logits[s * classes..(s + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[y];
        if want_grad {
            let g = &mut grad[s * classes..(s + 1) * classes];
            for (k, slot) in g.iter_mut().enumerate() {
                let p = (row[k] - lse).exp();
                let target = if k == y { 1.0 } else { 0.0 };
                *slot = (p - target) * inv_n;
            }
        }
    }
    (loss * inv_n, grad)
}

/// Mean cross-entropy of the masked network.
pub fn loss(spec: &MlpSpec, params: &ParamVector, mask: &MaskVector, batch: &Batch<'_>) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Usage("loss of an empty batch".into()));
    }
    check_shapes(spec, params, Some(mask), batch)?;
    let trace = run_forward(spec, params, Some(mask.as_slice()), batch);
    Ok(cross_entropy(&trace.logits, batch.labels(), spec.output_dim, false).0)
}

/// Mean cross-entropy and its exact gradients with respect to parameters and mask.
pub fn loss_and_grads(spec: &MlpSpec, params: &ParamVector, mask: &MaskVector, batch: &Batch<'_>) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(Error::Usage("gradient of an empty batch".into()));
    }
    check_shapes(spec, params, Some(mask), batch)?;
    let n = batch.len();
    let m = mask.as_slice();
    let trace = run_forward(spec, params, Some(m), batch);
    let (loss, mut upstream) = cross_entropy(&trace.logits, batch.labels(), spec.output_dim, true);

    let mut grad_theta = ParamVector::zeros(params.shapes().to_vec());
    let mut grad_delta = vec![0.0; m.len()];
    let hidden = spec.hidden_dims.len();
    let mask_layer = spec.mask_layer();

    for l in (0..=hidden).rev() {
        let shape = params.shapes()[l];
        let (rows, cols) = (shape.rows, shape.cols);
        let x = &trace.inputs[l];
        let (w, _) = params.layer(l);
        {
            let (gw, gb) = grad_theta.layer_mut(l);
            for s in 0..n {
                let ds = &upstream[s * rows..(s + 1) * rows];
                let xs = &x[s * cols..(s + 1) * cols];
                for (o, &d) in ds.iter().enumerate() {
                    gb[o] += d;
                    let gwr = &mut gw[o * cols..(o + 1) * cols];
                    for (g, xi) in gwr.iter_mut().zip(xs) {
                        *g += d * xi;
                    }
                }
            }
        }
        if l == 0 {
            break;
        }
        // Gradient w.r.t. this layer's input, i.e. the output of hidden layer l-1.
        let mut down = vec![0.0; n * cols];
        for s in 0..n {
            let ds = &upstream[s * rows..(s + 1) * rows];
            let out = &mut down[s * cols..(s + 1) * cols];
            for (o, &d) in ds.iter().enumerate() {
                let wr = &w[o * cols..(o + 1) * cols];
                for (slot, wi) in out.iter_mut().zip(wr) {
                    *slot += d * wi;
                }
            }
        }
        let h = l - 1;
        let act = &trace.act[h];
        let pre = &trace.pre[h];
        if h == mask_layer {
            for s in 0..n {
                for j in 0..cols {
                    let idx = s * cols + j;
                    grad_delta[j] += down[idx] * act[idx];
                    down[idx] *= m[j];
                }
            }
        }
        for (d, (&z, &a)) in down.iter_mut().zip(pre.iter().zip(act)) {
            *d *= spec.activation.derivative(z, a);
        }
        upstream = down;
    }

    Ok(Gradients {
        loss,
        theta: grad_theta,
        delta: MaskVector::from_vec(grad_delta),
    })
}

/// Gradient of the dataset-mean loss with respect to the mask.
pub fn grad_wrt_mask(
    spec: &MlpSpec,
    params: &ParamVector,
    mask: &MaskVector,
    dataset: &Batch<'_>,
) -> Result<MaskVector> {
    Ok(loss_and_grads(spec, params, mask, dataset)?.delta)
}

/// Glorot-uniform weights, zero biases.
pub fn init_params<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> ParamVector {
    let mut params = ParamVector::zeros_for(spec);
    for l in 0..params.shapes().len() {
        let shape = params.shapes()[l];
        let limit = (6.0 / (shape.rows + shape.cols) as f64).sqrt();
        let (w, _) = params.layer_mut(l);
        for v in w.iter_mut() {
            *v = rng.gen_range(-limit..limit);
        }
    }
    params
}
