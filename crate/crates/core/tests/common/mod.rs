#![allow(dead_code)]

use fedcd_core::engine::{Activation, Batch, MaskVector, MlpSpec, ParamVector};
use fedcd_core::envgen::Dataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_params(spec: &MlpSpec, rng: &mut ChaCha8Rng, scale: f64) -> ParamVector {
    let shapes = spec.layer_shapes();
    let n = spec.num_params();
    let values = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    ParamVector::from_parts(values, shapes).unwrap()
}

pub fn random_mask(width: usize, rng: &mut ChaCha8Rng) -> MaskVector {
    MaskVector::from_vec((0..width).map(|_| rng.gen_range(0.5..1.5)).collect())
}

pub struct OwnedData {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
}

impl OwnedData {
    pub fn random(n: usize, dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            inputs: (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            labels: (0..n).map(|_| rng.gen_range(0..classes)).collect(),
            dim,
        }
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch::new(&self.inputs, self.dim, &self.labels).unwrap()
    }
}

/// A small random tanh network (smooth, so finite differences are well defined).
pub fn random_spec(rng: &mut ChaCha8Rng) -> MlpSpec {
    let input = rng.gen_range(1..5);
    let depth = rng.gen_range(1..3);
    let hidden = (0..depth).map(|_| rng.gen_range(2..6)).collect();
    let classes = rng.gen_range(2..4);
    MlpSpec::new(input, hidden, classes).with_activation(Activation::Tanh)
}

/// Central finite differences of a scalar function.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

/// Plain logistic regression on a column subset, trained by full-batch gradient descent.
pub struct Probe {
    pub cols: Vec<usize>,
    pub w: Vec<f64>,
    pub b: f64,
}

impl Probe {
    pub fn fit(ds: &[&Dataset], cols: Vec<usize>, steps: usize, lr: f64) -> Self {
        let mut w = vec![0.0; cols.len()];
        let mut b = 0.0;
        let total: usize = ds.iter().map(|d| d.len()).sum();
        for _ in 0..steps {
            let mut gw = vec![0.0; cols.len()];
            let mut gb = 0.0;
            for d in ds {
                for i in 0..d.len() {
                    let row = d.row(i);
                    let z: f64 = b + cols.iter().zip(&w).map(|(&c, wi)| wi * row[c]).sum::<f64>();
                    let p = 1.0 / (1.0 + (-z).exp());
                    let err = p - d.labels[i] as f64;
                    for (g, &c) in gw.iter_mut().zip(&cols) {
                        *g += err * row[c];
                    }
                    gb += err;
                }
            }
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= lr * g / total as f64;
            }
            b -= lr * gb / total as f64;
        }
        Self { cols, w, b }
    }

    pub fn accuracy(&self, d: &Dataset) -> f64 {
        let hits = (0..d.len())
            .filter(|&i| {
                let row = d.row(i);
                let z: f64 = self.b + self.cols.iter().zip(&self.w).map(|(&c, wi)| wi * row[c]).sum::<f64>();
                usize::from(z > 0.0) == d.labels[i]
            })
            .count();
        hits as f64 / d.len() as f64
    }
}
