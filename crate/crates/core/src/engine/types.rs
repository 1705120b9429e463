use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden-unit nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub(crate) fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and the activation `a = f(z)`.
    #[inline]
    pub(crate) fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Architecture of a fully connected classifier with one masked hidden layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    /// Number of classes.
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Hidden layer whose activation is multiplied by the client mask.
    /// `None` selects the last hidden layer.
    #[serde(default)]
    pub mask_layer_index: Option<usize>,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            output_dim,
            activation: Activation::Relu,
            mask_layer_index: None,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_mask_layer(mut self, index: usize) -> Self {
        self.mask_layer_index = Some(index);
        self
    }

    /// Index into `hidden_dims` of the masked layer.
    pub fn mask_layer(&self) -> usize {
        self.mask_layer_index
            .unwrap_or_else(|| self.hidden_dims.len().saturating_sub(1))
    }

    /// Width of the masked hidden activation, i.e. the mask length.
    pub fn mask_width(&self) -> usize {
        self.hidden_dims.get(self.mask_layer()).copied().unwrap_or(0)
    }

    /// `(rows, cols)` of every weight matrix, input layer first. Layer `l` also owns `rows` biases.
    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| LayerShape { rows: w[1], cols: w[0] }).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(LayerShape::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("model input_dim and output_dim must be >= 1".into()));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::Config(
                "model needs at least one hidden layer to carry the mask".into(),
            ));
        }
        if let Some(i) = self.hidden_dims.iter().position(|&d| d == 0) {
            return Err(Error::Config(format!("hidden_dims[{i}] must be >= 1")));
        }
        if self.mask_layer() >= self.hidden_dims.len() {
            return Err(Error::Config(format!(
                "mask_layer_index {} out of range for {} hidden layers",
                self.mask_layer(),
                self.hidden_dims.len()
            )));
        }
        Ok(())
    }
}

/// Shape of one dense layer: `rows x cols` weights followed by `rows` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
}

impl LayerShape {
    pub fn len(&self) -> usize {
        self.rows * self.cols + self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flattened model parameters. Per layer: row-major weights, then biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    shapes: Vec<LayerShape>,
}

impl ParamVector {
    pub fn zeros(shapes: Vec<LayerShape>) -> Self {
        let len = shapes.iter().map(LayerShape::len).sum();
        Self {
            values: vec![0.0; len],
            shapes,
        }
    }

    pub fn zeros_for(spec: &MlpSpec) -> Self {
        Self::zeros(spec.layer_shapes())
    }

    pub fn from_parts(values: Vec<f64>, shapes: Vec<LayerShape>) -> Result<Self> {
        let expected: usize = shapes.iter().map(LayerShape::len).sum();
        if values.len() != expected {
            return Err(Error::Protocol(format!(
                "parameter vector has {} values but its shapes imply {expected}",
                values.len()
            )));
        }
        Ok(Self { values, shapes })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.shapes == other.shapes
    }

    /// Weights and biases of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (start, shape) = self.layer_offset(l);
        let w_end = start + shape.rows * shape.cols;
        (&self.values[start..w_end], &self.values[w_end..w_end + shape.rows])
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (start, shape) = self.layer_offset(l);
        let w_len = shape.rows * shape.cols;
        let (w, b) = self.values[start..start + shape.len()].split_at_mut(w_len);
        (w, b)
    }

    fn layer_offset(&self, l: usize) -> (usize, LayerShape) {
        let start = self.shapes[..l].iter().map(LayerShape::len).sum();
        (start, self.shapes[l])
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        debug_assert!(self.same_layout(other));
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += alpha * y;
        }
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Per-client multiplicative intervener applied to one hidden activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaskVector {
    delta: Vec<f64>,
}

impl MaskVector {
    /// All-pass mask.
    pub fn ones(width: usize) -> Self {
        Self {
            delta: vec![1.0; width],
        }
    }

    pub fn zeros(width: usize) -> Self {
        Self {
            delta: vec![0.0; width],
        }
    }

    pub fn from_vec(delta: Vec<f64>) -> Self {
        Self { delta }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.delta
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.delta
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.delta
    }

    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    /// Sum of absolute entries.
    pub fn l1(&self) -> f64 {
        self.delta.iter().map(|d| d.abs()).sum()
    }
}

/// Borrowed view of `n` row-major samples and their class labels.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    inputs: &'a [f64],
    dim: usize,
    labels: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(inputs: &'a [f64], dim: usize, labels: &'a [usize]) -> Result<Self> {
        if inputs.len() != dim * labels.len() {
            return Err(Error::Shape {
                layer: 0,
                detail: format!(
                    "batch holds {} input values, expected {} samples x {dim} features",
                    inputs.len(),
                    labels.len()
                ),
            });
        }
        Ok(Self { inputs, dim, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn inputs(&self) -> &'a [f64] {
        self.inputs
    }

    pub fn labels(&self) -> &'a [usize] {
        self.labels
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }
}

/// Owned copy of selected samples, used to assemble minibatches.
#[derive(Debug, Clone, Default)]
pub struct OwnedBatch {
    pub inputs: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<usize>,
}

impl OwnedBatch {
    pub fn gather(source: &Batch<'_>, indices: &[usize]) -> Self {
        let mut out = OwnedBatch {
            inputs: Vec::with_capacity(indices.len() * source.dim()),
            dim: source.dim(),
            labels: Vec::with_capacity(indices.len()),
        };
        for &i in indices {
            out.inputs.extend_from_slice(source.row(i));
            out.labels.push(source.labels()[i]);
        }
        out
    }

    pub fn view(&self) -> Batch<'_> {
        Batch {
            inputs: &self.inputs,
            dim: self.dim,
            labels: &self.labels,
        }
    }
}

/// Dense row-major matrix, used for logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}
