//! Fully connected embedding network with rectifier hidden layers, a linear
//! output layer and optional L2 normalization of the output.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{Matrix, EPS_NORM};
use crate::rng;

pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];
pub const DEFAULT_EMBEDDING_DIM: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weights: Matrix::zeros(output, input), bias: vec![0.0; output] }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    fn apply(&self, inputs: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(inputs.rows(), self.output_dim());
        for r in 0..inputs.rows() {
            let x = inputs.row(r);
            let y = out.row_mut(r);
            for (o, yo) in y.iter_mut().enumerate() {
                let w = self.weights.row(o);
                *yo = self.bias[o] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
    pub normalize: bool,
}

/// Intermediate values kept for the backward pass.
struct Trace {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Matrix>,
    /// Output of the last linear layer, before normalization.
    pre_norm: Matrix,
    output: Matrix,
}

impl ModelParams {
    /// Layer sizes `[D, h_1, ..., F]`, weights uniform in `+-sqrt(6 / fan_in)`, zero biases.
    pub fn init(sizes: &[usize], normalize: bool, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("layer sizes {sizes:?} need >= 2 positive entries")));
        }
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / fan_in as f64).sqrt();
                let mut r = rng::stream(seed, l as u64);
                let mut layer = Layer::zeros(fan_in, fan_out);
                for v in layer.weights.as_mut_slice() {
                    *v = r.random_range(-limit..limit);
                }
                layer
            })
            .collect();
        Ok(Self { layers, normalize })
    }

    pub fn from_layers(layers: Vec<Layer>, normalize: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.output_dim() {
                return Err(Error::Shape(format!("layer {l} bias length {} vs {} outputs", layer.bias.len(), layer.output_dim())));
            }
            if l > 0 && layers[l - 1].output_dim() != layer.input_dim() {
                return Err(Error::Shape(format!(
                    "layer {l} takes {} inputs but layer {} produces {}",
                    layer.input_dim(),
                    l - 1,
                    layers[l - 1].output_dim()
                )));
            }
        }
        let p = Self { layers, normalize };
        if !p.is_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(p)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].input_dim()];
        s.extend(self.layers.iter().map(Layer::output_dim));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Weight and bias blocks in layer order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Zero-valued parameters of the same shape.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Layer::zeros(l.input_dim(), l.output_dim())).collect(),
            normalize: self.normalize,
        }
    }

    fn trace(&self, inputs: &Matrix) -> Result<Trace> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::Shape(format!("input dimension {} vs network input {}", inputs.cols(), self.input_dim())));
        }
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut current = inputs.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.apply(&current);
            if l < last {
                for v in z.as_mut_slice() {
                    *v = v.max(0.0);
                }
            }
            acts.push(std::mem::replace(&mut current, z));
        }
        let pre_norm = current;
        let mut output = pre_norm.clone();
        if self.normalize {
            for r in 0..output.rows() {
                let row = output.row_mut(r);
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < EPS_NORM {
                    row.fill(0.0);
                } else {
                    row.iter_mut().for_each(|v| *v /= norm);
                }
            }
        }
        Ok(Trace { inputs: acts, pre_norm, output })
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.trace(inputs)?.output)
    }

    /// Gradients of a loss with respect to every parameter, given the loss
    /// gradient with respect to the embeddings of `inputs`.
    pub fn backward(&self, inputs: &Matrix, grad_embeddings: &Matrix) -> Result<ModelParams> {
        let trace = self.trace(inputs)?;
        if grad_embeddings.rows() != inputs.rows() || grad_embeddings.cols() != self.output_dim() {
            return Err(Error::Shape(format!(
                "embedding gradient is {}x{}, expected {}x{}",
                grad_embeddings.rows(),
                grad_embeddings.cols(),
                inputs.rows(),
                self.output_dim()
            )));
        }
        let mut grad = grad_embeddings.clone();
        if self.normalize {
            for r in 0..grad.rows() {
                let z = trace.pre_norm.row(r);
                let y = trace.output.row(r);
                let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                let g = grad.row_mut(r);
                if norm < EPS_NORM {
                    g.fill(0.0);
                    continue;
                }
                let dot: f64 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
                for (gk, yk) in g.iter_mut().zip(y) {
                    *gk = (*gk - yk * dot) / norm;
                }
            }
        }

        let mut grads = self.zeros_like();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &trace.inputs[l];
            let gl = &mut grads.layers[l];
            for r in 0..input.rows() {
                let x = input.row(r);
                let g = grad.row(r);
                for (o, &go) in g.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    gl.bias[o] += go;
                    for (w, xi) in gl.weights.row_mut(o).iter_mut().zip(x) {
                        *w += go * xi;
                    }
                }
            }
            if l == 0 {
                break;
            }
            let mut prev = Matrix::zeros(input.rows(), layer.input_dim());
            for r in 0..input.rows() {
                let g = grad.row(r);
                let p = prev.row_mut(r);
                for (o, &go) in g.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    for (pi, w) in p.iter_mut().zip(layer.weights.row(o)) {
                        *pi += go * w;
                    }
                }
                // the input of layer l is the rectified output of layer l - 1
                for (pi, a) in p.iter_mut().zip(input.row(r)) {
                    if *a <= 0.0 {
                        *pi = 0.0;
                    }
                }
            }
            grad = prev;
        }
        Ok(grads)
    }
}
