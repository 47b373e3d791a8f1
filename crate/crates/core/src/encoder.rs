//! Stacked logistic encoder mapping raw frames to latent features, with
//! backpropagation and an L1-regularized SGD step.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::math::{all_finite, sigmoid, Matrix};

/// One logistic layer: `a_out = σ(Wᵀ a_in + bias)`, with `W` stored
/// `n_in × n_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn n_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn n_out(&self) -> usize {
        self.weights.cols()
    }
}

/// An empty stack is the identity map, which is how the linear-chain baseline
/// runs the CRF directly on raw frames.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStack {
    input_dim: usize,
    layers: Vec<Layer>,
}

/// Activations of every layer for one frame; `activations[0]` is the input.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace holds the input")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl EncoderStack {
    pub fn new(input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        let mut n_in = input_dim;
        for layer in &layers {
            if layer.n_in() != n_in {
                return Err(Error::dim("encoder layer input", n_in, layer.n_in()));
            }
            if layer.bias.len() != layer.n_out() {
                return Err(Error::dim("encoder layer bias", layer.n_out(), layer.bias.len()));
            }
            if !(layer.weights.is_finite() && all_finite(&layer.bias)) {
                return Err(Error::NonFinite("encoder parameters".into()));
            }
            n_in = layer.n_out();
        }
        Ok(Self { input_dim, layers })
    }

    pub fn identity(input_dim: usize) -> Self {
        Self {
            input_dim,
            layers: Vec::new(),
        }
    }

    /// Weights from N(0, scale²), zero biases.
    pub fn random(input_dim: usize, layer_sizes: &[usize], scale: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, scale).expect("finite scale");
        let mut n_in = input_dim;
        let layers = layer_sizes
            .iter()
            .map(|&n_out| {
                let layer = Layer {
                    weights: Matrix::from_fn(n_in, n_out, |_, _| normal.sample(rng)),
                    bias: vec![0.0; n_out],
                };
                n_in = n_out;
                layer
            })
            .collect();
        Self { input_dim, layers }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, Layer::n_out)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(Layer::n_out).collect()
    }

    pub fn is_identity(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && all_finite(&l.bias))
    }

    pub fn encode(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardTrace)> {
        let trace = self.forward(x)?;
        Ok((trace.output().to_vec(), trace))
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.input_dim {
            return Err(Error::dim("encoder input", self.input_dim, x.len()));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for layer in &self.layers {
            let mut out = vec![0.0; layer.n_out()];
            layer.weights.tr_mul_vec(activations.last().unwrap(), &mut out);
            for (o, &b) in out.iter_mut().zip(&layer.bias) {
                *o = sigmoid(*o + b);
            }
            if !all_finite(&out) {
                return Err(Error::NonFinite("encoder activation".into()));
            }
            activations.push(out);
        }
        Ok(ForwardTrace { activations })
    }

    pub fn encode_sequence<F: AsRef<[f64]>>(&self, frames: &[F]) -> Result<Vec<(Vec<f64>, ForwardTrace)>> {
        frames.iter().map(|x| self.encode(x.as_ref())).collect()
    }

    /// Latent features only, without keeping traces.
    pub fn features<F: AsRef<[f64]>>(&self, frames: &[F]) -> Result<Vec<Vec<f64>>> {
        frames
            .iter()
            .map(|x| self.forward(x.as_ref()).map(|t| t.activations.into_iter().last().unwrap()))
            .collect()
    }

    pub fn zero_grads(&self) -> Vec<LayerGrad> {
        self.layers
            .iter()
            .map(|l| LayerGrad {
                weights: Matrix::zeros(l.n_in(), l.n_out()),
                bias: vec![0.0; l.n_out()],
            })
            .collect()
    }

    /// Gradients of a scalar loss with respect to every weight and bias, given
    /// `dl_dh`, the loss gradient at the encoder output.
    pub fn backprop(&self, trace: &ForwardTrace, dl_dh: &[f64]) -> Result<Vec<LayerGrad>> {
        let mut grads = self.zero_grads();
        self.backprop_into(trace, dl_dh, &mut grads)?;
        Ok(grads)
    }

    /// Like [`backprop`](Self::backprop) but adds into `grads`, so one buffer
    /// can collect the contributions of several frames.
    pub fn backprop_into(&self, trace: &ForwardTrace, dl_dh: &[f64], grads: &mut [LayerGrad]) -> Result<()> {
        if trace.activations.len() != self.layers.len() + 1 {
            return Err(Error::dim(
                "trace depth",
                self.layers.len() + 1,
                trace.activations.len(),
            ));
        }
        if dl_dh.len() != self.output_dim() {
            return Err(Error::dim("output gradient", self.output_dim(), dl_dh.len()));
        }
        if grads.len() != self.layers.len() {
            return Err(Error::dim("gradient buffer", self.layers.len(), grads.len()));
        }
        let mut upstream = dl_dh.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let a_out = &trace.activations[l + 1];
            let a_in = &trace.activations[l];
            if a_out.len() != layer.n_out() || a_in.len() != layer.n_in() {
                return Err(Error::dim("trace activation", layer.n_out(), a_out.len()));
            }
            let delta: Vec<f64> = upstream
                .iter()
                .zip(a_out)
                .map(|(&g, &a)| g * a * (1.0 - a))
                .collect();
            grads[l].weights.add_outer(1.0, a_in, &delta);
            for (gb, &d) in grads[l].bias.iter_mut().zip(&delta) {
                *gb += d;
            }
            if l > 0 {
                upstream = vec![0.0; layer.n_in()];
                layer.weights.mul_vec(&delta, &mut upstream);
            }
        }
        Ok(())
    }

    /// `W ← W − lr·(grad + λ₃·sign(W))` with `sign(0) = 0`; biases take the plain
    /// gradient step.
    pub fn sgd_step(&mut self, grads: &[LayerGrad], lr: f64, lambda3: f64) -> Result<()> {
        let steps = vec![lr; self.layers.len()];
        self.sgd_step_per_layer(grads, &steps, lambda3)
    }

    /// [`sgd_step`](Self::sgd_step) with a separate step size per layer.
    pub fn sgd_step_per_layer(&mut self, grads: &[LayerGrad], steps: &[f64], lambda3: f64) -> Result<()> {
        if grads.len() != self.layers.len() || steps.len() != self.layers.len() {
            return Err(Error::dim("gradient layers", self.layers.len(), grads.len()));
        }
        for ((layer, grad), &lr) in self.layers.iter_mut().zip(grads).zip(steps) {
            if grad.weights.shape() != layer.weights.shape() || grad.bias.len() != layer.bias.len() {
                return Err(Error::dim("layer gradient", layer.weights.rows(), grad.weights.rows()));
            }
            if lr == 0.0 {
                continue;
            }
            for (w, &g) in layer.weights.as_mut_slice().iter_mut().zip(grad.weights.as_slice()) {
                let sign = if *w > 0.0 {
                    1.0
                } else if *w < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                *w -= lr * (g + lambda3 * sign);
            }
            for (b, &g) in layer.bias.iter_mut().zip(&grad.bias) {
                *b -= lr * g;
            }
            if !(layer.weights.is_finite() && all_finite(&layer.bias)) {
                return Err(Error::NonFinite("encoder parameters after SGD step".into()));
            }
        }
        Ok(())
    }
}
