//! Binary-binary restricted Boltzmann machines trained with one-step
//! contrastive divergence, stacked greedily to initialize the encoder.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::{EncoderStack, Layer};
use crate::error::{Error, Result};
use crate::math::{all_finite, sigmoid, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct Rbm {
    /// `n_visible × n_hidden`
    pub weights: Matrix,
    pub visible_bias: Vec<f64>,
    pub hidden_bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 30,
            batch_size: 50,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!(
                "pretraining learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Invalid("pretraining epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("pretraining batch size must be at least 1".into()));
        }
        Ok(())
    }
}

impl Rbm {
    pub fn zeros(n_visible: usize, n_hidden: usize) -> Self {
        Self {
            weights: Matrix::zeros(n_visible, n_hidden),
            visible_bias: vec![0.0; n_visible],
            hidden_bias: vec![0.0; n_hidden],
        }
    }

    /// Weights drawn from N(0, 0.01²), zero biases.
    pub fn random(n_visible: usize, n_hidden: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 0.01).unwrap();
        let weights = Matrix::from_fn(n_visible, n_hidden, |_, _| normal.sample(rng));
        Self {
            weights,
            visible_bias: vec![0.0; n_visible],
            hidden_bias: vec![0.0; n_hidden],
        }
    }

    pub fn n_visible(&self) -> usize {
        self.weights.rows()
    }

    pub fn n_hidden(&self) -> usize {
        self.weights.cols()
    }

    /// `σ(Wᵀv + c)`
    pub fn hidden_probs(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.n_visible() {
            return Err(Error::dim("visible vector", self.n_visible(), v.len()));
        }
        let mut h = vec![0.0; self.n_hidden()];
        self.weights.tr_mul_vec(v, &mut h);
        for (hj, &c) in h.iter_mut().zip(&self.hidden_bias) {
            *hj = sigmoid(*hj + c);
        }
        Ok(h)
    }

    /// `σ(Wh + b)`
    pub fn visible_probs(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.n_hidden() {
            return Err(Error::dim("hidden vector", self.n_hidden(), h.len()));
        }
        let mut v = vec![0.0; self.n_visible()];
        self.weights.mul_vec(h, &mut v);
        for (vi, &b) in v.iter_mut().zip(&self.visible_bias) {
            *vi = sigmoid(*vi + b);
        }
        Ok(v)
    }

    /// Same machine with visible and hidden roles swapped.
    pub fn flipped(&self) -> Rbm {
        Rbm {
            weights: self.weights.transpose(),
            visible_bias: self.hidden_bias.clone(),
            hidden_bias: self.visible_bias.clone(),
        }
    }

    /// One CD-1 update averaged over `batch`.
    ///
    /// For each example the hidden states are sampled once (`u < p` with `u`
    /// drawn uniformly from `rng`, hidden units in order) to produce the
    /// reconstruction; both correlation terms use probabilities.
    pub fn cd1_step<R: Rng>(&mut self, batch: &[&[f64]], lr: f64, rng: &mut R) -> Result<()> {
        if batch.is_empty() {
            return Ok(());
        }
        let (nv, nh) = (self.n_visible(), self.n_hidden());
        let mut dw = Matrix::zeros(nv, nh);
        let mut dv = vec![0.0; nv];
        let mut dh = vec![0.0; nh];
        let mut sample = vec![0.0; nh];
        for &v in batch {
            let h_pos = self.hidden_probs(v)?;
            for (s, &p) in sample.iter_mut().zip(&h_pos) {
                *s = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
            }
            let v_neg = self.visible_probs(&sample)?;
            let h_neg = self.hidden_probs(&v_neg)?;
            dw.add_outer(1.0, v, &h_pos);
            dw.add_outer(-1.0, &v_neg, &h_neg);
            for i in 0..nv {
                dv[i] += v[i] - v_neg[i];
            }
            for j in 0..nh {
                dh[j] += h_pos[j] - h_neg[j];
            }
        }
        let scale = lr / batch.len() as f64;
        if !(dw.is_finite() && all_finite(&dv) && all_finite(&dh)) {
            return Err(Error::NonFinite("CD-1 update".into()));
        }
        self.weights.add_scaled(scale, &dw);
        for (b, g) in self.visible_bias.iter_mut().zip(&dv) {
            *b += scale * g;
        }
        for (c, g) in self.hidden_bias.iter_mut().zip(&dh) {
            *c += scale * g;
        }
        if !(self.weights.is_finite() && all_finite(&self.visible_bias) && all_finite(&self.hidden_bias)) {
            return Err(Error::NonFinite("RBM parameters".into()));
        }
        Ok(())
    }

    /// Mean binary cross-entropy between `data` and its deterministic
    /// reconstruction `visible_probs(hidden_probs(v))`.
    pub fn reconstruction_cross_entropy(&self, data: &[Vec<f64>]) -> Result<f64> {
        let mut total = 0.0;
        for v in data {
            let r = self.visible_probs(&self.hidden_probs(v)?)?;
            total -= v
                .iter()
                .zip(&r)
                .map(|(&x, &p)| x * p.ln() + (1.0 - x) * (1.0 - p).ln())
                .sum::<f64>();
        }
        Ok(total / data.len() as f64)
    }

    /// Trains on `data` for `cfg.epochs` epochs of shuffled mini-batches.
    /// `on_epoch` sees the machine after every epoch.
    pub fn train(
        &mut self,
        data: &[Vec<f64>],
        cfg: &PretrainConfig,
        rng: &mut ChaCha8Rng,
        mut on_epoch: impl FnMut(usize, &Rbm),
    ) -> Result<()> {
        cfg.validate()?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&[f64]> = chunk.iter().map(|&i| data[i].as_slice()).collect();
                self.cd1_step(&batch, cfg.learning_rate, rng)?;
            }
            on_epoch(epoch + 1, self);
        }
        Ok(())
    }
}

/// Greedy layer-wise pretraining. Layer `l` is an RBM trained on the hidden
/// probabilities of layer `l − 1`; the result keeps weights and hidden biases.
pub fn pretrain_stack(
    data: &[Vec<f64>],
    layer_sizes: &[usize],
    cfg: &PretrainConfig,
) -> Result<EncoderStack> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("no pretraining data".into()));
    }
    if layer_sizes.is_empty() || layer_sizes.contains(&0) {
        return Err(Error::Invalid(format!("bad layer sizes {layer_sizes:?}")));
    }
    let d = data[0].len();
    if let Some(v) = data.iter().find(|v| v.len() != d) {
        return Err(Error::dim("pretraining frame", d, v.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut layers = Vec::with_capacity(layer_sizes.len());
    let mut input: Vec<Vec<f64>> = data.to_vec();
    let mut n_in = d;
    for (l, &n_out) in layer_sizes.iter().enumerate() {
        let mut rbm = Rbm::random(n_in, n_out, &mut rng);
        rbm.train(&input, cfg, &mut rng, |epoch, rbm| {
            if log::log_enabled!(log::Level::Debug) {
                let ce = rbm.reconstruction_cross_entropy(&input[..input.len().min(500)]);
                log::debug!("rbm layer {l} epoch {epoch}: reconstruction CE {ce:?}");
            }
        })?;
        log::info!("pretrained layer {} ({n_in} -> {n_out})", l + 1);
        if l + 1 < layer_sizes.len() {
            input = input
                .iter()
                .map(|v| rbm.hidden_probs(v))
                .collect::<Result<_>>()?;
        }
        layers.push(Layer {
            weights: rbm.weights,
            bias: rbm.hidden_bias,
        });
        n_in = n_out;
    }
    EncoderStack::new(d, layers)
}
