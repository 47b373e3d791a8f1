//! First-order linear-chain CRF over latent feature vectors.
//!
//! The energy of a labeling `y` of features `h_1..h_T` is
//!
//! ```text
//! E(h, y) = start[y_1] + end[y_T]
//!         + Σ_t (h_tᵀ W)[y_t] + bias[y_t]
//!         + Σ_{t≥2} A[y_{t-1}, y_t]
//! ```
//!
//! and `p(y | h) = exp(E(h, y)) / Z(h)`. All dynamic programs run in log
//! space.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::math::{all_finite, argmax, axpy, log_sum_exp, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct CrfParams {
    /// `K × K`, indexed `[previous, current]`.
    pub transitions: Matrix,
    /// `d_h × K`.
    pub emission: Matrix,
    pub bias: Vec<f64>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

/// Exact posteriors from forward-backward.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainMarginals {
    /// `T` rows of `K` unary posteriors.
    pub gamma: Vec<Vec<f64>>,
    /// `T − 1` pairwise posteriors, each `K × K` indexed `[y_t, y_{t+1}]`.
    pub xi: Vec<Matrix>,
    pub log_z: f64,
}

impl ChainMarginals {
    /// Point-mass "posteriors" concentrated on one labeling.
    pub fn hard(labels: &[usize], k: usize) -> Self {
        let gamma = labels.iter().map(|&l| one_hot(l, k)).collect();
        let xi = labels
            .windows(2)
            .map(|w| {
                let mut m = Matrix::zeros(k, k);
                m.set(w[0], w[1], 1.0);
                m
            })
            .collect();
        Self {
            gamma,
            xi,
            log_z: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub labels: Vec<usize>,
    /// Energy of `labels`.
    pub score: f64,
    /// `score − log Z`.
    pub log_prob: f64,
}

/// How the transition gradient treats adjacent positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PairwiseMode {
    /// Exact pairwise posteriors `ξ_{t−1,t}`.
    #[default]
    Exact,
    /// Product of unary posteriors `γ_{t−1} γ_tᵀ`; not the true gradient.
    OuterProduct,
}

/// Gradients for every CRF block plus the signal at each latent frame.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfGradients {
    pub transitions: Matrix,
    pub emission: Matrix,
    pub bias: Vec<f64>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    /// One vector of length `d_h` per frame.
    pub features: Vec<Vec<f64>>,
}

fn one_hot(label: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[label] = 1.0;
    v
}

impl CrfParams {
    pub fn zeros(feature_dim: usize, k: usize) -> Self {
        Self {
            transitions: Matrix::zeros(k, k),
            emission: Matrix::zeros(feature_dim, k),
            bias: vec![0.0; k],
            start: vec![0.0; k],
            end: vec![0.0; k],
        }
    }

    /// Emission weights from N(0, scale²); everything else zero.
    pub fn random_emission(feature_dim: usize, k: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(feature_dim, k);
        for w in p.emission.as_mut_slice() {
            let z: f64 = StandardNormal.sample(rng);
            *w = scale * z;
        }
        p
    }

    pub fn num_labels(&self) -> usize {
        self.bias.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.emission.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_labels();
        if self.transitions.shape() != (k, k) {
            return Err(Error::dim("transition matrix", k, self.transitions.rows()));
        }
        if self.emission.cols() != k {
            return Err(Error::dim("emission columns", k, self.emission.cols()));
        }
        if self.start.len() != k || self.end.len() != k {
            return Err(Error::dim("boundary factors", k, self.start.len()));
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("CRF parameters".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.transitions.is_finite()
            && self.emission.is_finite()
            && all_finite(&self.bias)
            && all_finite(&self.start)
            && all_finite(&self.end)
    }

    fn check_features<H: AsRef<[f64]>>(&self, h: &[H]) -> Result<()> {
        if h.is_empty() {
            return Err(Error::Invalid("empty sequence".into()));
        }
        let d = self.feature_dim();
        if let Some(x) = h.iter().find(|x| x.as_ref().len() != d) {
            return Err(Error::dim("latent feature", d, x.as_ref().len()));
        }
        Ok(())
    }

    fn check_labels(&self, t: usize, y: &[usize]) -> Result<()> {
        if y.len() != t {
            return Err(Error::dim("label sequence", t, y.len()));
        }
        let k = self.num_labels();
        if let Some(&label) = y.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, k });
        }
        Ok(())
    }

    /// Per-position label scores with the start and end factors folded into
    /// the first and last rows.
    pub fn unary_scores<H: AsRef<[f64]>>(&self, h: &[H]) -> Result<Vec<Vec<f64>>> {
        self.check_features(h)?;
        let k = self.num_labels();
        let t_len = h.len();
        let mut scores = Vec::with_capacity(t_len);
        for (t, x) in h.iter().enumerate() {
            let mut s = vec![0.0; k];
            self.emission.tr_mul_vec(x.as_ref(), &mut s);
            axpy(1.0, &self.bias, &mut s);
            if t == 0 {
                axpy(1.0, &self.start, &mut s);
            }
            if t + 1 == t_len {
                axpy(1.0, &self.end, &mut s);
            }
            scores.push(s);
        }
        Ok(scores)
    }

    pub fn energy<H: AsRef<[f64]>>(&self, h: &[H], y: &[usize]) -> Result<f64> {
        self.check_features(h)?;
        self.check_labels(h.len(), y)?;
        let mut e = self.start[y[0]] + self.end[y[y.len() - 1]];
        for (x, &label) in h.iter().zip(y) {
            let x = x.as_ref();
            let emit: f64 = (0..x.len()).map(|i| x[i] * self.emission.get(i, label)).sum();
            e += emit + self.bias[label];
        }
        for w in y.windows(2) {
            e += self.transitions.get(w[0], w[1]);
        }
        Ok(e)
    }

    fn forward_table(&self, unary: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let k = self.num_labels();
        let mut alpha = Vec::with_capacity(unary.len());
        alpha.push(unary[0].clone());
        let mut buf = vec![0.0; k];
        for s in &unary[1..] {
            let prev = alpha.last().unwrap();
            let row = (0..k)
                .map(|j| {
                    for i in 0..k {
                        buf[i] = prev[i] + self.transitions.get(i, j);
                    }
                    s[j] + log_sum_exp(&buf)
                })
                .collect();
            alpha.push(row);
        }
        alpha
    }

    fn backward_table(&self, unary: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let k = self.num_labels();
        let t_len = unary.len();
        let mut beta = vec![vec![0.0; k]; t_len];
        let mut buf = vec![0.0; k];
        for t in (0..t_len - 1).rev() {
            for i in 0..k {
                for j in 0..k {
                    buf[j] = self.transitions.get(i, j) + unary[t + 1][j] + beta[t + 1][j];
                }
                beta[t][i] = log_sum_exp(&buf);
            }
        }
        beta
    }

    /// `log Z(h)` by the forward recursion.
    pub fn log_partition<H: AsRef<[f64]>>(&self, h: &[H]) -> Result<f64> {
        let unary = self.unary_scores(h)?;
        let alpha = self.forward_table(&unary);
        let log_z = log_sum_exp(alpha.last().unwrap());
        if !log_z.is_finite() {
            return Err(Error::NonFinite("log partition".into()));
        }
        Ok(log_z)
    }

    /// Forward-backward posteriors. `log_z` comes from the backward pass, so it
    /// is an independent check on [`log_partition`](Self::log_partition).
    pub fn marginals<H: AsRef<[f64]>>(&self, h: &[H]) -> Result<ChainMarginals> {
        let unary = self.unary_scores(h)?;
        let k = self.num_labels();
        let alpha = self.forward_table(&unary);
        let beta = self.backward_table(&unary);
        let first: Vec<f64> = (0..k).map(|j| unary[0][j] + beta[0][j]).collect();
        let log_z = log_sum_exp(&first);
        if !log_z.is_finite() {
            return Err(Error::NonFinite("log partition".into()));
        }
        let gamma: Vec<Vec<f64>> = alpha
            .iter()
            .zip(&beta)
            .map(|(a, b)| (0..k).map(|j| (a[j] + b[j] - log_z).exp()).collect())
            .collect();
        let xi = (0..unary.len() - 1)
            .map(|t| {
                Matrix::from_fn(k, k, |i, j| {
                    (alpha[t][i] + self.transitions.get(i, j) + unary[t + 1][j] + beta[t + 1][j] - log_z)
                        .exp()
                })
            })
            .collect();
        Ok(ChainMarginals { gamma, xi, log_z })
    }

    /// Highest-energy labeling. Ties go to the smaller label index, both when
    /// choosing predecessors and when choosing the final label.
    pub fn viterbi<H: AsRef<[f64]>>(&self, h: &[H]) -> Result<DecodeResult> {
        let unary = self.unary_scores(h)?;
        let labels = self.best_path(&unary);
        let score = self.energy(h, &labels)?;
        let log_z = log_sum_exp(self.forward_table(&unary).last().unwrap());
        Ok(DecodeResult {
            labels,
            score,
            log_prob: score - log_z,
        })
    }

    /// Viterbi labels only, skipping the partition function.
    pub fn decode<H: AsRef<[f64]>>(&self, h: &[H]) -> Result<Vec<usize>> {
        let unary = self.unary_scores(h)?;
        Ok(self.best_path(&unary))
    }

    fn best_path(&self, unary: &[Vec<f64>]) -> Vec<usize> {
        let k = self.num_labels();
        let t_len = unary.len();
        let mut delta = unary[0].clone();
        let mut back = vec![vec![0usize; k]; t_len];
        let mut next = vec![0.0; k];
        for t in 1..t_len {
            for j in 0..k {
                let mut best = 0;
                let mut best_score = delta[0] + self.transitions.get(0, j);
                for i in 1..k {
                    let s = delta[i] + self.transitions.get(i, j);
                    if s > best_score {
                        best = i;
                        best_score = s;
                    }
                }
                back[t][j] = best;
                next[j] = best_score + unary[t][j];
            }
            std::mem::swap(&mut delta, &mut next);
        }
        let mut labels = vec![argmax(&delta); t_len];
        for t in (1..t_len).rev() {
            labels[t - 1] = back[t][labels[t]];
        }
        labels
    }

    /// Ascent direction of `log p(y | h)` with exact pairwise posteriors.
    pub fn loglik_gradients<H: AsRef<[f64]>>(&self, h: &[H], y: &[usize]) -> Result<CrfGradients> {
        self.loglik_gradients_with(h, y, PairwiseMode::Exact)
    }

    pub fn loglik_gradients_with<H: AsRef<[f64]>>(
        &self,
        h: &[H],
        y: &[usize],
        mode: PairwiseMode,
    ) -> Result<CrfGradients> {
        self.check_labels(h.len(), y)?;
        let mut m = self.marginals(h)?;
        if mode == PairwiseMode::OuterProduct {
            let k = self.num_labels();
            m.xi = m
                .gamma
                .windows(2)
                .map(|g| Matrix::from_fn(k, k, |i, j| g[0][i] * g[1][j]))
                .collect();
        }
        self.expected_gradients(h, y, &m)
    }

    /// `∂/∂θ [E(h, y) − E(h, y*)]`, the structured perceptron update.
    pub fn perceptron_gradients<H: AsRef<[f64]>>(
        &self,
        h: &[H],
        y: &[usize],
        y_star: &[usize],
    ) -> Result<CrfGradients> {
        self.check_features(h)?;
        self.check_labels(h.len(), y_star)?;
        self.expected_gradients(h, y, &ChainMarginals::hard(y_star, self.num_labels()))
    }

    /// Gold feature counts minus the counts expected under `posteriors`.
    pub fn expected_gradients<H: AsRef<[f64]>>(
        &self,
        h: &[H],
        y: &[usize],
        posteriors: &ChainMarginals,
    ) -> Result<CrfGradients> {
        self.check_features(h)?;
        self.check_labels(h.len(), y)?;
        let k = self.num_labels();
        let t_len = h.len();
        if posteriors.gamma.len() != t_len || posteriors.xi.len() != t_len - 1 {
            return Err(Error::dim("posterior length", t_len, posteriors.gamma.len()));
        }
        let mut g = CrfGradients {
            transitions: Matrix::zeros(k, k),
            emission: Matrix::zeros(self.feature_dim(), k),
            bias: vec![0.0; k],
            start: vec![0.0; k],
            end: vec![0.0; k],
            features: Vec::with_capacity(t_len),
        };
        for (t, (x, &label)) in h.iter().zip(y).enumerate() {
            let mut diff = one_hot(label, k);
            axpy(-1.0, &posteriors.gamma[t], &mut diff);
            g.emission.add_outer(1.0, x.as_ref(), &diff);
            axpy(1.0, &diff, &mut g.bias);
            if t == 0 {
                axpy(1.0, &diff, &mut g.start);
            }
            if t + 1 == t_len {
                axpy(1.0, &diff, &mut g.end);
            }
            let mut dh = vec![0.0; self.feature_dim()];
            self.emission.mul_vec(&diff, &mut dh);
            g.features.push(dh);
        }
        for (t, w) in y.windows(2).enumerate() {
            g.transitions.add_at(w[0], w[1], 1.0);
            g.transitions.add_scaled(-1.0, &posteriors.xi[t]);
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_instance(k: usize, t: usize, d: usize, seed: u64) -> (CrfParams, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut n = || -> f64 { StandardNormal.sample(&mut rng) };
        let p = CrfParams {
            transitions: Matrix::from_fn(k, k, |_, _| n()),
            emission: Matrix::from_fn(d, k, |_, _| n()),
            bias: (0..k).map(|_| n()).collect(),
            start: (0..k).map(|_| n()).collect(),
            end: (0..k).map(|_| n()).collect(),
        };
        let h = (0..t).map(|_| (0..d).map(|_| n()).collect()).collect();
        (p, h)
    }

    #[test]
    fn zero_params() {
        let p = CrfParams::zeros(3, 4);
        let h = vec![vec![0.3, -1.0, 2.0]; 5];
        assert_eq!(p.energy(&h, &[0, 1, 2, 3, 0]).unwrap(), 0.0);
        assert!((p.log_partition(&h).unwrap() - 5.0 * 4f64.ln()).abs() < 1e-12);
        let m = p.marginals(&h).unwrap();
        for row in &m.gamma {
            for &g in row {
                assert!((g - 0.25).abs() < 1e-14);
            }
        }
        for x in &m.xi {
            for &v in x.as_slice() {
                assert!((v - 1.0 / 16.0).abs() < 1e-14);
            }
        }
        assert_eq!(p.viterbi(&h).unwrap().labels, vec![0; 5]);
        let g = p.loglik_gradients(&h, &[2, 1, 2, 3, 0]).unwrap();
        for (got, want) in g.start.iter().zip([-0.25, -0.25, 0.75, -0.25]) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn single_frame_energy_and_partition() {
        let (p, h) = random_instance(3, 1, 2, 9);
        for y in 0..3 {
            let expect = p.start[y] + p.end[y] + h[0][0] * p.emission.get(0, y) + h[0][1] * p.emission.get(1, y) + p.bias[y];
            assert!((p.energy(&h, &[y]).unwrap() - expect).abs() < 1e-12);
        }
        let scores: Vec<f64> = (0..3).map(|y| p.energy(&h, &[y]).unwrap()).collect();
        assert!((p.log_partition(&h).unwrap() - log_sum_exp(&scores)).abs() < 1e-12);
    }

    #[test]
    fn energy_term_by_term() {
        let (p, h) = random_instance(3, 4, 3, 17);
        let y = [2, 0, 0, 1];
        let mut e = p.start[2] + p.end[1];
        for t in 0..4 {
            for i in 0..3 {
                e += h[t][i] * p.emission.get(i, y[t]);
            }
            e += p.bias[y[t]];
        }
        e += p.transitions.get(2, 0) + p.transitions.get(0, 0) + p.transitions.get(0, 1);
        assert!((p.energy(&h, &y).unwrap() - e).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let p = CrfParams::zeros(2, 3);
        let h = vec![vec![0.0, 1.0]; 2];
        assert!(p.energy(&h, &[0]).is_err());
        assert!(matches!(p.energy(&h, &[0, 3]), Err(Error::LabelOutOfRange { label: 3, k: 3 })));
        assert!(p.log_partition(&Vec::<Vec<f64>>::new()).is_err());
        assert!(p.viterbi(&[vec![1.0]]).is_err());
        assert!(p.perceptron_gradients(&h, &[0, 1], &[0]).is_err());
    }

    #[test]
    fn perceptron_single_frame_by_hand() {
        let (p, h) = random_instance(2, 1, 3, 4);
        let g = p.perceptron_gradients(&h, &[0], &[1]).unwrap();
        for i in 0..3 {
            assert_eq!(g.emission.get(i, 0), h[0][i]);
            assert_eq!(g.emission.get(i, 1), -h[0][i]);
        }
        assert_eq!(g.bias, vec![1.0, -1.0]);
        assert_eq!(g.start, vec![1.0, -1.0]);
        assert_eq!(g.end, vec![1.0, -1.0]);
        assert!(g.transitions.as_slice().iter().all(|&v| v == 0.0));
        for i in 0..3 {
            assert_eq!(g.features[0][i], p.emission.get(i, 0) - p.emission.get(i, 1));
        }
        let same = p.perceptron_gradients(&h, &[1], &[1]).unwrap();
        assert!(same.emission.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn certain_model_has_zero_gradient() {
        let mut p = CrfParams::zeros(1, 3);
        p.bias = vec![0.0, 800.0, 0.0];
        let h = vec![vec![0.0]; 3];
        let g = p.loglik_gradients(&h, &[1, 1, 1]).unwrap();
        assert!(g.bias.iter().all(|&v| v.abs() < 1e-12));
        assert!(g.transitions.as_slice().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn planted_sequence_recovered() {
        let k = 26;
        let planted = [7, 4, 11, 11, 14, 22, 14, 17];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = CrfParams::random_emission(k, k, 1.0, &mut rng);
        for v in p.transitions.as_mut_slice() {
            *v = rng.random::<f64>() - 0.5;
        }
        // one-hot features; the planted label's emission leads by a margin of 10
        let h: Vec<Vec<f64>> = planted.iter().map(|&l| one_hot(l, k)).collect();
        for &l in &planted {
            let row_max = p.emission.row(l).iter().copied().fold(f64::MIN, f64::max);
            p.emission.set(l, l, row_max + 10.0);
        }
        assert_eq!(p.viterbi(&h).unwrap().labels, planted);
    }

    #[test]
    fn outer_product_mode_differs_only_in_transitions() {
        let (p, h) = random_instance(3, 4, 2, 21);
        let y = [0, 2, 1, 1];
        let exact = p.loglik_gradients(&h, &y).unwrap();
        let approx = p.loglik_gradients_with(&h, &y, PairwiseMode::OuterProduct).unwrap();
        assert_eq!(exact.emission, approx.emission);
        assert_eq!(exact.bias, approx.bias);
        assert_ne!(exact.transitions, approx.transitions);
    }
}
