//! Independent oracles shared by the integration tests: brute-force
//! enumeration over label sequences, a term-by-term energy, and central
//! finite differences.

#![allow(dead_code)]

use deepcrf::data::LabeledSequence;
use deepcrf::math::Matrix;
use deepcrf::{CrfParams, EncoderStack, Layer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// CRF with every entry drawn from N(0, 1).
pub fn random_crf(rng: &mut impl Rng, d_h: usize, k: usize) -> CrfParams {
    CrfParams {
        transitions: Matrix::from_vec(k, k, normal_vec(rng, k * k)).unwrap(),
        emission: Matrix::from_vec(d_h, k, normal_vec(rng, d_h * k)).unwrap(),
        bias: normal_vec(rng, k),
        start: normal_vec(rng, k),
        end: normal_vec(rng, k),
    }
}

pub fn random_features(rng: &mut impl Rng, t: usize, d_h: usize) -> Vec<Vec<f64>> {
    (0..t).map(|_| normal_vec(rng, d_h)).collect()
}

pub fn random_labels(rng: &mut impl Rng, t: usize, k: usize) -> Vec<usize> {
    (0..t).map(|_| rng.random_range(0..k)).collect()
}

/// Every label sequence of length `t` over `k` labels, lexicographic order.
pub fn all_sequences(k: usize, t: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..t {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..k).map(move |l| {
                    let mut q = p.clone();
                    q.push(l);
                    q
                })
            })
            .collect();
    }
    out
}

pub fn energy(p: &CrfParams, h: &[Vec<f64>], y: &[usize]) -> f64 {
    let t_len = y.len();
    let mut e = p.start[y[0]] + p.end[y[t_len - 1]];
    for t in 0..t_len {
        for i in 0..h[t].len() {
            e += h[t][i] * p.emission.get(i, y[t]);
        }
        e += p.bias[y[t]];
        if t > 0 {
            e += p.transitions.get(y[t - 1], y[t]);
        }
    }
    e
}

fn lse(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub struct Enumeration {
    pub log_z: f64,
    pub best: Vec<usize>,
    pub best_score: f64,
    pub gamma: Vec<Vec<f64>>,
    /// `[t][i][j]` = P(y_t = i, y_{t+1} = j).
    pub xi: Vec<Vec<Vec<f64>>>,
    pub total_prob: f64,
}

pub fn enumerate(p: &CrfParams, h: &[Vec<f64>]) -> Enumeration {
    let k = p.num_labels();
    let t_len = h.len();
    let seqs = all_sequences(k, t_len);
    let energies: Vec<f64> = seqs.iter().map(|y| energy(p, h, y)).collect();
    let log_z = lse(&energies);
    let mut best = 0;
    for (i, &e) in energies.iter().enumerate() {
        if e > energies[best] {
            best = i;
        }
    }
    let mut gamma = vec![vec![0.0; k]; t_len];
    let mut xi = vec![vec![vec![0.0; k]; k]; t_len.saturating_sub(1)];
    let mut total_prob = 0.0;
    for (y, &e) in seqs.iter().zip(&energies) {
        let pr = (e - log_z).exp();
        total_prob += pr;
        for t in 0..t_len {
            gamma[t][y[t]] += pr;
            if t + 1 < t_len {
                xi[t][y[t]][y[t + 1]] += pr;
            }
        }
    }
    Enumeration {
        log_z,
        best: seqs[best].clone(),
        best_score: energies[best],
        gamma,
        xi,
        total_prob,
    }
}

pub fn log_prob(p: &CrfParams, h: &[Vec<f64>], y: &[usize]) -> f64 {
    energy(p, h, y) - enumerate(p, h).log_z
}

/// `|a − b| / max(|a|, |b|, 1)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// Random logistic stack with N(0, 1) weights and biases.
pub fn random_encoder(rng: &mut impl Rng, d: usize, sizes: &[usize]) -> EncoderStack {
    let mut layers = Vec::new();
    let mut n_in = d;
    for &n_out in sizes {
        layers.push(Layer {
            weights: Matrix::from_vec(n_in, n_out, normal_vec(rng, n_in * n_out)).unwrap(),
            bias: normal_vec(rng, n_out),
        });
        n_in = n_out;
    }
    EncoderStack::new(d, layers).unwrap()
}

/// Sequences of a 2-label toy chain task that a linear unary model separates:
/// frame `[1, 0, noise]` is label 0, `[0, 1, noise]` label 1.
pub fn toy_sequences(seed: u64, n: usize) -> Vec<LabeledSequence> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let t_len = r.random_range(1..=3);
            let labels: Vec<usize> = (0..t_len).map(|_| r.random_range(0..2)).collect();
            let frames = labels
                .iter()
                .map(|&l| {
                    let noise: u8 = r.random_range(0..2);
                    if l == 0 {
                        vec![1, 0, noise]
                    } else {
                        vec![0, 1, noise]
                    }
                })
                .collect();
            LabeledSequence {
                word_id: i.to_string(),
                fold: None,
                frames,
                labels,
            }
        })
        .collect()
}
