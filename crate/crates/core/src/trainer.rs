//! Hybrid online training: structured perceptron updates for the CRF
//! parameters and L1-regularized SGD for the encoder, one sequence at a time.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::crf::{CrfGradients, CrfParams, DecodeResult};
use crate::data::{LabelAlphabet, LabeledSequence};
use crate::encoder::{EncoderStack, ForwardTrace};
use crate::error::{Error, Result};
use crate::eval::word_error_rate;
use crate::math::axpy;
use crate::rbm::{pretrain_stack, PretrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub sweeps: usize,
    pub base_step: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub layer_sizes: Vec<usize>,
    pub seed: u64,
    pub heldout_fraction: f64,
    pub init_scale: f64,
    /// Greedy RBM pretraining of the encoder; `None` starts from small random
    /// weights.
    pub pretrain: Option<PretrainConfig>,
    /// Keep the transition matrix at zero (ablation).
    pub freeze_transitions: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sweeps: 100,
            base_step: 0.1,
            lambda2: 0.0,
            lambda3: 2e-4,
            layer_sizes: vec![400, 200, 100],
            seed: 0,
            heldout_fraction: 0.05,
            init_scale: 1.0,
            pretrain: Some(PretrainConfig::default()),
            freeze_transitions: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(Error::Invalid(m));
        if self.sweeps == 0 {
            return invalid("sweeps must be at least 1".into());
        }
        if !(self.base_step > 0.0 && self.base_step.is_finite()) {
            return invalid(format!("base step must be positive, got {}", self.base_step));
        }
        if !(self.lambda2 >= 0.0 && self.lambda3 >= 0.0) {
            return invalid("regularization constants must be nonnegative".into());
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return invalid(format!(
                "held-out fraction must lie in (0, 1), got {}",
                self.heldout_fraction
            ));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return invalid(format!("init scale must be positive, got {}", self.init_scale));
        }
        if self.layer_sizes.contains(&0) {
            return invalid("layer sizes must be positive".into());
        }
        if let Some(p) = &self.pretrain {
            p.validate()?;
        }
        Ok(())
    }

    /// `key = value` lines in a fixed order; the fingerprint hashes this text.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("sweeps".to_string(), self.sweeps.to_string()),
            ("base_step".to_string(), format!("{:e}", self.base_step)),
            ("lambda2".to_string(), format!("{:e}", self.lambda2)),
            ("lambda3".to_string(), format!("{:e}", self.lambda3)),
            ("layer_sizes".to_string(), join_sizes(&self.layer_sizes)),
            ("seed".to_string(), self.seed.to_string()),
            ("heldout_fraction".to_string(), format!("{:e}", self.heldout_fraction)),
            ("init_scale".to_string(), format!("{:e}", self.init_scale)),
            ("freeze_transitions".to_string(), self.freeze_transitions.to_string()),
        ];
        match &self.pretrain {
            Some(p) => kv.extend([
                ("pretrain_learning_rate".to_string(), format!("{:e}", p.learning_rate)),
                ("pretrain_epochs".to_string(), p.epochs.to_string()),
                ("pretrain_batch_size".to_string(), p.batch_size.to_string()),
                ("pretrain_seed".to_string(), p.seed.to_string()),
            ]),
            None => kv.push(("pretrain".to_string(), "none".to_string())),
        }
        kv
    }

    pub fn fingerprint(&self) -> String {
        let text: String = self
            .to_kv()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        short_hash(text.as_bytes())
    }
}

pub(crate) fn join_sizes(sizes: &[usize]) -> String {
    sizes.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub(crate) fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Fingerprint over word ids, labels and frame bits.
pub fn dataset_fingerprint(sequences: &[LabeledSequence]) -> String {
    let mut hasher = Sha256::new();
    for s in sequences {
        hasher.update(s.word_id.as_bytes());
        hasher.update([0]);
        for (label, frame) in s.labels.iter().zip(&s.frames) {
            hasher.update((*label as u64).to_le_bytes());
            hasher.update(frame);
        }
    }
    hasher.finalize()[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelMeta {
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
    pub sweeps_completed: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeepCrfModel {
    pub encoder: EncoderStack,
    pub crf: CrfParams,
    pub alphabet: LabelAlphabet,
    pub meta: ModelMeta,
}

impl DeepCrfModel {
    pub fn new(encoder: EncoderStack, crf: CrfParams, alphabet: LabelAlphabet, meta: ModelMeta) -> Result<Self> {
        if encoder.output_dim() != crf.feature_dim() {
            return Err(Error::dim("CRF emission input", encoder.output_dim(), crf.feature_dim()));
        }
        if alphabet.len() != crf.num_labels() {
            return Err(Error::dim("alphabet size", crf.num_labels(), alphabet.len()));
        }
        crf.validate()?;
        Ok(Self {
            encoder,
            crf,
            alphabet,
            meta,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.crf.is_finite()
    }

    pub fn predict<F: AsRef<[f64]>>(&self, frames: &[F]) -> Result<Vec<usize>> {
        self.crf.decode(&self.encoder.features(frames)?)
    }

    pub fn decode<F: AsRef<[f64]>>(&self, frames: &[F]) -> Result<DecodeResult> {
        self.crf.viterbi(&self.encoder.features(frames)?)
    }
}

/// CRF weights drawn from N(0, init_scale² / d_h); transitions, biases and
/// boundary factors start at zero. Without a pretrained stack the encoder
/// weights are N(0, 0.01²).
pub fn init_model(
    d: usize,
    layer_sizes: &[usize],
    alphabet: &LabelAlphabet,
    pretrained: Option<EncoderStack>,
    seed: u64,
    init_scale: f64,
) -> Result<DeepCrfModel> {
    let mut crf_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc_rng = ChaCha8Rng::seed_from_u64(seed);
    enc_rng.set_stream(1);
    let encoder = match pretrained {
        Some(stack) => {
            if stack.input_dim() != d {
                return Err(Error::dim("pretrained encoder input", d, stack.input_dim()));
            }
            if stack.layer_sizes() != layer_sizes {
                return Err(Error::Invalid(format!(
                    "pretrained layers {:?} do not match configured {:?}",
                    stack.layer_sizes(),
                    layer_sizes
                )));
            }
            stack
        }
        None => EncoderStack::random(d, layer_sizes, 0.01, &mut enc_rng),
    };
    let dh = encoder.output_dim();
    let crf = CrfParams::random_emission(dh, alphabet.len(), init_scale / (dh as f64).sqrt(), &mut crf_rng);
    DeepCrfModel::new(encoder, crf, alphabet.clone(), ModelMeta::default())
}

/// Step size per parameter block: `base / fan-in`. The emission matrix and
/// each encoder layer see as many inputs as their row count; transitions,
/// biases and boundary factors are single-input indicator terms.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSizes {
    pub emission: f64,
    pub factors: f64,
    pub encoder: Vec<f64>,
}

impl StepSizes {
    pub fn from_base(base: f64, model: &DeepCrfModel) -> Self {
        Self {
            emission: base / model.crf.feature_dim() as f64,
            factors: base,
            encoder: model
                .encoder
                .layers()
                .iter()
                .map(|l| base / l.n_in() as f64)
                .collect(),
        }
    }

    /// One step for all of θ and one for all of ω.
    pub fn uniform(eta_theta: f64, eta_omega: f64, n_layers: usize) -> Self {
        Self {
            emission: eta_theta,
            factors: eta_theta,
            encoder: vec![eta_omega; n_layers],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceReport {
    pub decoded: Vec<usize>,
    pub mistake: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateOptions {
    pub lambda2: f64,
    pub lambda3: f64,
    pub freeze_transitions: bool,
}

impl UpdateOptions {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            lambda2: cfg.lambda2,
            lambda3: cfg.lambda3,
            freeze_transitions: cfg.freeze_transitions,
        }
    }
}

fn step_vec(param: &mut [f64], grad: &[f64], eta: f64, lambda2: f64) {
    if lambda2 > 0.0 {
        for (p, &g) in param.iter_mut().zip(grad) {
            *p += eta * (g - 2.0 * lambda2 * *p);
        }
    } else {
        axpy(eta, grad, param);
    }
}

fn apply_crf_update(crf: &mut CrfParams, g: &CrfGradients, steps: &StepSizes, opts: &UpdateOptions) {
    step_vec(crf.emission.as_mut_slice(), g.emission.as_slice(), steps.emission, opts.lambda2);
    step_vec(&mut crf.bias, &g.bias, steps.factors, opts.lambda2);
    step_vec(&mut crf.start, &g.start, steps.factors, opts.lambda2);
    step_vec(&mut crf.end, &g.end, steps.factors, opts.lambda2);
    if !opts.freeze_transitions {
        step_vec(crf.transitions.as_mut_slice(), g.transitions.as_slice(), steps.factors, opts.lambda2);
    }
}

/// One online step on one sequence. Decodes with the current model; on a
/// mistake, moves θ along `∂/∂θ [E(h, y) − E(h, y*)]` and then ω down the
/// gradient of the same objective (backpropagated from `−W(y_t − y*_t)`) plus
/// the L1 subgradient. A correct decode changes nothing.
pub fn train_sequence<F: AsRef<[f64]>>(
    model: &mut DeepCrfModel,
    frames: &[F],
    labels: &[usize],
    steps: &StepSizes,
    opts: &UpdateOptions,
) -> Result<SequenceReport> {
    if frames.len() != labels.len() {
        return Err(Error::dim("sequence labels", frames.len(), labels.len()));
    }
    let traces: Vec<ForwardTrace> = frames
        .iter()
        .map(|x| model.encoder.forward(x.as_ref()))
        .collect::<Result<_>>()?;
    let h: Vec<&[f64]> = traces.iter().map(ForwardTrace::output).collect();
    let decoded = model.crf.decode(&h)?;
    if decoded == labels {
        return Ok(SequenceReport {
            decoded,
            mistake: false,
        });
    }
    let g = model.crf.perceptron_gradients(&h, labels, &decoded)?;
    apply_crf_update(&mut model.crf, &g, steps, opts);
    if !model.crf.is_finite() {
        return Err(Error::NonFinite("CRF parameters after perceptron update".into()));
    }

    if !model.encoder.is_identity() && steps.encoder.iter().any(|&s| s != 0.0) {
        let mut grads = model.encoder.zero_grads();
        for (t, trace) in traces.iter().enumerate() {
            if labels[t] == decoded[t] {
                continue;
            }
            let dl_dh: Vec<f64> = g.features[t].iter().map(|v| -v).collect();
            model.encoder.backprop_into(trace, &dl_dh, &mut grads)?;
        }
        model
            .encoder
            .sgd_step_per_layer(&grads, &steps.encoder, opts.lambda3)?;
    }
    Ok(SequenceReport {
        decoded,
        mistake: true,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRecord {
    /// 1-based.
    pub sweep: usize,
    pub train_mistake_rate: f64,
    pub heldout_word_error: f64,
    pub wallclock_ms: u128,
}

impl fmt::Display for SweepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:.6} {:.6} {}",
            self.sweep, self.train_mistake_rate, self.heldout_word_error, self.wallclock_ms
        )
    }
}

pub fn format_log(log: &[SweepRecord]) -> String {
    log.iter().map(|r| format!("{r}\n")).collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: DeepCrfModel,
    pub log: Vec<SweepRecord>,
    /// Indices (into the training slice) used for updates and for held-out
    /// scoring.
    pub train_indices: Vec<usize>,
    pub heldout_indices: Vec<usize>,
}

/// Splits `0..n` after a seeded shuffle: the last `fraction` of the shuffled
/// order (at least one item when `n ≥ 2`) is held out.
pub fn split_heldout(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    order.shuffle(&mut rng);
    let mut held = (n as f64 * fraction).floor() as usize;
    if held == 0 && n >= 2 {
        held = 1;
    }
    let held = held.min(n.saturating_sub(1));
    let heldout = order.split_off(n - held);
    (order, heldout)
}

fn frames_of(sequences: &[LabeledSequence]) -> Vec<Vec<Vec<f64>>> {
    sequences.iter().map(LabeledSequence::frames_f64).collect()
}

/// Greedy pretraining on every frame of the selected sequences, or `None`
/// when the configuration does not ask for it.
pub fn pretrain_encoder(
    sequences: &[LabeledSequence],
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<Option<EncoderStack>> {
    let Some(pcfg) = &cfg.pretrain else {
        return Ok(None);
    };
    if cfg.layer_sizes.is_empty() {
        return Ok(None);
    }
    let data: Vec<Vec<f64>> = indices
        .iter()
        .flat_map(|&i| sequences[i].frames_f64())
        .collect();
    pretrain_stack(&data, &cfg.layer_sizes, pcfg).map(Some)
}

fn heldout_error(model: &DeepCrfModel, frames: &[Vec<Vec<f64>>], seqs: &[LabeledSequence], held: &[usize]) -> Result<f64> {
    if held.is_empty() {
        return Ok(f64::NAN);
    }
    let pred = held
        .iter()
        .map(|&i| model.predict(&frames[i]))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<Vec<usize>> = held.iter().map(|&i| seqs[i].labels.clone()).collect();
    word_error_rate(&pred, &gold)
}

/// Full training run: split off the held-out set, pretrain (unless a stack is
/// supplied or pretraining is disabled), initialize, then `sweeps` passes
/// over a freshly shuffled order each time.
pub fn train(
    sequences: &[LabeledSequence],
    alphabet: &LabelAlphabet,
    d: usize,
    cfg: &TrainConfig,
    pretrained: Option<EncoderStack>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if sequences.is_empty() {
        return Err(Error::NoSequences);
    }
    let (train_idx, held_idx) = split_heldout(sequences.len(), cfg.heldout_fraction, cfg.seed);
    let pretrained = match pretrained {
        Some(stack) => Some(stack),
        None => pretrain_encoder(sequences, &train_idx, cfg)?,
    };
    let mut model = init_model(d, &cfg.layer_sizes, alphabet, pretrained, cfg.seed, cfg.init_scale)?;
    model.meta = ModelMeta {
        config_fingerprint: cfg.fingerprint(),
        dataset_fingerprint: dataset_fingerprint(sequences),
        sweeps_completed: 0,
    };
    let frames = frames_of(sequences);
    let steps = StepSizes::from_base(cfg.base_step, &model);
    let opts = UpdateOptions::from_config(cfg);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut order = train_idx.clone();
    let mut log = Vec::with_capacity(cfg.sweeps);
    for sweep in 1..=cfg.sweeps {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut mistakes = 0usize;
        for &i in &order {
            let report = train_sequence(&mut model, &frames[i], &sequences[i].labels, &steps, &opts)
                .map_err(|e| Error::Diverged {
                    sweep,
                    sequence: i,
                    what: e.to_string(),
                })?;
            mistakes += usize::from(report.mistake);
        }
        model.meta.sweeps_completed = sweep;
        let record = SweepRecord {
            sweep,
            train_mistake_rate: mistakes as f64 / order.len() as f64,
            heldout_word_error: heldout_error(&model, &frames, sequences, &held_idx)?,
            wallclock_ms: started.elapsed().as_millis(),
        };
        log::info!("sweep {record}");
        log.push(record);
    }
    Ok(TrainOutcome {
        model,
        log,
        train_indices: train_idx,
        heldout_indices: held_idx,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneReport {
    pub chosen: f64,
    /// `(candidate, held-out word error)` in ascending candidate order.
    pub scores: Vec<(f64, f64)>,
}

/// Short training runs, one per candidate base step, scored by held-out word
/// error after `budget_sweeps` sweeps. A run that diverges scores 1.0. Ties
/// go to the smaller step.
pub fn tune_base_step(
    sequences: &[LabeledSequence],
    alphabet: &LabelAlphabet,
    d: usize,
    cfg: &TrainConfig,
    candidates: &[f64],
    budget_sweeps: usize,
) -> Result<TuneReport> {
    if candidates.is_empty() {
        return Err(Error::Invalid("no step-size candidates".into()));
    }
    if let Some(c) = candidates.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
        return Err(Error::Invalid(format!("step-size candidate {c} is not positive")));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    if sorted.len() == 1 {
        return Ok(TuneReport {
            chosen: sorted[0],
            scores: vec![(sorted[0], f64::NAN)],
        });
    }
    let mut short = cfg.clone();
    short.sweeps = budget_sweeps.max(1);
    short.validate()?;
    let (train_idx, _) = split_heldout(sequences.len(), cfg.heldout_fraction, cfg.seed);
    let pretrained = pretrain_encoder(sequences, &train_idx, cfg)?;

    let mut scores = Vec::with_capacity(sorted.len());
    for &step in &sorted {
        short.base_step = step;
        let score = match train(sequences, alphabet, d, &short, pretrained.clone()) {
            Ok(out) => {
                let e = out.log.last().map_or(1.0, |r| r.heldout_word_error);
                if e.is_finite() {
                    e
                } else {
                    1.0
                }
            }
            Err(Error::Diverged { .. } | Error::NonFinite(_)) => 1.0,
            Err(e) => return Err(e),
        };
        log::info!("base step {step:e}: held-out word error {score:.4}");
        scores.push((step, score));
    }
    let mut chosen = scores[0];
    for &s in &scores[1..] {
        if s.1 < chosen.1 {
            chosen = s;
        }
    }
    Ok(TuneReport {
        chosen: chosen.0,
        scores,
    })
}
