//! Word/character error metrics, the cross-validation driver and report
//! rendering.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::data::{make_folds, Dataset, Fold};
use crate::error::{Error, Result};
use crate::trainer::{short_hash, train, tune_base_step, TrainConfig};

fn check_shapes(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::dim("word count", gold.len(), pred.len()));
    }
    for (p, g) in pred.iter().zip(gold) {
        if p.len() != g.len() {
            return Err(Error::dim("word length", g.len(), p.len()));
        }
    }
    Ok(())
}

/// Fraction of words with at least one wrong character.
pub fn word_error_rate(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<f64> {
    check_shapes(pred, gold)?;
    if gold.is_empty() {
        return Ok(0.0);
    }
    let wrong = pred.iter().zip(gold).filter(|(p, g)| p != g).count();
    Ok(wrong as f64 / gold.len() as f64)
}

/// Fraction of wrong characters over all words.
pub fn char_error_rate(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<f64> {
    check_shapes(pred, gold)?;
    let total: usize = gold.iter().map(Vec::len).sum();
    if total == 0 {
        return Ok(0.0);
    }
    let wrong: usize = pred
        .iter()
        .zip(gold)
        .map(|(p, g)| p.iter().zip(g).filter(|(a, b)| a != b).count())
        .sum();
    Ok(wrong as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModelTag {
    DeepCrf,
    LinearCrf,
    NoTransitionAblation,
}

impl ModelTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelTag::DeepCrf => "deep_crf",
            ModelTag::LinearCrf => "linear_crf",
            ModelTag::NoTransitionAblation => "no_transition_ablation",
        }
    }

    /// Training configuration this tag runs with, derived from `base`.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            ModelTag::DeepCrf => {}
            ModelTag::LinearCrf => {
                cfg.layer_sizes.clear();
                cfg.pretrain = None;
            }
            ModelTag::NoTransitionAblation => cfg.freeze_transitions = true,
        }
        cfg
    }
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deep_crf" => Ok(ModelTag::DeepCrf),
            "linear_crf" => Ok(ModelTag::LinearCrf),
            "no_transition_ablation" => Ok(ModelTag::NoTransitionAblation),
            _ => Err(Error::Invalid(format!("unknown model tag {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub model_tag: ModelTag,
    pub k: usize,
    /// Fold indices that were evaluated, in order.
    pub folds: Vec<usize>,
    pub per_fold_word_error: Vec<f64>,
    pub per_fold_char_error: Vec<f64>,
    pub mean_word_error: f64,
    pub mean_char_error: f64,
    pub config_fingerprint: String,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn join_f64(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn split_f64(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| Error::Invalid(format!("bad number {t:?}"))))
        .collect()
}

impl EvalReport {
    pub fn new(
        model_tag: ModelTag,
        k: usize,
        folds: Vec<usize>,
        per_fold_word_error: Vec<f64>,
        per_fold_char_error: Vec<f64>,
        config_fingerprint: String,
    ) -> Self {
        Self {
            model_tag,
            k,
            mean_word_error: mean(&per_fold_word_error),
            mean_char_error: mean(&per_fold_char_error),
            folds,
            per_fold_word_error,
            per_fold_char_error,
            config_fingerprint,
        }
    }

    /// Human-readable summary, word error as a percentage with one decimal.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "model: {}\nfolds: {} of {}\n",
            self.model_tag,
            self.folds.len(),
            self.k
        );
        for ((f, w), c) in self
            .folds
            .iter()
            .zip(&self.per_fold_word_error)
            .zip(&self.per_fold_char_error)
        {
            s += &format!("fold {f}: word error {:.1}%  char error {:.1}%\n", 100.0 * w, 100.0 * c);
        }
        s += &format!(
            "mean word error: {:.1}%\nmean char error: {:.1}%\n",
            100.0 * self.mean_word_error,
            100.0 * self.mean_char_error
        );
        s
    }

    pub fn to_kv(&self) -> String {
        let folds = self.folds.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        format!(
            "model_tag = {}\nk = {}\nfolds = {}\nper_fold_word_error = {}\nper_fold_char_error = {}\nmean_word_error = {:?}\nmean_char_error = {:?}\nconfig_fingerprint = {}\n",
            self.model_tag,
            self.k,
            folds,
            join_f64(&self.per_fold_word_error),
            join_f64(&self.per_fold_char_error),
            self.mean_word_error,
            self.mean_char_error,
            self.config_fingerprint
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut get = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("bad report line {line:?}")))?;
            get.insert(k.trim().to_string(), v.trim().to_string());
        }
        let field = |k: &str| {
            get.get(k)
                .cloned()
                .ok_or_else(|| Error::Invalid(format!("report missing {k}")))
        };
        let folds = field("folds")?;
        let folds = if folds.is_empty() {
            Vec::new()
        } else {
            folds
                .split(',')
                .map(|t| t.parse().map_err(|_| Error::Invalid(format!("bad fold {t:?}"))))
                .collect::<Result<_>>()?
        };
        Ok(EvalReport::new(
            field("model_tag")?.parse()?,
            field("k")?
                .parse()
                .map_err(|_| Error::Invalid("bad k".into()))?,
            folds,
            split_f64(&field("per_fold_word_error")?)?,
            split_f64(&field("per_fold_char_error")?)?,
            field("config_fingerprint")?,
        ))
    }

    /// `report_<tag>_k<k>_<fingerprint>` stem.
    pub fn file_stem(&self) -> String {
        format!("report_{}_k{}_{}", self.model_tag, self.k, self.config_fingerprint)
    }

    /// Writes `<stem>.txt` and `<stem>.kv` under `dir`.
    pub fn write_files(&self, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let txt = dir.join(format!("{}.txt", self.file_stem()));
        let kv = dir.join(format!("{}.kv", self.file_stem()));
        fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))?;
        fs::write(&kv, self.to_kv()).map_err(|e| Error::io(&kv, e))?;
        Ok((txt, kv))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvOptions {
    /// Evaluate only these fold indices (all when `None`).
    pub only_folds: Option<Vec<usize>>,
    /// Worker threads for independent folds.
    pub jobs: usize,
    /// Seed for shuffled folds when the data carry no fold tags.
    pub fold_seed: u64,
    /// Per-fold base-step tuning: candidates and sweep budget.
    pub tune: Option<(Vec<f64>, usize)>,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            only_folds: None,
            jobs: 1,
            fold_seed: 0,
            tune: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub word_error: f64,
    pub char_error: f64,
    pub predictions: Vec<Vec<usize>>,
}

/// Trains on one fold's training part and decodes its test part.
pub fn run_fold(ds: &Dataset, split: &Fold, fold: usize, cfg: &TrainConfig, tune: Option<&(Vec<f64>, usize)>) -> Result<FoldResult> {
    check_no_leak(ds, split)?;
    let train_set = ds.subset(&split.train);
    let mut cfg = cfg.clone();
    if let Some((candidates, budget)) = tune {
        let r = tune_base_step(&train_set.sequences, &ds.alphabet, ds.d, &cfg, candidates, *budget)?;
        log::info!("fold {fold}: tuned base step {:e} from {:?}", r.chosen, r.scores);
        cfg.base_step = r.chosen;
    }
    let outcome = train(&train_set.sequences, &ds.alphabet, ds.d, &cfg, None)?;
    let gold: Vec<Vec<usize>> = split.test.iter().map(|&i| ds.sequences[i].labels.clone()).collect();
    let predictions = split
        .test
        .iter()
        .map(|&i| outcome.model.predict(&ds.sequences[i].frames_f64()))
        .collect::<Result<Vec<_>>>()?;
    let word_error = word_error_rate(&predictions, &gold)?;
    let char_error = char_error_rate(&predictions, &gold)?;
    log::info!("fold {fold}: word error {word_error:.4}, char error {char_error:.4}");
    Ok(FoldResult {
        fold,
        word_error,
        char_error,
        predictions,
    })
}

fn check_no_leak(ds: &Dataset, split: &Fold) -> Result<()> {
    let train_ids: HashSet<&str> = split.train.iter().map(|&i| ds.sequences[i].word_id.as_str()).collect();
    if let Some(&i) = split
        .test
        .iter()
        .find(|&&i| train_ids.contains(ds.sequences[i].word_id.as_str()))
    {
        return Err(Error::Structure(format!(
            "word id {} appears in both train and test",
            ds.sequences[i].word_id
        )));
    }
    Ok(())
}

/// k-fold cross-validation of one model variant. Folds are independent and
/// run on up to `opts.jobs` threads; results are reported in fold order.
pub fn cross_validate(ds: &Dataset, k: usize, cfg: &TrainConfig, tag: ModelTag, opts: &CvOptions) -> Result<EvalReport> {
    let cfg = tag.configure(cfg);
    cfg.validate()?;
    let splits = make_folds(ds, k, opts.fold_seed)?;
    let selected: Vec<usize> = match &opts.only_folds {
        Some(f) => {
            if let Some(bad) = f.iter().find(|&&i| i >= k) {
                return Err(Error::Invalid(format!("fold {bad} out of range for k = {k}")));
            }
            f.clone()
        }
        None => (0..k).collect(),
    };
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<FoldResult>>>> = Mutex::new((0..selected.len()).map(|_| None).collect());
    let jobs = opts.jobs.clamp(1, selected.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let slot = next.fetch_add(1, Ordering::SeqCst);
                if slot >= selected.len() {
                    break;
                }
                let f = selected[slot];
                let r = run_fold(ds, &splits[f], f, &cfg, opts.tune.as_ref());
                results.lock().unwrap()[slot] = Some(r);
            });
        }
    });
    let mut word = Vec::with_capacity(selected.len());
    let mut chars = Vec::with_capacity(selected.len());
    for r in results.into_inner().unwrap() {
        let r = r.expect("every fold ran")?;
        word.push(r.word_error);
        chars.push(r.char_error);
    }
    let mut fp_input = cfg.fingerprint();
    fp_input += &format!("|{tag}|{k}|{:?}", opts.tune);
    Ok(EvalReport::new(tag, k, selected, word, chars, short_hash(fp_input.as_bytes())))
}

/// Aligned table of model tag against mean word error, best first; equal
/// errors fall back to tag name order.
pub fn compare_report(reports: &[EvalReport]) -> String {
    let mut rows: Vec<&EvalReport> = reports.iter().collect();
    rows.sort_by(|a, b| {
        a.mean_word_error
            .total_cmp(&b.mean_word_error)
            .then_with(|| a.model_tag.as_str().cmp(b.model_tag.as_str()))
    });
    let width = rows
        .iter()
        .map(|r| r.model_tag.as_str().len())
        .chain(["model".len()])
        .max()
        .unwrap();
    let mut out = format!("{:<width$}  word error (%)\n", "model");
    for r in rows {
        out += &format!("{:<width$}  {:>14.1}\n", r.model_tag.as_str(), 100.0 * r.mean_word_error);
    }
    out
}
