//! Command-line front end: argument definitions, config-file merging and the
//! subcommand implementations.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::container::{parse_sizes, ModelContainer};
use crate::data::{load_dataset, load_icdar, load_ocr, make_folds, word_images_to_dataset, Dataset};
use crate::error::{Error, Result};
use crate::eval::{compare_report, cross_validate, CvOptions, EvalReport, ModelTag};
use crate::rbm::{pretrain_stack, PretrainConfig};
use crate::trainer::{format_log, train, tune_base_step, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "deepcrf", version, about = "Deep CRF word recognizer", args_override_self = true)]
pub struct Cli {
    /// File of `key = value` lines; each key is a long flag of the chosen
    /// subcommand. Flags given on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert an OCR letter file into the canonical dataset format.
    #[command(args_override_self = true)]
    PrepOcr(PrepOcrArgs),
    /// Segment and normalize ICDAR word images into the canonical format.
    #[command(args_override_self = true)]
    PrepIcdar(PrepIcdarArgs),
    /// Greedy RBM pretraining of the encoder.
    #[command(args_override_self = true)]
    Pretrain(PretrainArgs),
    /// Train a model on a dataset or on the training part of one fold.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Cross-validate one model variant and write report files.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Render a comparison table from report files.
    #[command(args_override_self = true)]
    Compare(CompareArgs),
    /// Decode every word of a dataset with a trained model.
    #[command(args_override_self = true)]
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct PrepOcrArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PrepIcdarArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PretrainFlags {
    #[arg(long, default_value_t = 0.1)]
    pub pretrain_lr: f64,
    #[arg(long, default_value_t = 30)]
    pub pretrain_epochs: usize,
    #[arg(long, default_value_t = 50)]
    pub pretrain_batch: usize,
}

impl PretrainFlags {
    fn config(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            learning_rate: self.pretrain_lr,
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch,
            seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Dataset (canonical or OCR letter file).
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated hidden layer widths.
    #[arg(long, default_value = "400,200,100")]
    pub layers: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub pretrain: PretrainFlags,
}

#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 100)]
    pub sweeps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub base_step: f64,
    #[arg(long, default_value_t = 0.0)]
    pub lambda2: f64,
    #[arg(long, default_value_t = 2e-4)]
    pub lambda3: f64,
    /// Comma-separated hidden layer widths.
    #[arg(long, default_value = "400,200,100")]
    pub layers: String,
    #[arg(long, default_value_t = 0.05)]
    pub heldout_fraction: f64,
    #[arg(long, default_value_t = 1.0)]
    pub init_scale: f64,
    /// Skip RBM pretraining; the encoder starts from small random weights.
    #[arg(long)]
    pub no_pretrain: bool,
    /// Comma-separated base-step candidates to tune on held-out data.
    #[arg(long)]
    pub tune_steps: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub tune_sweeps: usize,
    #[command(flatten)]
    pub pretrain: PretrainFlags,
}

impl TrainFlags {
    pub fn config(&self, seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            sweeps: self.sweeps,
            base_step: self.base_step,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            layer_sizes: parse_sizes(&self.layers)?,
            seed,
            heldout_fraction: self.heldout_fraction,
            init_scale: self.init_scale,
            pretrain: (!self.no_pretrain).then(|| self.pretrain.config(seed)),
            freeze_transitions: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn tune_candidates(&self) -> Result<Option<(Vec<f64>, usize)>> {
        let Some(s) = &self.tune_steps else {
            return Ok(None);
        };
        let c = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Invalid(format!("bad step candidate {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Some((c, self.tune_sweeps)))
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Hold out this fold as test data; without it every sequence trains.
    #[arg(long)]
    pub fold: Option<usize>,
    /// Fold count used with `--fold`.
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long, default_value = "deep_crf")]
    pub model_tag: String,
    /// Start from this pretrained (or trained) encoder instead of pretraining.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Training log path; defaults to `<out>.log`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    /// Comma-separated subset of folds to evaluate.
    #[arg(long)]
    pub only_folds: Option<String>,
    #[arg(long, default_value = "deep_crf")]
    pub model_tag: String,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Folds trained in parallel; defaults to the number of processors.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Report `.kv` files.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

const SUBCOMMANDS: [&str; 7] = ["prep-ocr", "prep-icdar", "pretrain", "train", "eval", "compare", "predict"];

/// Splices flags from a `--config` file in right after the subcommand name so
/// that flags typed later on the command line override them.
pub fn expand_config(args: Vec<String>) -> Result<Vec<String>> {
    let mut config = None;
    for (i, a) in args.iter().enumerate() {
        if let Some(p) = a.strip_prefix("--config=") {
            config = Some(p.to_string());
        } else if a == "--config" {
            config = args.get(i + 1).cloned();
        }
    }
    let Some(path) = config else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.clone(),
            line: n + 1,
            msg: "expected `key = value`".into(),
        })?;
        let flag = format!("--{}", key.trim().replace('_', "-"));
        match value.trim() {
            "true" => extra.push(flag),
            "false" => {}
            v => {
                extra.push(flag);
                extra.push(v.to_string());
            }
        }
    }
    let pos = args
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.as_str()))
        .ok_or_else(|| Error::Invalid("no subcommand given".into()))?;
    let mut out = args[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::PrepOcr(a) => cmd_prep_ocr(a, out),
        Command::PrepIcdar(a) => cmd_prep_icdar(a, out),
        Command::Pretrain(a) => cmd_pretrain(a, cli.seed, out),
        Command::Train(a) => cmd_train(a, cli.seed, out),
        Command::Eval(a) => cmd_eval(a, cli.seed, out),
        Command::Compare(a) => cmd_compare(a, out),
        Command::Predict(a) => cmd_predict(a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn summary(ds: &Dataset) -> String {
    format!(
        "sequences {}  frames {}  d {}  K {}\n",
        ds.len(),
        ds.total_frames(),
        ds.d,
        ds.k()
    )
}

pub fn cmd_prep_ocr(a: &PrepOcrArgs, out: &mut dyn Write) -> Result<()> {
    let ds = load_ocr(&a.input)?;
    ds.write_canonical(&a.out)?;
    emit(out, &summary(&ds))
}

pub fn cmd_prep_icdar(a: &PrepIcdarArgs, out: &mut dyn Write) -> Result<()> {
    let (images, report) = load_icdar(&a.manifest)?;
    let ds = word_images_to_dataset(&images, None)?;
    ds.write_canonical(&a.out)?;
    let distinct: BTreeSet<&str> = images.iter().map(|w| w.transcript.as_str()).collect();
    emit(
        out,
        &format!(
            "{}distinct transcripts {}  skipped (empty transcript) {}\n",
            summary(&ds),
            distinct.len(),
            report.skipped_empty_transcript
        ),
    )
}

pub fn cmd_pretrain(a: &PretrainArgs, seed: u64, out: &mut dyn Write) -> Result<()> {
    let sizes = parse_sizes(&a.layers)?;
    if sizes.is_empty() {
        return Err(Error::Invalid("pretraining needs at least one layer".into()));
    }
    let cfg = a.pretrain.config(seed);
    cfg.validate()?;
    let ds = load_dataset(&a.data)?;
    let frames: Vec<Vec<f64>> = ds.sequences.iter().flat_map(|s| s.frames_f64()).collect();
    let stack = pretrain_stack(&frames, &sizes, &cfg)?;
    let extra = vec![
        ("pretrain_learning_rate".to_string(), format!("{:e}", cfg.learning_rate)),
        ("pretrain_epochs".to_string(), cfg.epochs.to_string()),
        ("pretrain_batch_size".to_string(), cfg.batch_size.to_string()),
        ("seed".to_string(), seed.to_string()),
    ];
    ModelContainer::from_pretrained(&stack, &extra).write(&a.out)?;
    let shapes: Vec<String> = stack
        .layers()
        .iter()
        .map(|l| format!("{}x{}", l.n_in(), l.n_out()))
        .collect();
    emit(out, &format!("wrote {} ({})\n", a.out.display(), shapes.join(", ")))
}

pub fn cmd_train(a: &TrainArgs, seed: u64, out: &mut dyn Write) -> Result<()> {
    let tag: ModelTag = a.model_tag.parse()?;
    let mut cfg = tag.configure(&a.train.config(seed)?);
    let ds = load_dataset(&a.data)?;
    let train_set = match a.fold {
        Some(f) => {
            let folds = make_folds(&ds, a.folds, seed)?;
            let split = folds
                .get(f)
                .ok_or_else(|| Error::Invalid(format!("fold {f} out of range for {} folds", a.folds)))?;
            ds.subset(&split.train)
        }
        None => ds.clone(),
    };
    let pretrained = match &a.pretrained {
        Some(p) => Some(ModelContainer::read(p)?.to_encoder()?),
        None => None,
    };
    if let Some((candidates, budget)) = a.train.tune_candidates()? {
        let r = tune_base_step(&train_set.sequences, &ds.alphabet, ds.d, &cfg, &candidates, budget)?;
        emit(out, &format!("tuned base step {:e}\n", r.chosen))?;
        cfg.base_step = r.chosen;
    }
    let outcome = train(&train_set.sequences, &ds.alphabet, ds.d, &cfg, pretrained)?;
    let extra = vec![("model_tag".to_string(), tag.to_string())];
    ModelContainer::from_model(&outcome.model, &extra).write(&a.out)?;
    let log_path = a
        .log
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.log", a.out.display())));
    fs::write(&log_path, format_log(&outcome.log)).map_err(|e| Error::io(&log_path, e))?;
    let last = outcome.log.last().expect("sweeps >= 1");
    emit(
        out,
        &format!(
            "wrote {} after {} sweeps (train mistakes {:.4}, held-out word error {:.4})\n",
            a.out.display(),
            last.sweep,
            last.train_mistake_rate,
            last.heldout_word_error
        ),
    )
}

fn parse_fold_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Invalid(format!("bad fold index {t:?}")))
        })
        .collect()
}

fn read_reports(dir: &Path, k: usize) -> Result<Vec<EvalReport>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "kv")
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("report_"))
        })
        .collect();
    paths.sort();
    let mut reports = Vec::new();
    for p in paths {
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let r = EvalReport::from_kv(&text)?;
        if r.k == k {
            reports.push(r);
        }
    }
    Ok(reports)
}

pub fn cmd_eval(a: &EvalArgs, seed: u64, out: &mut dyn Write) -> Result<()> {
    let tag: ModelTag = a.model_tag.parse()?;
    if a.folds < 2 {
        return Err(Error::Invalid(format!("fold count must be at least 2, got {}", a.folds)));
    }
    let cfg = a.train.config(seed)?;
    let ds = load_dataset(&a.data)?;
    let opts = CvOptions {
        only_folds: a.only_folds.as_deref().map(parse_fold_list).transpose()?,
        jobs: a
            .jobs
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
        fold_seed: seed,
        tune: a.train.tune_candidates()?,
    };
    let report = cross_validate(&ds, a.folds, &cfg, tag, &opts)?;
    let (txt, _) = report.write_files(&a.out_dir)?;
    let table = compare_report(&read_reports(&a.out_dir, a.folds)?);
    let table_path = a.out_dir.join(format!("comparison_k{}.txt", a.folds));
    fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    emit(out, &format!("{}\nwrote {}\n\n{table}", report.to_text(), txt.display()))
}

pub fn cmd_compare(a: &CompareArgs, out: &mut dyn Write) -> Result<()> {
    let reports = a
        .reports
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            EvalReport::from_kv(&text)
        })
        .collect::<Result<Vec<_>>>()?;
    emit(out, &compare_report(&reports))
}

pub fn cmd_predict(a: &PredictArgs, out: &mut dyn Write) -> Result<()> {
    let model = ModelContainer::read(&a.model)?.to_model()?;
    let ds = load_dataset(&a.data)?;
    if ds.d != model.input_dim() {
        return Err(Error::Invalid(format!(
            "model expects frames of dimension {}, data has dimension {}",
            model.input_dim(),
            ds.d
        )));
    }
    let mut text = String::new();
    for s in &ds.sequences {
        let r = model.decode(&s.frames_f64())?;
        text += &format!("{}\t{}\t{:.6}\n", s.word_id, model.alphabet.decode(&r.labels), r.log_prob);
    }
    emit(out, &text)
}
