//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on a domain error (printed with its error
//! name), 2 on a usage error. `--config <file>` supplies `key=value` lines
//! that fill in any flag not given on the command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::encoder::{EncoderConfig, HeadConfig, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{GradCheckConfig, TinyProblem, TinySpec};
use crate::ingest::{assign_splits, build_vocabularies, parse_events, parse_labels, Corpus, Split};
use crate::io_util::write_atomic;
use crate::mlvm::MaskConfig;
use crate::objective::{FeatureNorm, LossConfig, TaskKind};
use crate::synth::{generate_corpus, SynthSpec};
use crate::text_embed::{read_cache, EmbeddingProvider, PreEmbedCache};
use crate::tokenizer::{normalize_values, rolling_windows, truncate_and_pad, TokenizerConfig};
use crate::train::{
    build_samples, corpus_windows, finetune, log_csv, predict, pretrain, score, ClassWeight, FinetuneConfig,
    MetricReport, PretrainConfig,
};
use crate::types::{TokenValue, Vocabularies, WindowSequence};

#[derive(Debug, Parser)]
#[command(name = "ehrstream", version, about = "Event-stream tokenization, pre-training and fine-tuning")]
struct Cli {
    /// Flat key=value file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its labels file.
    Synth(SynthArgs),
    /// Parse, split, build vocabularies and tokenize a corpus.
    Ingest(IngestArgs),
    /// Masked language-value pre-training.
    Pretrain(PretrainArgs),
    /// Cross-validated fine-tuning of a pre-trained checkpoint.
    Finetune(FinetuneArgs),
    /// Score a fine-tuned checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Compare analytic and numeric gradients on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Summarize an embedding cache file.
    InspectCache(InspectArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    patients: usize,
    #[arg(long, default_value_t = 30)]
    features: usize,
    /// Events per minute per feature.
    #[arg(long, default_value_t = 0.004)]
    rate: f64,
    #[arg(long, default_value_t = 0.1)]
    signal_incidence: f64,
    #[arg(long, default_value_t = 24.0)]
    min_stay_hours: f64,
    #[arg(long, default_value_t = 48.0)]
    max_stay_hours: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Event-line output; labels go to `<out>.labels.csv`.
    #[arg(long)]
    out: PathBuf,
}

fn parse_ratios(text: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    parts.try_into().map_err(|_| "expected three comma-separated numbers".to_string())
}

#[derive(Debug, Clone, Args)]
struct CorpusArgs {
    /// Event-line file.
    #[arg(long)]
    events: PathBuf,
    /// Train, validation and test fractions (patient level).
    #[arg(long, default_value = "0.7,0.15,0.15", value_parser = parse_ratios)]
    ratios: [f64; 3],
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = crate::types::DEFAULT_WINDOW_MINUTES)]
    window_minutes: u32,
    #[arg(long, default_value_t = crate::types::DEFAULT_MAX_SEQ_LEN)]
    max_seq_len: usize,
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Vocabularies as JSON.
    #[arg(long)]
    vocab_out: Option<PathBuf>,
    /// Tokenized windows as JSON lines.
    #[arg(long)]
    windows_out: Option<PathBuf>,
    /// Emit overlapping windows advancing by this many minutes instead of
    /// the non-overlapping segmentation.
    #[arg(long)]
    roll_step_minutes: Option<u32>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Embedding cache file; without it a hash-seeded stub is used.
    #[arg(long)]
    embed_cache: Option<PathBuf>,
    /// Stub embedding width.
    #[arg(long, default_value_t = crate::text_embed::DEFAULT_PRE_DIM)]
    pre_dim: usize,
    #[arg(long, default_value_t = 0)]
    embed_stub_seed: u64,
    #[arg(long, default_value_t = 6)]
    layers: usize,
    #[arg(long, default_value_t = 768)]
    hidden: usize,
    #[arg(long, default_value_t = 6)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    ffn_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 5e-5)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.4)]
    warmup_fraction: f64,
    #[arg(long, default_value_t = 0.15)]
    mask_rate: f64,
    #[arg(long, default_value_t = 0.5)]
    mask_both: f64,
    #[arg(long, default_value_t = 0.25)]
    mask_value_only: f64,
    #[arg(long, default_value_t = 0.25)]
    mask_feature_only: f64,
    /// [MASK], random and keep probabilities per masked slot.
    #[arg(long, default_value = "0.8,0.1,0.1", value_parser = parse_ratios)]
    corrupt: [f64; 3],
    #[arg(long, default_value_t = 3.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// `masked` or `all-tokens`.
    #[arg(long, default_value = "masked")]
    feature_norm: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path; `<out>.meta.json` and `<out>.log.csv` are written
    /// next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Pre-trained checkpoint (with its `.meta.json` sidecar).
    #[arg(long)]
    checkpoint: PathBuf,
    /// `binary`, `regression` or `multilabel:<n>`.
    #[arg(long, default_value = "binary")]
    task: String,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.4)]
    warmup_fraction: f64,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 5)]
    unfrozen_layers: usize,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    train_embedder: bool,
    #[arg(long, default_value_t = 0.1)]
    final_dropout: f64,
    /// `auto` (N_neg / N_pos) or a positive number.
    #[arg(long, default_value = "auto")]
    class_weight: String,
    #[arg(long, default_value_t = 1)]
    windows_per_sample: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Task checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Metric report; defaults to `<out>.results.txt`.
    #[arg(long)]
    results: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Fine-tuned checkpoint (with its `.meta.json` sidecar).
    #[arg(long)]
    checkpoint: PathBuf,
    /// `train`, `val`, `test` or `all`.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    results: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    ffn_dim: usize,
    #[arg(long, default_value_t = 6)]
    max_seq_len: usize,
    /// Feature vocabulary size, reserved entries included.
    #[arg(long, default_value_t = 12)]
    features: usize,
    /// Categorical value vocabulary size, reserved entries included.
    #[arg(long, default_value_t = 7)]
    values: usize,
    #[arg(long, default_value_t = 6)]
    pre_dim: usize,
    #[arg(long, default_value_t = 4)]
    windows: usize,
    #[arg(long, default_value_t = 3.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 24)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    cache: PathBuf,
    /// Keys to list.
    #[arg(long, default_value_t = 10)]
    show: usize,
    /// Print the vector stored for this key.
    #[arg(long)]
    key: Option<String>,
}

/// How pre-embeddings were produced, so later stages reproduce them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum EmbeddingSource {
    Stub { dim: usize, seed: u64 },
    Cache { path: PathBuf },
}

impl EmbeddingSource {
    fn provider(&self) -> Result<EmbeddingProvider> {
        match self {
            EmbeddingSource::Stub { dim, seed } => Ok(EmbeddingProvider::stub(*dim, *seed)),
            EmbeddingSource::Cache { path } => EmbeddingProvider::open_cache(path),
        }
    }
}

/// Sidecar written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunMeta {
    vocab: Vocabularies,
    embedding: EmbeddingSource,
    window_minutes: u32,
    max_seq_len: usize,
    split: [f64; 3],
    split_seed: u64,
    task: Option<String>,
    windows_per_sample: Option<usize>,
}

fn meta_path(checkpoint: &Path) -> PathBuf {
    sibling(checkpoint, ".meta.json")
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, |w| std::io::Write::write_all(w, text.as_bytes()))
}

impl RunMeta {
    fn save(&self, checkpoint: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::FormatError(e.to_string()))?;
        write_text(&meta_path(checkpoint), &text)
    }

    fn load(checkpoint: &Path) -> Result<RunMeta> {
        let path = meta_path(checkpoint);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut meta: RunMeta =
            serde_json::from_str(&text).map_err(|e| Error::FormatError(format!("{}: {e}", path.display())))?;
        meta.vocab.reindex();
        Ok(meta)
    }

    fn tokenizer(&self) -> TokenizerConfig {
        TokenizerConfig {
            window_minutes: self.window_minutes,
            max_seq_len: self.max_seq_len,
            ..TokenizerConfig::default()
        }
    }

    fn pre_embed(&self) -> Result<PreEmbedCache> {
        let texts = self.vocab.features.iter().chain(self.vocab.categorical_values.iter());
        PreEmbedCache::new(self.embedding.provider()?, texts)
    }

    fn corpus(&self, events: &Path) -> Result<Corpus> {
        assign_splits(parse_events(events)?, self.split, self.split_seed)
    }
}

fn tokenizer(c: &CorpusArgs) -> TokenizerConfig {
    TokenizerConfig {
        window_minutes: c.window_minutes,
        max_seq_len: c.max_seq_len,
        ..TokenizerConfig::default()
    }
}

fn run_synth(a: &SynthArgs) -> Result<String> {
    let spec = SynthSpec {
        patients: a.patients,
        features: a.features,
        rate: a.rate,
        signal_incidence: a.signal_incidence,
        min_stay_hours: a.min_stay_hours,
        max_stay_hours: a.max_stay_hours,
        ..SynthSpec::default()
    };
    let corpus = generate_corpus(&spec, a.seed)?;
    let labels = corpus.write(&a.out)?;
    let positives = corpus.stays.iter().filter(|s| s.label).count();
    Ok(format!(
        "stays: {}\nevents: {}\npositives: {}\nevents_file: {}\nlabels_file: {}\n",
        corpus.stays.len(),
        corpus.n_events(),
        positives,
        a.out.display(),
        labels.display()
    ))
}

fn window_json(w: &WindowSequence, split: Option<Split>) -> serde_json::Value {
    let tokens: Vec<serde_json::Value> = w
        .tokens
        .iter()
        .filter(|t| !t.is_pad())
        .map(|t| {
            let value = match &t.value {
                TokenValue::Number(x) => serde_json::json!(x),
                TokenValue::Category(c) => serde_json::json!(c),
                TokenValue::Special(s) => serde_json::json!(s.text()),
            };
            serde_json::json!({
                "feature": t.feature_text,
                "value": value,
                "tau": t.tau_minutes,
                "delta": t.delta_minutes,
                "continuous": t.is_continuous,
                "static": t.is_static,
            })
        })
        .collect();
    serde_json::json!({
        "stay_id": w.stay_id,
        "window_index": w.window_index,
        "window_start": w.window_start.to_string(),
        "split": split.map(Split::name),
        "tokens": tokens,
    })
}

fn run_ingest(a: &IngestArgs) -> Result<String> {
    let corpus = assign_splits(parse_events(&a.corpus.events)?, a.corpus.ratios, a.corpus.split_seed)?;
    let vocab = build_vocabularies(&corpus)?;
    let tok = tokenizer(&a.corpus);
    let windows = match a.roll_step_minutes {
        None => corpus_windows(&corpus, None, &vocab, &tok)?,
        Some(step) => {
            let mut out = Vec::new();
            for (id, stay) in &corpus.stays {
                for mut w in rolling_windows(id, stay, tok.window_minutes, step, None, &|_| None)? {
                    normalize_values(&mut w, &vocab);
                    out.push(truncate_and_pad(&w, tok.max_seq_len)?);
                }
            }
            out
        }
    };
    let mut out = format!(
        "stays: {}\nregistries: {}\nfeatures: {}\ncategorical_values: {}\nwindows: {}\n",
        corpus.stays.len(),
        corpus.n_registries(),
        vocab.n_features(),
        vocab.n_values(),
        windows.len()
    );
    for split in [Split::Train, Split::Val, Split::Test] {
        let _ = writeln!(out, "stays_{}: {}", split.name(), corpus.stays_in(split).count());
    }
    if let Some(p) = &a.vocab_out {
        write_text(p, &vocab.to_json())?;
    }
    if let Some(p) = &a.windows_out {
        write_atomic(p, |w| {
            for win in &windows {
                let line = window_json(win, corpus.split_of_stay(&win.stay_id));
                std::io::Write::write_all(w, line.to_string().as_bytes())?;
                std::io::Write::write_all(w, b"\n")?;
            }
            Ok(())
        })?;
    }
    Ok(out)
}

fn run_pretrain(a: &PretrainArgs) -> Result<String> {
    let corpus = assign_splits(parse_events(&a.corpus.events)?, a.corpus.ratios, a.corpus.split_seed)?;
    let vocab = build_vocabularies(&corpus)?;
    let tok = tokenizer(&a.corpus);
    let embedding = match &a.embed_cache {
        Some(p) => EmbeddingSource::Cache { path: p.clone() },
        None => EmbeddingSource::Stub {
            dim: a.pre_dim,
            seed: a.embed_stub_seed,
        },
    };
    let meta = RunMeta {
        vocab: vocab.clone(),
        embedding,
        window_minutes: tok.window_minutes,
        max_seq_len: tok.max_seq_len,
        split: a.corpus.ratios,
        split_seed: a.corpus.split_seed,
        task: None,
        windows_per_sample: None,
    };
    let pre = meta.pre_embed()?;
    let train = corpus_windows(&corpus, Some(Split::Train), &vocab, &tok)?;
    let val = corpus_windows(&corpus, Some(Split::Val), &vocab, &tok)?;
    let encoder = EncoderConfig {
        layers: a.layers,
        hidden: a.hidden,
        heads: a.heads,
        ffn_dim: a.ffn_dim,
        max_seq_len: a.corpus.max_seq_len,
        dropout: a.dropout,
    };
    let mut config = ModelConfig::pretrain(
        encoder,
        crate::text_embed::PreEmbed::dim(&pre),
        vocab.n_features(),
        vocab.n_values(),
    );
    config.window_minutes = tok.window_minutes;
    let feature_norm = match a.feature_norm.as_str() {
        "masked" => FeatureNorm::Masked,
        "all-tokens" => FeatureNorm::AllTokens,
        other => return Err(Error::InvalidConfig(format!("feature norm {other:?} is not masked or all-tokens"))),
    };
    let cfg = PretrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        weight_decay: a.weight_decay,
        warmup_fraction: a.warmup_fraction,
        mask: MaskConfig {
            rate: a.mask_rate,
            split: [a.mask_both, a.mask_value_only, a.mask_feature_only],
            corruption: a.corrupt,
        },
        loss: LossConfig {
            alpha: a.alpha,
            beta: a.beta,
            feature_norm,
        },
        seed: a.seed,
        progress: true,
    };
    eprintln!("resolved model: {config:?}");
    eprintln!("resolved training: {cfg:?}");
    let model = Model::<f32>::init(config, a.seed)?;
    let outcome = pretrain(model, &train, &val, &vocab, &pre, &cfg)?;
    save_checkpoint(&outcome.model, &a.out)?;
    meta.save(&a.out)?;
    let log = log_csv(&outcome.log);
    write_text(&sibling(&a.out, ".log.csv"), &log)?;
    Ok(format!("{log}best_epoch: {}\ncheckpoint: {}\n", outcome.best_epoch, a.out.display()))
}

fn class_weight(text: &str) -> Result<ClassWeight> {
    if text == "auto" {
        return Ok(ClassWeight::Auto);
    }
    match text.parse::<f64>() {
        Ok(w) if w.is_finite() && w > 0.0 => Ok(ClassWeight::Fixed(w)),
        _ => Err(Error::InvalidConfig(format!("class weight {text:?} is neither auto nor a positive number"))),
    }
}

fn run_finetune(a: &FinetuneArgs) -> Result<String> {
    let task = TaskKind::parse(&a.task)?;
    let pretrained = load_checkpoint(&a.checkpoint)?;
    if !matches!(pretrained.config.head, HeadConfig::Pretrain { .. }) {
        return Err(Error::ConfigMismatch("fine-tuning expects a pre-trained checkpoint".into()));
    }
    let mut meta = RunMeta::load(&a.checkpoint)?;
    if meta.window_minutes != pretrained.config.window_minutes {
        return Err(Error::ConfigMismatch("sidecar and checkpoint disagree on the window length".into()));
    }
    let corpus = meta.corpus(&a.events)?;
    let labels = parse_labels(&a.labels, task)?;
    let pre = meta.pre_embed()?;
    let tok = meta.tokenizer();
    let mut pool = Vec::new();
    for split in [Split::Train, Split::Val] {
        pool.extend(build_samples(&corpus, Some(split), &labels, task, &meta.vocab, &tok, &pre, a.windows_per_sample)?);
    }
    let test = build_samples(&corpus, Some(Split::Test), &labels, task, &meta.vocab, &tok, &pre, a.windows_per_sample)?;
    if pool.is_empty() {
        return Err(Error::MissingLabels("no labelled train/validation stays".into()));
    }
    let cfg = FinetuneConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        weight_decay: a.weight_decay,
        warmup_fraction: a.warmup_fraction,
        patience: a.patience,
        folds: a.folds,
        unfrozen_layers: a.unfrozen_layers,
        train_embedder: a.train_embedder,
        final_dropout: a.final_dropout,
        class_weight: class_weight(&a.class_weight)?,
        seed: a.seed,
        progress: true,
    };
    eprintln!("resolved fine-tuning: {cfg:?}");
    let outcome = finetune(&pretrained, task, &pool, &test, &cfg)?;
    save_checkpoint(&outcome.model, &a.out)?;
    meta.task = Some(task.name());
    meta.windows_per_sample = Some(a.windows_per_sample);
    meta.save(&a.out)?;
    let text = outcome.report.to_text();
    let results = a.results.clone().unwrap_or_else(|| sibling(&a.out, ".results.txt"));
    write_text(&results, &text)?;
    Ok(text)
}

fn run_evaluate(a: &EvaluateArgs) -> Result<String> {
    let model = load_checkpoint(&a.checkpoint)?;
    let meta = RunMeta::load(&a.checkpoint)?;
    let task_name = meta
        .task
        .as_deref()
        .ok_or_else(|| Error::ConfigMismatch("checkpoint has no task head".into()))?;
    let task = TaskKind::parse(task_name)?;
    if model.config.head_out_dim() != task.out_dim() {
        return Err(Error::ConfigMismatch(format!("head width does not fit task {task_name}")));
    }
    let split = match a.split.as_str() {
        "train" => Some(Split::Train),
        "val" => Some(Split::Val),
        "test" => Some(Split::Test),
        "all" => None,
        other => return Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
    };
    let corpus = meta.corpus(&a.events)?;
    let labels = parse_labels(&a.labels, task)?;
    let pre = meta.pre_embed()?;
    let samples = build_samples(
        &corpus,
        split,
        &labels,
        task,
        &meta.vocab,
        &meta.tokenizer(),
        &pre,
        meta.windows_per_sample.unwrap_or(1),
    )?;
    if samples.is_empty() {
        return Err(Error::MissingLabels(format!("no labelled stays in split {}", a.split)));
    }
    let preds = predict(&model, &samples)?;
    let report = MetricReport {
        task,
        folds: vec![score(task, &preds, &samples)?],
    };
    let text = format!("split: {}\nsamples: {}\n{}", a.split, samples.len(), report.to_text());
    if let Some(p) = &a.results {
        write_text(p, &text)?;
    }
    Ok(text)
}

fn run_gradcheck(a: &GradcheckArgs) -> Result<String> {
    let spec = TinySpec {
        hidden: a.hidden,
        layers: a.layers,
        heads: a.heads,
        ffn_dim: a.ffn_dim,
        max_seq_len: a.max_seq_len,
        n_features: a.features,
        n_values: a.values,
        pre_dim: a.pre_dim,
        windows: a.windows,
        alpha: a.alpha,
        beta: a.beta,
    };
    let config = GradCheckConfig {
        eps: a.eps,
        tolerance: a.tolerance,
        samples_per_tensor: a.samples,
        seed: a.seed,
    };
    let report = TinyProblem::new(&spec, a.seed)?.check(&config)?;
    let mut out = report.to_text(10);
    let _ = writeln!(out, "max_rel_err: {:.3e}\nstatus: pass", report.max_rel_err());
    Ok(out)
}

fn run_inspect(a: &InspectArgs) -> Result<String> {
    let (dim, table) = read_cache(&a.cache)?;
    let mut keys: Vec<&String> = table.keys().collect();
    keys.sort();
    let norms: Vec<f64> = table
        .values()
        .map(|v| v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt())
        .collect();
    let (lo, hi) = norms
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &n| (l.min(n), h.max(n)));
    let mut out = format!("entries: {}\ndim: {dim}\n", table.len());
    if !norms.is_empty() {
        let _ = writeln!(out, "norm_min: {lo:.6}\nnorm_max: {hi:.6}");
    }
    for k in keys.iter().take(a.show) {
        let _ = writeln!(out, "key: {k}");
    }
    if let Some(k) = &a.key {
        let v = table.get(k).ok_or_else(|| Error::CacheMiss(k.clone()))?;
        let shown: Vec<String> = v.iter().take(16).map(|x| format!("{x:.6}")).collect();
        let _ = writeln!(out, "vector[{k}]: {}{}", shown.join(" "), if v.len() > 16 { " ..." } else { "" });
    }
    Ok(out)
}

/// Reads `key=value` lines; blank lines and `#` comments are skipped.
fn read_config_file(path: &Path) -> std::result::Result<Vec<(String, String)>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected key=value", path.display(), i + 1))?;
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

fn flag_given(args: &[OsString], key: &str) -> bool {
    let long = format!("--{key}");
    let prefix = format!("--{key}=");
    args.iter().any(|a| a.to_str().is_some_and(|s| s == long || s.starts_with(&prefix)))
}

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_str()?;
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Appends file settings for every flag the command line leaves out.
fn merge_config(args: Vec<OsString>) -> std::result::Result<Vec<OsString>, String> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let mut merged = args.clone();
    for (k, v) in read_config_file(&path)? {
        if k == "config" {
            return Err("a config file cannot name another config file".into());
        }
        if !flag_given(&args, &k) {
            merged.push(format!("--{k}={v}").into());
        }
    }
    Ok(merged)
}

fn resolved(matches: &ArgMatches) -> String {
    let mut out = String::new();
    let Some((name, sub)) = matches.subcommand() else {
        return out;
    };
    let _ = writeln!(out, "command: {name}");
    let cmd = Cli::command();
    let mut ids: Vec<String> = cmd
        .get_arguments()
        .map(|a| a.get_id().to_string())
        .chain(
            cmd.find_subcommand(name)
                .into_iter()
                .flat_map(|c| c.get_arguments().map(|a| a.get_id().to_string())),
        )
        .filter(|id| id != "help" && id != "version")
        .collect();
    let mut seen = std::collections::HashSet::new();
    ids.retain(|id| seen.insert(id.clone()));
    for id in ids {
        let raw = sub
            .try_get_raw(&id)
            .ok()
            .flatten()
            .or_else(|| matches.try_get_raw(&id).ok().flatten());
        let value = raw
            .map(|vals| vals.map(|v| v.to_string_lossy().into_owned()).collect::<Vec<_>>().join(","))
            .unwrap_or_else(|| "<unset>".into());
        let _ = writeln!(out, "config {id}={value}");
    }
    out
}

/// Runs the command line; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let args = match merge_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let matches = match Cli::command().try_get_matches_from(&args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    eprint!("{}", resolved(&matches));
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: thread pool already configured: {e}");
        }
    }
    let result = match &cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Ingest(a) => run_ingest(a),
        Command::Pretrain(a) => run_pretrain(a),
        Command::Finetune(a) => run_finetune(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::InspectCache(a) => run_inspect(a),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {}: {e}", e.name());
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn ratios() {
        assert_eq!(parse_ratios("0.7, 0.2,0.1").unwrap(), [0.7, 0.2, 0.1]);
        assert!(parse_ratios("0.5,0.5").is_err());
    }

    #[test]
    fn file_values_fill_missing_flags_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.conf");
        std::fs::write(&p, "# comment\nlr = 0.01\nbatch_size=8\n\n").unwrap();
        let args: Vec<OsString> = ["ehrstream", "pretrain", "--config", p.to_str().unwrap(), "--lr", "0.5"]
            .iter()
            .map(OsString::from)
            .collect();
        let merged = merge_config(args).unwrap();
        let tail: Vec<_> = merged[6..].iter().map(|s| s.to_str().unwrap()).collect();
        assert_eq!(tail, ["--batch-size=8"]);
    }

    #[test]
    fn class_weights() {
        assert_eq!(class_weight("auto").unwrap(), ClassWeight::Auto);
        assert_eq!(class_weight("2.5").unwrap(), ClassWeight::Fixed(2.5));
        assert!(class_weight("-1").is_err());
    }
}
