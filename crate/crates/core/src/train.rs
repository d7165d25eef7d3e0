//! Pre-training and fine-tuning loops.
//!
//! Each sequence of a batch runs forward and backward on its own tape in
//! parallel; per-sequence gradients are summed in batch order so results do
//! not depend on thread scheduling.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Scalar, Tape};
use crate::embedder::{embed_on_tape, prepare, WindowInput};
use crate::encoder::{Dropout, Mode, Model};
use crate::error::{Error, Result};
use crate::ingest::{Corpus, Split};
use crate::metrics::{auprc, auroc, mae, mean_std};
use crate::mlvm::{apply_masking, is_eligible, plan_masking, MaskConfig};
use crate::objective::{
    finetune_loss_and_grad, sigmoid, LossBreakdown, LossConfig, SeqSlots, SlotSums, TaskKind,
};
use crate::optim::{AdamW, AdamWConfig, LinearSchedule};
use crate::text_embed::PreEmbed;
use crate::tokenizer::{normalize_values, segment_windows, truncate_and_pad, TokenizerConfig};
use crate::types::{Label, Vocabularies, WindowSequence};

/// Mixes `parts` into `root` (SplitMix64 finalizer per step).
pub fn derive_seed(root: u64, parts: &[u64]) -> u64 {
    let mut x = root;
    for &p in parts {
        x = x.wrapping_add(p.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

/// Tokenized, normalized and truncated windows of every stay in `split`
/// (all stays for `None`), in stay-id order.
pub fn corpus_windows(
    corpus: &Corpus,
    split: Option<Split>,
    vocab: &Vocabularies,
    config: &TokenizerConfig,
) -> Result<Vec<WindowSequence>> {
    let stays: Vec<_> = corpus
        .stays
        .iter()
        .filter(|(id, _)| split.is_none() || corpus.split_of_stay(id) == split)
        .collect();
    let per_stay: Vec<Vec<WindowSequence>> = stays
        .par_iter()
        .map(|(id, stay)| {
            segment_windows(id, stay, config.window_minutes, config.emit_empty_windows)?
                .into_iter()
                .map(|mut w| {
                    normalize_values(&mut w, vocab);
                    truncate_and_pad(&w, config.max_seq_len)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_stay.into_iter().flatten().collect())
}

/// A corrupted window ready for the model plus its reconstruction targets.
#[derive(Debug, Clone)]
pub struct MaskedWindow<T> {
    pub input: WindowInput<T>,
    pub slots: SeqSlots,
}

pub fn mask_window<T: Scalar>(
    seq: &WindowSequence,
    vocab: &Vocabularies,
    mask: &MaskConfig,
    pre: &dyn PreEmbed,
    window_minutes: u32,
    seed: u64,
) -> Result<MaskedWindow<T>> {
    let mut seq = seq.clone();
    seq.tokens.retain(|t| !t.is_pad());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = plan_masking(&seq, vocab, mask, &mut rng)?;
    let corrupted = apply_masking(&seq, &plan, vocab, &mut rng)?;
    Ok(MaskedWindow {
        input: prepare(&corrupted, pre, window_minutes, true)?,
        slots: SeqSlots::from_plan(&plan, seq.tokens.len()),
    })
}

fn add_grads<T: Scalar>(acc: &mut [Array2<T>], grads: Vec<Option<Array2<T>>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        if let Some(g) = g {
            *a += &g;
        }
    }
}

fn zero_grads<T: Scalar>(model: &Model<T>) -> Vec<Array2<T>> {
    model.params.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect()
}

/// Slot sums of a batch and, with `want_grad`, the gradient of the batch's
/// total loss. `seeds[i]` drives the dropout of sequence `i`.
pub fn mlvm_batch<T: Scalar>(
    model: &Model<T>,
    batch: &[MaskedWindow<T>],
    loss: &LossConfig,
    mode: Mode,
    seeds: &[u64],
    want_grad: bool,
) -> Result<(SlotSums, Option<Vec<Array2<T>>>)> {
    let mut counts = SlotSums::default();
    for w in batch {
        counts.add(&w.slots.counts());
    }
    let scales = counts.scales(loss);
    let per_seq: Vec<(SlotSums, Option<Vec<Option<Array2<T>>>>)> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(w, &seed)| {
            let rows = w.slots.rows();
            if rows.is_empty() {
                return Ok((w.slots.counts(), None));
            }
            let mut tape = Tape::new(&model.params.tensors);
            let mut drop = Dropout::new(mode, seed);
            let x = embed_on_tape(&mut tape, model, &w.input, &mut drop)?;
            let h = model.encode_on_tape(&mut tape, x, &w.input.admissible, &mut drop);
            let (f, c, r) = model.mlvm_heads_on_tape(&mut tape, h, rows.clone())?;
            let (sums, g) = w
                .slots
                .evaluate(&rows, tape.value(f), tape.value(c), tape.value(r), &scales);
            let grads = want_grad.then(|| tape.backward(vec![(f, g.feature), (c, g.cat), (r, g.cont)]));
            Ok((sums, grads))
        })
        .collect::<Result<_>>()?;
    let mut sums = SlotSums::default();
    let mut total = want_grad.then(|| zero_grads(model));
    for (s, g) in per_seq {
        sums.add(&s);
        if let (Some(acc), Some(g)) = (total.as_mut(), g) {
            add_grads(acc, g);
        }
    }
    Ok((sums, total))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub mask: MaskConfig,
    pub loss: LossConfig,
    pub seed: u64,
    /// Print each epoch's log rows to stderr as they are produced.
    pub progress: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 5e-5,
            weight_decay: 0.0,
            warmup_fraction: 0.4,
            mask: MaskConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            progress: false,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig("epochs, batch size and learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("bad warmup fraction or weight decay".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRow {
    /// 1-based.
    pub epoch: usize,
    pub split: Split,
    pub loss: LossBreakdown,
    pub lr: f64,
    /// Top-1 accuracy over masked feature slots.
    pub feature_accuracy: f64,
}

pub const LOG_HEADER: &str = "epoch,split,L_f,L_cat,L_cont,L_total,lr";

impl EpochRow {
    pub fn csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:e}",
            self.epoch,
            self.split.name(),
            l.l_f,
            l.l_cat,
            l.l_cont,
            l.l_total,
            self.lr
        )
    }
}

pub fn log_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv());
    }
    out
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: Model<f32>,
    pub log: Vec<EpochRow>,
    pub best_epoch: usize,
    /// Accuracy of always predicting the most frequent masked feature of
    /// the validation set.
    pub val_majority_baseline: f64,
}

impl PretrainOutcome {
    pub fn rows(&self, split: Split) -> impl Iterator<Item = &EpochRow> {
        self.log.iter().filter(move |r| r.split == split)
    }
}

fn accuracy(s: &SlotSums) -> f64 {
    if s.n_f == 0 {
        0.0
    } else {
        s.f_correct as f64 / s.n_f as f64
    }
}

fn mask_all(
    windows: &[&WindowSequence],
    vocab: &Vocabularies,
    cfg: &PretrainConfig,
    pre: &dyn PreEmbed,
    window_minutes: u32,
    seeds: &[u64],
) -> Result<Vec<MaskedWindow<f32>>> {
    windows
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(w, &s)| mask_window(w, vocab, &cfg.mask, pre, window_minutes, s))
        .collect()
}

fn evaluate_masked(model: &Model<f32>, windows: &[MaskedWindow<f32>], loss: &LossConfig, chunk: usize) -> Result<SlotSums> {
    let mut sums = SlotSums::default();
    for part in windows.chunks(chunk.max(1)) {
        let seeds = vec![0; part.len()];
        let (s, _) = mlvm_batch(model, part, loss, Mode::Eval, &seeds, false)?;
        sums.add(&s);
    }
    Ok(sums)
}

fn check_finite(epoch: usize, b: &LossBreakdown) -> Result<()> {
    if !b.l_total.is_finite() {
        return Err(Error::DivergedLoss {
            epoch,
            value: b.l_total,
        });
    }
    Ok(())
}

/// Masked language-value pre-training. Windows without any maskable token
/// are skipped. Validation windows are masked once, so epochs are compared
/// on identical corruptions.
pub fn pretrain(
    mut model: Model<f32>,
    train: &[WindowSequence],
    val: &[WindowSequence],
    vocab: &Vocabularies,
    pre: &dyn PreEmbed,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let window_minutes = model.config.window_minutes;
    let usable = |ws: &[WindowSequence]| -> Vec<usize> {
        ws.iter()
            .enumerate()
            .filter(|(_, w)| w.tokens.iter().any(|t| is_eligible(t, vocab)))
            .map(|(i, _)| i)
            .collect()
    };
    let train_idx = usable(train);
    let val_idx = usable(val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::InvalidConfig("pre-training needs maskable train and validation windows".into()));
    }

    let val_refs: Vec<&WindowSequence> = val_idx.iter().map(|&i| &val[i]).collect();
    let val_seeds: Vec<u64> = val_idx.iter().map(|&i| derive_seed(cfg.seed, &[1, i as u64])).collect();
    let val_masked = mask_all(&val_refs, vocab, cfg, pre, window_minutes, &val_seeds)?;
    let mut target_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for w in &val_masked {
        for &(_, t) in &w.slots.feature {
            *target_counts.entry(t).or_default() += 1;
        }
    }
    let n_val_f: usize = target_counts.values().sum();
    let val_majority_baseline = if n_val_f == 0 {
        0.0
    } else {
        *target_counts.values().max().expect("non-empty") as f64 / n_val_f as f64
    };

    let schedule = LinearSchedule::with_warmup_fraction(cfg.lr, cfg.epochs, cfg.warmup_fraction);
    let adam = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(adam, &model.params.tensors);
    let trainable = vec![true; model.params.tensors.len()];
    let mut log = Vec::with_capacity(2 * cfg.epochs);
    let mut best: Option<(f64, usize, Vec<Array2<f32>>)> = None;

    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch);
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2, epoch as u64])));
        let mut epoch_sums = SlotSums::default();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&WindowSequence> = chunk.iter().map(|&i| &train[i]).collect();
            let mask_seeds: Vec<u64> = chunk
                .iter()
                .map(|&i| derive_seed(cfg.seed, &[3, epoch as u64, i as u64]))
                .collect();
            let batch = mask_all(&refs, vocab, cfg, pre, window_minutes, &mask_seeds)?;
            let drop_seeds: Vec<u64> = chunk
                .iter()
                .map(|&i| derive_seed(cfg.seed, &[4, epoch as u64, b as u64, i as u64]))
                .collect();
            let (sums, grads) = mlvm_batch(&model, &batch, &cfg.loss, Mode::Train, &drop_seeds, true)?;
            if sums.n_slots() == 0 {
                continue;
            }
            let b_loss = sums.breakdown(&cfg.loss)?;
            check_finite(epoch + 1, &b_loss)?;
            epoch_sums.add(&sums);
            let grads = grads.expect("requested");
            opt.step(&mut model.params.tensors, &grads, lr, &trainable)?;
            if !model.params.all_finite() {
                return Err(Error::DivergedLoss {
                    epoch: epoch + 1,
                    value: f64::NAN,
                });
            }
        }
        let train_loss = epoch_sums.breakdown(&cfg.loss)?;
        let val_sums = evaluate_masked(&model, &val_masked, &cfg.loss, cfg.batch_size)?;
        let val_loss = val_sums.breakdown(&cfg.loss)?;
        check_finite(epoch + 1, &val_loss)?;
        log.push(EpochRow {
            epoch: epoch + 1,
            split: Split::Train,
            loss: train_loss,
            lr,
            feature_accuracy: accuracy(&epoch_sums),
        });
        log.push(EpochRow {
            epoch: epoch + 1,
            split: Split::Val,
            loss: val_loss,
            lr,
            feature_accuracy: accuracy(&val_sums),
        });
        if cfg.progress {
            for row in &log[log.len() - 2..] {
                eprintln!("{}", row.csv());
            }
        }
        if best.as_ref().is_none_or(|(l, _, _)| val_loss.l_total < *l) {
            best = Some((val_loss.l_total, epoch + 1, model.params.tensors.clone()));
        }
    }
    let (_, best_epoch, tensors) = best.expect("at least one epoch");
    model.params.tensors = tensors;
    Ok(PretrainOutcome {
        model,
        log,
        best_epoch,
        val_majority_baseline,
    })
}

/// One labelled fine-tuning example: the first windows of a stay.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub stay_id: String,
    pub windows: Vec<WindowInput<T>>,
    pub target: Vec<f64>,
}

/// Builds samples from every labelled stay in `split` (all stays for
/// `None`). Stays without a label are left out.
#[allow(clippy::too_many_arguments)]
pub fn build_samples(
    corpus: &Corpus,
    split: Option<Split>,
    labels: &BTreeMap<String, Label>,
    task: TaskKind,
    vocab: &Vocabularies,
    tokenizer: &TokenizerConfig,
    pre: &dyn PreEmbed,
    windows_per_sample: usize,
) -> Result<Vec<Sample<f32>>> {
    if windows_per_sample == 0 {
        return Err(Error::InvalidConfig("windows per sample must be >= 1".into()));
    }
    let stays: Vec<_> = corpus
        .stays
        .iter()
        .filter(|(id, _)| labels.contains_key(*id))
        .filter(|(id, _)| split.is_none() || corpus.split_of_stay(id) == split)
        .collect();
    stays
        .par_iter()
        .map(|(id, stay)| {
            let target = task.target(&labels[*id])?;
            let windows = segment_windows(id, stay, tokenizer.window_minutes, tokenizer.emit_empty_windows)?
                .into_iter()
                .take(windows_per_sample)
                .map(|mut w| {
                    normalize_values(&mut w, vocab);
                    let w = truncate_and_pad(&w, tokenizer.max_seq_len)?;
                    prepare(&w, pre, tokenizer.window_minutes, true)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Sample {
                stay_id: (*id).clone(),
                windows,
                target,
            })
        })
        .collect()
}

/// Raw task-head outputs (`n × out_dim`), eval mode.
pub fn predict(model: &Model<f32>, samples: &[Sample<f32>]) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new(&model.params.tensors);
            let z = model.task_on_tape(&mut tape, &s.windows, &mut Dropout::eval())?;
            Ok(tape.value(z).iter().map(|v| f64::from(*v)).collect())
        })
        .collect::<Result<_>>()?;
    let k = model.config.head_out_dim();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((samples.len(), k), flat).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

fn targets(samples: &[Sample<f32>], k: usize) -> Array2<f64> {
    let flat: Vec<f64> = samples.iter().flat_map(|s| s.target.iter().copied()).collect();
    Array2::from_shape_vec((samples.len(), k), flat).expect("targets match the task")
}

/// Mean task loss over `samples` and, with `want_grad`, its gradient.
fn task_batch(
    model: &Model<f32>,
    task: TaskKind,
    samples: &[&Sample<f32>],
    pos_weights: &[f64],
    mode: Mode,
    seeds: &[u64],
    want_grad: bool,
) -> Result<(f64, Option<Vec<Array2<f32>>>)> {
    let n = samples.len() as f64;
    let per: Vec<(f64, Option<Vec<Option<Array2<f32>>>>)> = samples
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(s, &seed)| {
            let mut tape = Tape::new(&model.params.tensors);
            let mut drop = Dropout::new(mode, seed);
            let z = model.task_on_tape(&mut tape, &s.windows, &mut drop)?;
            let preds = tape.value(z).mapv(f64::from);
            let t = Array2::from_shape_vec((1, s.target.len()), s.target.clone()).expect("row");
            let (loss, g) = finetune_loss_and_grad(task, preds.view(), t.view(), pos_weights)?;
            let grads = want_grad.then(|| tape.backward(vec![(z, g.mapv(|v| (v / n) as f32))]));
            Ok((loss, grads))
        })
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut total = want_grad.then(|| zero_grads(model));
    for (l, g) in per {
        loss += l;
        if let (Some(acc), Some(g)) = (total.as_mut(), g) {
            add_grads(acc, g);
        }
    }
    Ok((loss / n, total))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassWeight {
    /// `N_neg / N_pos` per output on the training fold.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub patience: usize,
    pub folds: usize,
    pub unfrozen_layers: usize,
    pub train_embedder: bool,
    pub final_dropout: f64,
    pub class_weight: ClassWeight,
    pub seed: u64,
    /// Print one line per fold and epoch to stderr.
    pub progress: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_fraction: 0.4,
            patience: 10,
            folds: 5,
            unfrozen_layers: 5,
            train_embedder: false,
            final_dropout: 0.1,
            class_weight: ClassWeight::Auto,
            seed: 0,
            progress: false,
        }
    }
}

/// Which parameter tensors receive updates: the task head, the top
/// `unfrozen_layers` encoder layers and optionally the embedder.
pub fn trainable_mask(model: &Model<f32>, unfrozen_layers: usize, train_embedder: bool) -> Vec<bool> {
    let mut mask = vec![false; model.params.tensors.len()];
    let layers = model.config.encoder.layers;
    let mut on = model.layout.head_indices();
    for l in layers.saturating_sub(unfrozen_layers)..layers {
        on.extend(model.layout.layer_indices(l));
    }
    if train_embedder {
        on.extend(model.layout.embed_indices());
    }
    for i in on {
        mask[i] = true;
    }
    mask
}

fn pos_weights(task: TaskKind, train: &[&Sample<f32>], cw: ClassWeight) -> Vec<f64> {
    match (task, cw) {
        (TaskKind::Regression, _) => Vec::new(),
        (_, ClassWeight::Fixed(w)) => vec![w; task.out_dim()],
        (_, ClassWeight::Auto) => (0..task.out_dim())
            .map(|j| {
                let pos = train.iter().filter(|s| s.target[j] > 0.5).count();
                let neg = train.len() - pos;
                if pos == 0 || neg == 0 {
                    1.0
                } else {
                    neg as f64 / pos as f64
                }
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FoldMetrics {
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub mae: Option<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub task: TaskKind,
    pub folds: Vec<FoldMetrics>,
}

impl MetricReport {
    fn collect(&self, f: impl Fn(&FoldMetrics) -> Option<f64>) -> Option<Vec<f64>> {
        self.folds.iter().map(f).collect()
    }

    pub fn auroc(&self) -> Option<(f64, f64)> {
        self.collect(|m| m.auroc).map(|v| mean_std(&v))
    }

    pub fn auprc(&self) -> Option<(f64, f64)> {
        self.collect(|m| m.auprc).map(|v| mean_std(&v))
    }

    pub fn mae(&self) -> Option<(f64, f64)> {
        self.collect(|m| m.mae).map(|v| mean_std(&v))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("task: {}\nfolds: {}\n", self.task.name(), self.folds.len());
        for (i, f) in self.folds.iter().enumerate() {
            let _ = write!(out, "fold {}: best_epoch={} epochs_run={} val_loss={:.6}", i + 1, f.best_epoch, f.epochs_run, f.val_loss);
            for (name, v) in [("auroc", f.auroc), ("auprc", f.auprc), ("mae", f.mae)] {
                if let Some(v) = v {
                    let _ = write!(out, " {name}={v:.6}");
                }
            }
            out.push('\n');
        }
        for (name, v) in [("auroc", self.auroc()), ("auprc", self.auprc()), ("mae", self.mae())] {
            if let Some((m, s)) = v {
                let _ = writeln!(out, "{name}: {m:.6} ± {s:.6}");
            }
        }
        out
    }
}

/// Test-set metrics for one task from raw head outputs.
pub fn score(task: TaskKind, preds: &Array2<f64>, samples: &[Sample<f32>]) -> Result<FoldMetrics> {
    let k = task.out_dim();
    let y = targets(samples, k);
    let mut m = FoldMetrics::default();
    match task {
        TaskKind::Regression => {
            let p: Vec<f64> = preds.column(0).to_vec();
            m.mae = Some(mae(&p, &y.column(0).to_vec())?);
        }
        _ => {
            // macro average over outputs that have both classes
            let mut ro = Vec::new();
            let mut pr = Vec::new();
            for j in 0..k {
                let s: Vec<f64> = preds.column(j).iter().map(|&z| sigmoid(z)).collect();
                let l: Vec<bool> = y.column(j).iter().map(|&v| v > 0.5).collect();
                match (auroc(&s, &l), auprc(&s, &l)) {
                    (Ok(a), Ok(b)) => {
                        ro.push(a);
                        pr.push(b);
                    }
                    (Err(Error::DegenerateLabels), _) => {}
                    (Err(e), _) | (_, Err(e)) => return Err(e),
                }
            }
            if ro.is_empty() {
                return Err(Error::DegenerateLabels);
            }
            m.auroc = Some(mean_std(&ro).0);
            m.auprc = Some(mean_std(&pr).0);
        }
    }
    Ok(m)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Model of the fold with the lowest validation loss.
    pub model: Model<f32>,
    pub report: MetricReport,
}

struct FoldRun {
    model: Model<f32>,
    best_epoch: usize,
    epochs_run: usize,
    val_loss: f64,
}

fn train_fold(
    pretrained: &Model<f32>,
    task: TaskKind,
    train: &[&Sample<f32>],
    val: &[&Sample<f32>],
    cfg: &FinetuneConfig,
    fold: usize,
) -> Result<FoldRun> {
    let fold_seed = derive_seed(cfg.seed, &[1, fold as u64]);
    let mut model = pretrained.with_task_head(task.out_dim(), cfg.final_dropout, fold_seed)?;
    let trainable = trainable_mask(&model, cfg.unfrozen_layers, cfg.train_embedder);
    let weights = pos_weights(task, train, cfg.class_weight);
    let schedule = LinearSchedule::with_warmup_fraction(cfg.lr, cfg.epochs, cfg.warmup_fraction);
    let adam = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(adam, &model.params.tensors);
    let val_loss = |m: &Model<f32>| -> Result<f64> {
        let seeds = vec![0; val.len()];
        Ok(task_batch(m, task, val, &weights, Mode::Eval, &seeds, false)?.0)
    };
    let mut best = (val_loss(&model)?, 0usize, model.params.tensors.clone());
    let mut epochs_run = 0;
    for epoch in 0..cfg.epochs {
        epochs_run = epoch + 1;
        let lr = schedule.lr(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(fold_seed, &[1, epoch as u64])));
        let mut train_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample<f32>> = chunk.iter().map(|&i| train[i]).collect();
            let seeds: Vec<u64> = chunk
                .iter()
                .map(|&i| derive_seed(fold_seed, &[2, epoch as u64, b as u64, i as u64]))
                .collect();
            let (loss, grads) = task_batch(&model, task, &batch, &weights, Mode::Train, &seeds, true)?;
            if !loss.is_finite() {
                return Err(Error::DivergedLoss { epoch: epoch + 1, value: loss });
            }
            train_loss += loss * chunk.len() as f64;
            opt.step(&mut model.params.tensors, &grads.expect("requested"), lr, &trainable)?;
        }
        let v = val_loss(&model)?;
        if !v.is_finite() {
            return Err(Error::DivergedLoss { epoch: epoch + 1, value: v });
        }
        if cfg.progress {
            let t = train_loss / train.len().max(1) as f64;
            eprintln!("fold {} epoch {}: train_loss={t:.6} val_loss={v:.6} lr={lr}", fold + 1, epoch + 1);
        }
        if v < best.0 {
            best = (v, epoch + 1, model.params.tensors.clone());
        } else if epoch + 1 - best.1 >= cfg.patience {
            break;
        }
    }
    model.params.tensors = best.2;
    Ok(FoldRun {
        model,
        best_epoch: best.1,
        epochs_run,
        val_loss: best.0,
    })
}

/// K-fold fine-tuning: the pool (train + validation stays) is re-split into
/// folds, each fold trains a fresh task head with early stopping on its
/// held-out part, and every fold is scored on the fixed test samples.
pub fn finetune(
    pretrained: &Model<f32>,
    task: TaskKind,
    pool: &[Sample<f32>],
    test: &[Sample<f32>],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if cfg.folds < 2 || cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::InvalidConfig("fine-tuning needs >= 2 folds and positive epochs, batch size, lr".into()));
    }
    if let ClassWeight::Fixed(w) = cfg.class_weight {
        if !(w.is_finite() && w > 0.0) {
            return Err(Error::InvalidConfig(format!("class weight {w} must be positive")));
        }
    }
    if pool.len() < cfg.folds {
        return Err(Error::MissingLabels(format!("{} labelled stays for {} folds", pool.len(), cfg.folds)));
    }
    if test.is_empty() {
        return Err(Error::MissingLabels("no labelled test stays".into()));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0])));
    let mut folds = Vec::with_capacity(cfg.folds);
    let mut best: Option<(f64, Model<f32>)> = None;
    for f in 0..cfg.folds {
        let (val, train): (Vec<_>, Vec<_>) = order.iter().enumerate().partition(|(pos, _)| pos % cfg.folds == f);
        let val: Vec<&Sample<f32>> = val.into_iter().map(|(_, &i)| &pool[i]).collect();
        let train: Vec<&Sample<f32>> = train.into_iter().map(|(_, &i)| &pool[i]).collect();
        let run = train_fold(pretrained, task, &train, &val, cfg, f)?;
        let preds = predict(&run.model, test)?;
        let mut m = score(task, &preds, test)?;
        m.best_epoch = run.best_epoch;
        m.epochs_run = run.epochs_run;
        m.val_loss = run.val_loss;
        folds.push(m);
        if best.as_ref().is_none_or(|(l, _)| run.val_loss < *l) {
            best = Some((run.val_loss, run.model));
        }
    }
    Ok(FinetuneOutcome {
        model: best.expect("folds >= 2").1,
        report: MetricReport { task, folds },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(7, &[1, 2]);
        assert_ne!(a, derive_seed(7, &[2, 1]));
        assert_ne!(a, derive_seed(8, &[1, 2]));
        assert_eq!(a, derive_seed(7, &[1, 2]));
    }
}
