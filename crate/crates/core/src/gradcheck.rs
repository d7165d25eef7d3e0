//! Central-difference verification of analytic gradients.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{EncoderConfig, Mode, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::mlvm::MaskConfig;
use crate::objective::LossConfig;
use crate::text_embed::EmbeddingProvider;
use crate::train::{mask_window, mlvm_batch, MaskedWindow};
use crate::types::{
    Minute, Token, TokenValue, Vocab, Vocabularies, WindowSequence, FEATURE_RESERVED, VALUE_RESERVED,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// Entries checked per tensor; smaller tensors are checked in full.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            tolerance: 1e-4,
            samples_per_tensor: 24,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntryCheck {
    pub param: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// Per tensor: entries checked and the largest relative error.
    pub tensors: Vec<(String, usize, f64)>,
    /// Largest errors first.
    pub worst: Vec<EntryCheck>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.worst.first().map_or(0.0, |e| e.rel_err)
    }

    /// Largest error per group, where a group is the name up to its last
    /// `.` (`layer0.attn.q.weight` → `layer0.attn.q`).
    pub fn groups(&self) -> BTreeMap<String, f64> {
        let mut out: BTreeMap<String, f64> = BTreeMap::new();
        for (name, _, err) in &self.tensors {
            let group = name.rsplit_once('.').map_or(name.as_str(), |(g, _)| g).to_string();
            let e = out.entry(group).or_insert(0.0);
            *e = e.max(*err);
        }
        out
    }

    pub fn to_text(&self, top: usize) -> String {
        let mut out = String::new();
        for (name, n, err) in &self.tensors {
            out.push_str(&format!("{name}: {n} entries, max rel err {err:.3e}\n"));
        }
        out.push_str("worst:\n");
        for e in self.worst.iter().take(top) {
            out.push_str(&format!(
                "  {}[{},{}] analytic={:.9e} numeric={:.9e} rel_err={:.3e}\n",
                e.param, e.index.0, e.index.1, e.analytic, e.numeric, e.rel_err
            ));
        }
        out
    }
}

/// `|a − n| / max(1, |a|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn pick_entries(grad: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let cols = grad.ncols();
    let at = |flat: usize| (flat / cols, flat % cols);
    if grad.len() <= k {
        return (0..grad.len()).map(at).collect();
    }
    // half from entries the loss actually touches, half uniform
    let nonzero: Vec<usize> = grad
        .iter()
        .enumerate()
        .filter(|(_, g)| **g != 0.0)
        .map(|(i, _)| i)
        .collect();
    let from_nonzero = (k / 2).min(nonzero.len());
    let mut picks: Vec<usize> = sample(rng, nonzero.len(), from_nonzero)
        .into_iter()
        .map(|i| nonzero[i])
        .collect();
    for i in sample(rng, grad.len(), k - from_nonzero) {
        if !picks.contains(&i) {
            picks.push(i);
        }
    }
    picks.sort_unstable();
    picks.into_iter().map(at).collect()
}

/// Compares `analytic` with central differences of `loss` at sampled
/// entries of every tensor. Fails with `GradMismatch` naming the worst
/// tensor when any error exceeds the tolerance.
pub fn grad_check(
    names: &[String],
    params: &[Array2<f64>],
    analytic: &[Array2<f64>],
    loss: impl Fn(&[Array2<f64>]) -> Result<f64>,
    config: &GradCheckConfig,
) -> Result<GradReport> {
    if names.len() != params.len() || analytic.len() != params.len() {
        return Err(Error::ShapeMismatch("names, params and gradients differ in count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut work = params.to_vec();
    let mut tensors = Vec::with_capacity(params.len());
    let mut all = Vec::new();
    for (i, name) in names.iter().enumerate() {
        if analytic[i].dim() != params[i].dim() {
            return Err(Error::ShapeMismatch(format!("{name}: gradient shape differs")));
        }
        let entries = pick_entries(&analytic[i], config.samples_per_tensor, &mut rng);
        let mut worst: f64 = 0.0;
        for &idx in &entries {
            let x = work[i][idx];
            work[i][idx] = x + config.eps;
            let up = loss(&work)?;
            work[i][idx] = x - config.eps;
            let down = loss(&work)?;
            work[i][idx] = x;
            let numeric = (up - down) / (2.0 * config.eps);
            let a = analytic[i][idx];
            let e = rel_err(a, numeric);
            worst = worst.max(e);
            all.push(EntryCheck {
                param: name.clone(),
                index: idx,
                analytic: a,
                numeric,
                rel_err: e,
            });
        }
        tensors.push((name.clone(), entries.len(), worst));
    }
    all.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    let report = GradReport { tensors, worst: all };
    if let Some(w) = report.worst.first() {
        if !(w.rel_err <= config.tolerance) {
            return Err(Error::GradMismatch {
                param: w.param.clone(),
                rel_err: w.rel_err,
            });
        }
    }
    Ok(report)
}

/// Shape of the small model used for gradient checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TinySpec {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    /// Feature vocabulary size including the reserved entries.
    pub n_features: usize,
    /// Categorical value vocabulary size including the reserved entries.
    pub n_values: usize,
    pub pre_dim: usize,
    pub windows: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for TinySpec {
    fn default() -> Self {
        TinySpec {
            hidden: 8,
            layers: 1,
            heads: 2,
            ffn_dim: 16,
            max_seq_len: 6,
            n_features: 12,
            n_values: 7,
            pre_dim: 6,
            windows: 4,
            alpha: 3.0,
            beta: 1.0,
        }
    }
}

/// Gradients of the tiny model plus what is needed to re-evaluate its loss.
pub struct TinyProblem {
    pub model: Model<f64>,
    pub batch: Vec<MaskedWindow<f64>>,
    pub loss: LossConfig,
    pub seeds: Vec<u64>,
}

impl TinyProblem {
    pub fn new(spec: &TinySpec, seed: u64) -> Result<TinyProblem> {
        let reserved_f = FEATURE_RESERVED.len();
        let reserved_v = VALUE_RESERVED.len();
        if spec.n_features <= reserved_f || spec.n_values <= reserved_v || spec.max_seq_len < 2 {
            return Err(Error::InvalidConfig("tiny spec needs data features, data values and room for tokens".into()));
        }
        let features: Vec<String> = (0..spec.n_features - reserved_f).map(|i| format!("src: feature {i}")).collect();
        let values: Vec<String> = (0..spec.n_values - reserved_v).map(|i| format!("value {i}")).collect();
        let vocab = Vocabularies {
            features: Vocab::new(FEATURE_RESERVED.iter().map(|s| s.to_string()).chain(features.iter().cloned())),
            categorical_values: Vocab::new(VALUE_RESERVED.iter().map(|s| s.to_string()).chain(values.iter().cloned())),
            per_feature_stats: BTreeMap::new(),
        };
        let encoder = EncoderConfig {
            layers: spec.layers,
            hidden: spec.hidden,
            heads: spec.heads,
            ffn_dim: spec.ffn_dim,
            max_seq_len: spec.max_seq_len,
            dropout: 0.1,
        };
        let config = ModelConfig::pretrain(encoder, spec.pre_dim, spec.n_features, spec.n_values);
        let mut model = Model::<f64>::init(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        // perturb zero-initialized tensors so every term carries signal
        for t in &mut model.params.tensors {
            t.mapv_inplace(|v| v + rng.random_range(-0.05..0.05));
        }
        let provider = EmbeddingProvider::stub(spec.pre_dim, seed);
        let mask = MaskConfig {
            rate: 0.7,
            ..MaskConfig::default()
        };
        let mut batch = Vec::new();
        let mut w = 0u64;
        while batch.len() < spec.windows {
            let mut tokens = vec![Token::cls()];
            for j in 1..spec.max_seq_len {
                let f = features[rng.random_range(0..features.len())].clone();
                let continuous = j % 2 == 0;
                let value = if continuous {
                    TokenValue::Number(rng.random_range(-2.0..2.0))
                } else {
                    TokenValue::Category(values[rng.random_range(0..values.len())].clone())
                };
                tokens.push(Token {
                    feature_text: f,
                    value,
                    tau_minutes: rng.random_range(0..1440),
                    delta_minutes: rng.random_range(0..60),
                    is_continuous: continuous,
                    is_static: false,
                });
            }
            let seq = WindowSequence {
                stay_id: format!("g{w}"),
                window_index: 0,
                window_start: Minute(0),
                tokens,
                label: None,
            };
            let m = mask_window::<f64>(&seq, &vocab, &mask, &provider, config.window_minutes, seed.wrapping_add(w))?;
            w += 1;
            if !m.slots.rows().is_empty() {
                batch.push(m);
            }
        }
        let seeds = (0..batch.len() as u64).map(|i| seed.wrapping_mul(31).wrapping_add(i)).collect();
        Ok(TinyProblem {
            model,
            batch,
            loss: LossConfig {
                alpha: spec.alpha,
                beta: spec.beta,
                ..LossConfig::default()
            },
            seeds,
        })
    }

    pub fn loss_at(&self, params: &[Array2<f64>]) -> Result<f64> {
        let mut model = self.model.clone();
        model.params.tensors = params.to_vec();
        let (sums, _) = mlvm_batch(&model, &self.batch, &self.loss, Mode::Train, &self.seeds, false)?;
        Ok(sums.breakdown(&self.loss)?.l_total)
    }

    pub fn gradient(&self) -> Result<Vec<Array2<f64>>> {
        let (_, g) = mlvm_batch(&self.model, &self.batch, &self.loss, Mode::Train, &self.seeds, true)?;
        Ok(g.expect("requested"))
    }

    pub fn check(&self, config: &GradCheckConfig) -> Result<GradReport> {
        let grads = self.gradient()?;
        self.check_with(&grads, config)
    }

    /// Checks caller-supplied gradients, e.g. deliberately corrupted ones.
    pub fn check_with(&self, grads: &[Array2<f64>], config: &GradCheckConfig) -> Result<GradReport> {
        grad_check(
            &self.model.params.names,
            &self.model.params.tensors,
            grads,
            |p| self.loss_at(p),
            config,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_affine_toy() {
        // L = Σ (x W + b − y)² over two rows
        let x = array![[0.5, -1.0, 2.0], [1.5, 0.3, -0.7]];
        let y = array![[1.0, 0.0], [-1.0, 2.0]];
        let loss = |p: &[Array2<f64>]| -> Result<f64> {
            let r = x.dot(&p[0]) + p[1].row(0) - &y;
            Ok(r.iter().map(|v| v * v).sum())
        };
        let w = array![[0.1, -0.2], [0.3, 0.4], [-0.5, 0.6]];
        let b = array![[0.05, -0.05]];
        let r = x.dot(&w) + b.row(0) - &y;
        let gw = x.t().dot(&r) * 2.0;
        let gb = r.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0)) * 2.0;
        let config = GradCheckConfig {
            eps: 1e-4,
            tolerance: 1e-7,
            ..GradCheckConfig::default()
        };
        let names = vec!["w".to_string(), "b".to_string()];
        let report = grad_check(&names, &[w, b], &[gw, gb], loss, &config).unwrap();
        assert!(report.max_rel_err() <= 1e-7);
        assert_eq!(report.tensors.len(), 2);
    }

    #[test]
    fn tiny_model_passes() {
        let problem = TinyProblem::new(&TinySpec::default(), 11).unwrap();
        let report = problem.check(&GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_err() <= 1e-4, "{}", report.to_text(5));
    }

    #[test]
    fn task_head_gradients_match() {
        use crate::autodiff::Tape;
        use crate::encoder::Dropout;
        use crate::objective::{finetune_loss_and_grad, TaskKind};

        let problem = TinyProblem::new(&TinySpec::default(), 13).unwrap();
        let mut model = problem.model.with_task_head(1, 0.1, 5).unwrap();
        for t in &mut model.params.tensors {
            t.mapv_inplace(|v| v + 0.01);
        }
        // two samples of two windows each, one positive
        let samples: Vec<(Vec<_>, f64)> = vec![
            (vec![problem.batch[0].input.clone(), problem.batch[1].input.clone()], 1.0),
            (vec![problem.batch[2].input.clone(), problem.batch[3].input.clone()], 0.0),
        ];
        let run = |params: &[Array2<f64>], grads: bool| -> Result<(f64, Vec<Array2<f64>>)> {
            let mut total = 0.0;
            let mut acc: Vec<Array2<f64>> = params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
            for (i, (windows, y)) in samples.iter().enumerate() {
                let mut tape = Tape::new(params);
                let mut drop = Dropout::new(Mode::Train, 40 + i as u64);
                let z = model.task_on_tape(&mut tape, windows, &mut drop)?;
                let t = Array2::from_elem((1, 1), *y);
                let (l, g) = finetune_loss_and_grad(TaskKind::Binary, tape.value(z).view(), t.view(), &[3.0])?;
                total += l / 2.0;
                if grads {
                    for (a, g) in acc.iter_mut().zip(tape.backward(vec![(z, g / 2.0)])) {
                        if let Some(g) = g {
                            *a += &g;
                        }
                    }
                }
            }
            Ok((total, acc))
        };
        let (_, analytic) = run(&model.params.tensors, true).unwrap();
        let head = model.params.index_of("head.task.weight").unwrap();
        assert!(analytic[head].iter().any(|g| g.abs() > 1e-6));
        let report = grad_check(
            &model.params.names,
            &model.params.tensors,
            &analytic,
            |p| Ok(run(p, false)?.0),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err() <= 1e-4, "{}", report.to_text(5));
    }

    #[test]
    fn corrupted_gradient_detected() {
        let problem = TinyProblem::new(&TinySpec::default(), 12).unwrap();
        let mut grads = problem.gradient().unwrap();
        let i = problem.model.params.index_of("embed.norm.gain").unwrap();
        grads[i][[0, 1]] += 0.5;
        let err = problem.check_with(&grads, &GradCheckConfig::default());
        match err {
            Err(Error::GradMismatch { param, .. }) => assert_eq!(param, "embed.norm.gain"),
            other => panic!("expected GradMismatch, got {other:?}"),
        }
    }
}
