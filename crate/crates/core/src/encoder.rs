//! Bidirectional post-norm transformer encoder over composed token
//! embeddings, with the three reconstruction heads used in pre-training or
//! a single task head used in fine-tuning.
//!
//! There is no positional encoding: time enters only through the embedder's
//! `tau`/`delta` tables, so the [CLS] output is invariant to the order of the
//! other tokens.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{Scalar, Tape, Var};
use crate::embedder::{self, WindowInput};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 6,
            hidden: 768,
            heads: 6,
            ffn_dim: 64,
            max_seq_len: crate::types::DEFAULT_MAX_SEQ_LEN,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn_dim == 0 || self.max_seq_len == 0 {
            return Err(Error::InvalidConfig(format!("all encoder dims must be >= 1: {self:?}")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadConfig {
    /// Feature, categorical-value and continuous-value heads.
    Pretrain { n_features: usize, n_values: usize },
    /// One task head fed by the [CLS] output, with dropout in front of it.
    Finetune { out_dim: usize, final_dropout: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub window_minutes: u32,
    pub pre_dim: usize,
    pub embed_dropout: f64,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn pretrain(encoder: EncoderConfig, pre_dim: usize, n_features: usize, n_values: usize) -> Self {
        ModelConfig {
            encoder,
            window_minutes: crate::types::DEFAULT_WINDOW_MINUTES,
            pre_dim,
            embed_dropout: encoder.dropout,
            head: HeadConfig::Pretrain {
                n_features,
                n_values,
            },
        }
    }

    /// Width of the task head output, 0 for pre-training heads.
    pub fn head_out_dim(&self) -> usize {
        match self.head {
            HeadConfig::Finetune { out_dim, .. } => out_dim,
            HeadConfig::Pretrain { .. } => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.window_minutes == 0 || self.pre_dim == 0 {
            return Err(Error::InvalidConfig("window and pre-embedding dims must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.embed_dropout) {
            return Err(Error::InvalidConfig("embedding dropout not in [0, 1)".into()));
        }
        match self.head {
            HeadConfig::Pretrain {
                n_features,
                n_values,
            } if n_features == 0 || n_values == 0 => {
                Err(Error::InvalidConfig("vocabularies must be non-empty".into()))
            }
            HeadConfig::Finetune {
                out_dim,
                final_dropout,
            } if out_dim == 0 || !(0.0..1.0).contains(&final_dropout) => {
                Err(Error::InvalidConfig("task head needs out_dim >= 1 and dropout in [0, 1)".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Indices of the embedder's tensors in [`Params`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderLayout {
    pub feature_w: usize,
    pub feature_b: usize,
    pub value_w: usize,
    pub value_b: usize,
    pub time: usize,
    pub duration: usize,
    pub special_feature: usize,
    pub special_value: usize,
    pub norm_gain: usize,
    pub norm_bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerLayout {
    pub q_w: usize,
    pub q_b: usize,
    pub k_w: usize,
    pub k_b: usize,
    pub v_w: usize,
    pub v_b: usize,
    pub o_w: usize,
    pub o_b: usize,
    pub attn_gain: usize,
    pub attn_bias: usize,
    pub ffn_in_w: usize,
    pub ffn_in_b: usize,
    pub ffn_out_w: usize,
    pub ffn_out_b: usize,
    pub ffn_gain: usize,
    pub ffn_bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadLayout {
    Pretrain {
        feature_w: usize,
        feature_b: usize,
        cat_w: usize,
        cat_b: usize,
        cont_w: usize,
        cont_b: usize,
    },
    Finetune {
        w: usize,
        b: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub embed: EmbedderLayout,
    pub layers: Vec<LayerLayout>,
    pub head: HeadLayout,
    pub n_params: usize,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// U(-b, b)
    Uniform(f64),
    Normal(f64),
    Zeros,
    Ones,
}

struct Spec {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl Spec {
    fn add(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn affine(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.add(format!("{prefix}.weight"), (fan_in, fan_out), Init::Uniform(bound));
        let b = self.add(format!("{prefix}.bias"), (1, fan_out), Init::Zeros);
        (w, b)
    }

    fn norm(&mut self, prefix: &str, d: usize) -> (usize, usize) {
        let g = self.add(format!("{prefix}.gain"), (1, d), Init::Ones);
        let b = self.add(format!("{prefix}.bias"), (1, d), Init::Zeros);
        (g, b)
    }
}

fn build_spec(config: &ModelConfig) -> (Spec, Layout) {
    let d = config.encoder.hidden;
    let w = config.window_minutes as usize;
    let pre = config.pre_dim;
    let mut s = Spec {
        names: vec![],
        shapes: vec![],
        inits: vec![],
    };
    let (feature_w, feature_b) = s.affine("embed.feature", pre, d);
    let (value_w, value_b) = s.affine("embed.value", pre, d);
    let time = s.add("embed.time".into(), (w, d), Init::Normal(0.02));
    let duration = s.add("embed.duration".into(), (w, d), Init::Normal(0.02));
    let special_std = 1.0 / (pre as f64).sqrt();
    let special_feature = s.add("embed.special.feature".into(), (3, pre), Init::Normal(special_std));
    let special_value = s.add("embed.special.value".into(), (3, pre), Init::Normal(special_std));
    let (norm_gain, norm_bias) = s.norm("embed.norm", d);
    let embed = EmbedderLayout {
        feature_w,
        feature_b,
        value_w,
        value_b,
        time,
        duration,
        special_feature,
        special_value,
        norm_gain,
        norm_bias,
    };
    let layers = (0..config.encoder.layers)
        .map(|l| {
            let p = format!("layer{l}");
            let (q_w, q_b) = s.affine(&format!("{p}.attn.q"), d, d);
            let (k_w, k_b) = s.affine(&format!("{p}.attn.k"), d, d);
            let (v_w, v_b) = s.affine(&format!("{p}.attn.v"), d, d);
            let (o_w, o_b) = s.affine(&format!("{p}.attn.out"), d, d);
            let (attn_gain, attn_bias) = s.norm(&format!("{p}.attn.norm"), d);
            let f = config.encoder.ffn_dim;
            let (ffn_in_w, ffn_in_b) = s.affine(&format!("{p}.ffn.in"), d, f);
            let (ffn_out_w, ffn_out_b) = s.affine(&format!("{p}.ffn.out"), f, d);
            let (ffn_gain, ffn_bias) = s.norm(&format!("{p}.ffn.norm"), d);
            LayerLayout {
                q_w,
                q_b,
                k_w,
                k_b,
                v_w,
                v_b,
                o_w,
                o_b,
                attn_gain,
                attn_bias,
                ffn_in_w,
                ffn_in_b,
                ffn_out_w,
                ffn_out_b,
                ffn_gain,
                ffn_bias,
            }
        })
        .collect();
    let head = match config.head {
        HeadConfig::Pretrain {
            n_features,
            n_values,
        } => {
            let (feature_w, feature_b) = s.affine("head.feature", d, n_features);
            let (cat_w, cat_b) = s.affine("head.cat", d, n_values);
            let (cont_w, cont_b) = s.affine("head.cont", d, 1);
            HeadLayout::Pretrain {
                feature_w,
                feature_b,
                cat_w,
                cat_b,
                cont_w,
                cont_b,
            }
        }
        HeadConfig::Finetune { out_dim, .. } => {
            let (w, b) = s.affine("head.task", d, out_dim);
            HeadLayout::Finetune { w, b }
        }
    };
    let n_params = s.names.len();
    (
        s,
        Layout {
            embed,
            layers,
            head,
            n_params,
        },
    )
}

impl Layout {
    pub fn for_config(config: &ModelConfig) -> Layout {
        build_spec(config).1
    }

    pub fn embed_indices(&self) -> Vec<usize> {
        let e = &self.embed;
        vec![
            e.feature_w,
            e.feature_b,
            e.value_w,
            e.value_b,
            e.time,
            e.duration,
            e.special_feature,
            e.special_value,
            e.norm_gain,
            e.norm_bias,
        ]
    }

    pub fn layer_indices(&self, l: usize) -> Vec<usize> {
        let x = &self.layers[l];
        vec![
            x.q_w, x.q_b, x.k_w, x.k_b, x.v_w, x.v_b, x.o_w, x.o_b, x.attn_gain, x.attn_bias,
            x.ffn_in_w, x.ffn_in_b, x.ffn_out_w, x.ffn_out_b, x.ffn_gain, x.ffn_bias,
        ]
    }

    pub fn head_indices(&self) -> Vec<usize> {
        match self.head {
            HeadLayout::Pretrain {
                feature_w,
                feature_b,
                cat_w,
                cat_b,
                cont_w,
                cont_b,
            } => vec![feature_w, feature_b, cat_w, cat_b, cont_w, cont_b],
            HeadLayout::Finetune { w, b } => vec![w, b],
        }
    }
}

/// Named parameter tensors, all 2-D.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Array2<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.mapv(|v| U::c(v.f64())))
                .collect(),
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Dropout switch plus the stream its masks are drawn from.
pub struct Dropout {
    pub active: bool,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Dropout {
            active: mode == Mode::Train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn eval() -> Self {
        Dropout::new(Mode::Eval, 0)
    }

    pub fn apply<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Var, rate: f64) -> Var {
        if !self.active || rate <= 0.0 {
            return x;
        }
        let keep = T::c(1.0 / (1.0 - rate));
        let shape = tape.value(x).raw_dim();
        let mask = Array2::from_shape_simple_fn(shape, || {
            if self.rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        });
        tape.mul_const(x, mask)
    }
}

/// Per-position outputs of the three reconstruction heads.
#[derive(Debug, Clone, PartialEq)]
pub struct MlvmOutputs<T> {
    /// `B × L × 𝓕`
    pub feature_logits: Array3<T>,
    /// `B × L × 𝓥`
    pub cat_logits: Array3<T>,
    /// `B × L`
    pub cont: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Params<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (spec, layout) = build_spec(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = spec
            .shapes
            .iter()
            .zip(&spec.inits)
            .map(|(&shape, init)| init_tensor(shape, *init, &mut rng))
            .collect();
        Ok(Model {
            config,
            layout,
            params: Params {
                names: spec.names,
                tensors,
            },
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: Params<T>) -> Result<Self> {
        config.validate()?;
        let (spec, layout) = build_spec(&config);
        if spec.names != params.names {
            return Err(Error::ConfigMismatch("parameter names differ from the config".into()));
        }
        for ((name, shape), t) in spec.names.iter().zip(&spec.shapes).zip(&params.tensors) {
            if t.dim() != *shape {
                return Err(Error::ConfigMismatch(format!(
                    "{name}: stored shape {:?}, config expects {shape:?}",
                    t.dim()
                )));
            }
        }
        Ok(Model {
            config,
            layout,
            params,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config,
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    /// Replaces the reconstruction heads by a freshly initialized task head;
    /// embedder and encoder weights carry over.
    pub fn with_task_head(&self, out_dim: usize, final_dropout: f64, seed: u64) -> Result<Model<T>> {
        let config = ModelConfig {
            head: HeadConfig::Finetune {
                out_dim,
                final_dropout,
            },
            ..self.config
        };
        let mut fresh = Model::init(config, seed)?;
        let heads = self.layout.head_indices();
        for (i, name) in self.params.names.iter().enumerate() {
            if heads.contains(&i) {
                continue;
            }
            let j = fresh.params.index_of(name).expect("shared trunk parameter");
            fresh.params.tensors[j] = self.params.tensors[i].clone();
        }
        Ok(fresh)
    }

    fn check_mask(&self, rows: usize, mask: &[u8]) -> Result<()> {
        if mask.len() != rows {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} entries for {rows} positions",
                mask.len()
            )));
        }
        if mask.first() != Some(&1) {
            return Err(Error::ShapeMismatch("position 0 must be a real [CLS] token".into()));
        }
        Ok(())
    }

    /// Encoder stack on an existing tape. `admissible[j]` is false for
    /// [PAD] keys.
    pub fn encode_on_tape(&self, tape: &mut Tape<T>, x: Var, admissible: &[bool], drop: &mut Dropout) -> Var {
        let cfg = &self.config.encoder;
        let dh = cfg.hidden / cfg.heads;
        let inv_sqrt = T::c(1.0 / (dh as f64).sqrt());
        let eps = T::c(crate::embedder::LAYER_NORM_EPS);
        let mut h = x;
        for layer in &self.layout.layers {
            let p = |t: &mut Tape<T>, i| t.param(i);
            let (qw, qb, kw, kb, vw, vb) = (
                p(tape, layer.q_w),
                p(tape, layer.q_b),
                p(tape, layer.k_w),
                p(tape, layer.k_b),
                p(tape, layer.v_w),
                p(tape, layer.v_b),
            );
            let q = tape.affine(h, qw, qb);
            let k = tape.affine(h, kw, kb);
            let v = tape.affine(h, vw, vb);
            let mut outs = Vec::with_capacity(cfg.heads);
            for head in 0..cfg.heads {
                let qh = tape.slice_cols(q, head * dh, dh);
                let kh = tape.slice_cols(k, head * dh, dh);
                let vh = tape.slice_cols(v, head * dh, dh);
                let scores = tape.matmul_t(qh, kh);
                let scores = tape.scale(scores, inv_sqrt);
                let probs = tape.masked_softmax(scores, admissible);
                let probs = drop.apply(tape, probs, cfg.dropout);
                outs.push(tape.matmul(probs, vh));
            }
            let ctx = if outs.len() == 1 { outs[0] } else { tape.concat_cols(outs) };
            let (ow, ob) = (tape.param(layer.o_w), tape.param(layer.o_b));
            let attn = tape.affine(ctx, ow, ob);
            let attn = drop.apply(tape, attn, cfg.dropout);
            let res = tape.add(h, attn);
            let (g, b) = (tape.param(layer.attn_gain), tape.param(layer.attn_bias));
            let h1 = tape.layer_norm(res, g, b, eps);

            let (w1, b1) = (tape.param(layer.ffn_in_w), tape.param(layer.ffn_in_b));
            let (w2, b2) = (tape.param(layer.ffn_out_w), tape.param(layer.ffn_out_b));
            let inner = tape.affine(h1, w1, b1);
            let inner = tape.gelu(inner);
            let ff = tape.affine(inner, w2, b2);
            let ff = drop.apply(tape, ff, cfg.dropout);
            let res = tape.add(h1, ff);
            let (g, b) = (tape.param(layer.ffn_gain), tape.param(layer.ffn_bias));
            h = tape.layer_norm(res, g, b, eps);
        }
        h
    }

    /// Runs the encoder over already-composed embeddings (`L × d` each).
    pub fn forward(
        &self,
        batch: &[Array2<T>],
        masks: &[Vec<u8>],
        mode: Mode,
        seed: u64,
    ) -> Result<Vec<Array2<T>>> {
        if batch.len() != masks.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} sequences but {} masks",
                batch.len(),
                masks.len()
            )));
        }
        let d = self.config.encoder.hidden;
        let mut drop = Dropout::new(mode, seed);
        batch
            .iter()
            .zip(masks)
            .map(|(x, mask)| {
                if x.ncols() != d {
                    return Err(Error::ShapeMismatch(format!(
                        "embedding width {} but hidden size {d}",
                        x.ncols()
                    )));
                }
                self.check_mask(x.nrows(), mask)?;
                let admissible: Vec<bool> = mask.iter().map(|&m| m != 0).collect();
                let mut tape = Tape::new(&self.params.tensors);
                let xv = tape.constant(x.clone());
                let h = self.encode_on_tape(&mut tape, xv, &admissible, &mut drop);
                Ok(tape.value(h).to_owned())
            })
            .collect()
    }

    /// Reconstruction heads applied to every position.
    pub fn mlvm_outputs(&self, hidden: &[Array2<T>]) -> Result<MlvmOutputs<T>> {
        let HeadLayout::Pretrain {
            feature_w,
            feature_b,
            cat_w,
            cat_b,
            cont_w,
            cont_b,
        } = self.layout.head
        else {
            return Err(Error::ModeMismatch("model carries a fine-tuning head".into()));
        };
        let p = &self.params.tensors;
        let b = hidden.len();
        let l = hidden.first().map_or(0, |h| h.nrows());
        if hidden.iter().any(|h| h.nrows() != l) {
            return Err(Error::ShapeMismatch("sequences differ in length".into()));
        }
        let mut out = MlvmOutputs {
            feature_logits: Array3::zeros((b, l, p[feature_w].ncols())),
            cat_logits: Array3::zeros((b, l, p[cat_w].ncols())),
            cont: Array2::zeros((b, l)),
        };
        for (i, h) in hidden.iter().enumerate() {
            let f = h.dot(&p[feature_w]) + p[feature_b].row(0);
            let c = h.dot(&p[cat_w]) + p[cat_b].row(0);
            let r = h.dot(&p[cont_w]) + p[cont_b].row(0);
            out.feature_logits.index_axis_mut(Axis(0), i).assign(&f);
            out.cat_logits.index_axis_mut(Axis(0), i).assign(&c);
            out.cont.row_mut(i).assign(&r.column(0));
        }
        Ok(out)
    }

    /// Reconstruction heads at the selected rows of one sequence, on a tape.
    /// Returns `(feature logits, categorical logits, continuous prediction)`.
    pub fn mlvm_heads_on_tape(&self, tape: &mut Tape<T>, hidden: Var, rows: Vec<usize>) -> Result<(Var, Var, Var)> {
        let HeadLayout::Pretrain {
            feature_w,
            feature_b,
            cat_w,
            cat_b,
            cont_w,
            cont_b,
        } = self.layout.head
        else {
            return Err(Error::ModeMismatch("model carries a fine-tuning head".into()));
        };
        let h = tape.select_rows(hidden, rows);
        let (w, b) = (tape.param(feature_w), tape.param(feature_b));
        let f = tape.affine(h, w, b);
        let (w, b) = (tape.param(cat_w), tape.param(cat_b));
        let c = tape.affine(h, w, b);
        let (w, b) = (tape.param(cont_w), tape.param(cont_b));
        let r = tape.affine(h, w, b);
        Ok((f, c, r))
    }

    /// Task head over the mean [CLS] output of one or more windows. Returns
    /// a `1 × out_dim` node of raw predictions (logits for classification).
    pub fn task_on_tape(&self, tape: &mut Tape<T>, windows: &[WindowInput<T>], drop: &mut Dropout) -> Result<Var> {
        let HeadLayout::Finetune { w, b } = self.layout.head else {
            return Err(Error::ModeMismatch("model carries pre-training heads".into()));
        };
        let HeadConfig::Finetune { final_dropout, .. } = self.config.head else {
            unreachable!("layout follows config")
        };
        if windows.is_empty() {
            return Err(Error::ShapeMismatch("sample has no windows".into()));
        }
        let mut cls = Vec::with_capacity(windows.len());
        for input in windows {
            let x = embedder::embed_on_tape(tape, self, input, drop)?;
            let h = self.encode_on_tape(tape, x, &input.admissible, drop);
            cls.push(tape.select_rows(h, vec![0]));
        }
        let mut pooled = cls[0];
        for &c in &cls[1..] {
            pooled = tape.add(pooled, c);
        }
        if cls.len() > 1 {
            pooled = tape.scale(pooled, T::c(1.0 / cls.len() as f64));
        }
        let pooled = drop.apply(tape, pooled, final_dropout);
        let (w, b) = (tape.param(w), tape.param(b));
        Ok(tape.affine(pooled, w, b))
    }
}

/// Row 0 of each sequence's final hidden states.
pub fn cls_output<T: Scalar>(hidden: &[Array2<T>]) -> Array2<T> {
    let d = hidden.first().map_or(0, |h| h.ncols());
    let mut out = Array2::zeros((hidden.len(), d));
    for (mut row, h) in out.rows_mut().into_iter().zip(hidden) {
        row.assign(&h.row(0));
    }
    out
}

fn init_tensor<T: Scalar>(shape: (usize, usize), init: Init, rng: &mut ChaCha8Rng) -> Array2<T> {
    match init {
        Init::Zeros => Array2::zeros(shape),
        Init::Ones => Array2::ones(shape),
        Init::Uniform(bound) => {
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            Array2::from_shape_simple_fn(shape, || T::c(dist.sample(rng)))
        }
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).expect("positive std");
            Array2::from_shape_simple_fn(shape, || T::c(dist.sample(rng)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n_features: usize, n_values: usize) -> ModelConfig {
        let enc = EncoderConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            ffn_dim: 6,
            max_seq_len: 8,
            dropout: 0.1,
        };
        ModelConfig {
            window_minutes: 60,
            ..ModelConfig::pretrain(enc, 4, n_features, n_values)
        }
    }

    fn random_batch(b: usize, l: usize, d: usize, seed: u64) -> Vec<Array2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..b)
            .map(|_| Array2::from_shape_simple_fn((l, d), || rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig {
            hidden: 10,
            heads: 3,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(EncoderConfig { layers: 0, ..EncoderConfig::default() }.validate().is_err());
    }

    #[test]
    fn identical_sequences_identical_outputs() {
        let m = Model::<f64>::init(tiny(10, 5), 1).unwrap();
        let x = random_batch(1, 8, 8, 3).pop().unwrap();
        let mask = vec![1, 1, 1, 1, 1, 0, 0, 0];
        let out = m
            .forward(&[x.clone(), x], &[mask.clone(), mask], Mode::Eval, 0)
            .unwrap();
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn permutation_equivariance() {
        let m = Model::<f64>::init(tiny(10, 5), 2).unwrap();
        let x = random_batch(1, 8, 8, 4).pop().unwrap();
        let mask = vec![1, 1, 1, 1, 1, 1, 0, 0];
        let perm = [0usize, 3, 5, 1, 4, 2, 6, 7];
        let xp = x.select(Axis(0), &perm);
        let out = m.forward(&[x, xp], &[mask.clone(), mask], Mode::Eval, 0).unwrap();
        for (i, &p) in perm.iter().enumerate().take(6) {
            let diff = (&out[1].row(i) - &out[0].row(p)).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
            assert!(diff < 1e-12, "row {i}: {diff}");
        }
    }

    #[test]
    fn lone_cls_is_finite() {
        let m = Model::<f32>::init(tiny(10, 5), 3).unwrap();
        let x = random_batch(1, 8, 8, 5).pop().unwrap().mapv(|v| v as f32);
        let out = m.forward(&[x], &[vec![1, 0, 0, 0, 0, 0, 0, 0]], Mode::Eval, 0).unwrap();
        assert!(out[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn shape_errors() {
        let m = Model::<f64>::init(tiny(10, 5), 3).unwrap();
        let x = random_batch(1, 8, 8, 5).pop().unwrap();
        assert!(matches!(
            m.forward(std::slice::from_ref(&x), &[vec![1; 7]], Mode::Eval, 0),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            m.forward(std::slice::from_ref(&x), &[], Mode::Eval, 0),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            m.forward(&[x], &[vec![0, 1, 1, 1, 1, 1, 1, 1]], Mode::Eval, 0),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn head_shapes_and_affine_identity() {
        let mut m = Model::<f64>::init(tiny(10, 5), 4).unwrap();
        let hidden = random_batch(2, 8, 8, 6);
        let out = m.mlvm_outputs(&hidden).unwrap();
        assert_eq!(out.feature_logits.dim(), (2, 8, 10));
        assert_eq!(out.cat_logits.dim(), (2, 8, 5));
        assert_eq!(out.cont.dim(), (2, 8));
        for row in out.feature_logits.rows() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let soft_sum: f64 = row.iter().map(|v| (v - max).exp() / sum).sum();
            assert!((soft_sum - 1.0).abs() < 1e-6);
        }

        let HeadLayout::Pretrain { feature_w, feature_b, .. } = m.layout.head else { unreachable!() };
        m.params.tensors[feature_w].fill(0.0);
        m.params.tensors[feature_b].fill(0.25);
        let zeros = vec![Array2::zeros((8, 8)); 2];
        let out = m.mlvm_outputs(&zeros).unwrap();
        assert!(out.feature_logits.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn task_head_swap() {
        let m = Model::<f64>::init(tiny(10, 5), 5).unwrap();
        let ft = m.with_task_head(1, 0.5, 9).unwrap();
        assert!(matches!(ft.mlvm_outputs(&[]), Err(Error::ModeMismatch(_))));
        let i = m.params.index_of("layer1.ffn.in.weight").unwrap();
        let j = ft.params.index_of("layer1.ffn.in.weight").unwrap();
        assert_eq!(m.params.tensors[i], ft.params.tensors[j]);
        assert!(ft.params.index_of("head.feature.weight").is_none());
        assert_eq!(ft.layout.head_indices().len(), 2);
    }

    #[test]
    fn cls_rows() {
        let hidden = random_batch(3, 4, 8, 8);
        let cls = cls_output(&hidden);
        assert_eq!(cls.dim(), (3, 8));
        for (b, h) in hidden.iter().enumerate() {
            assert_eq!(cls.row(b), h.row(0));
        }
    }
}
