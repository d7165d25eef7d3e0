//! Composition of the token embedding from its four sources: projected
//! feature and value pre-embeddings plus the `tau` and `delta` lookup
//! tables, summed, passed through dropout and layer-normalized.

use ndarray::{Array1, Array2};

use crate::autodiff::{Scalar, Tape, Var};
use crate::encoder::{Dropout, Mode, Model};
use crate::error::{Error, Result};
use crate::text_embed::{PreEmbed, PreEmbedding};
use crate::types::{Special, TokenValue, WindowSequence};

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Model-ready form of one window: pre-embedding rows (zero where a learned
/// special vector is used instead), special-row indices and time indices.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowInput<T> {
    pub pre_feature: Array2<T>,
    pub feature_special: Vec<Option<usize>>,
    pub pre_value: Array2<T>,
    pub value_special: Vec<Option<usize>>,
    pub tau: Vec<Option<usize>>,
    pub delta: Vec<Option<usize>>,
    /// False for [PAD] positions.
    pub admissible: Vec<bool>,
}

impl<T: Scalar> WindowInput<T> {
    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    fn with_rows(n: usize, dim: usize) -> Self {
        WindowInput {
            pre_feature: Array2::zeros((n, dim)),
            feature_special: vec![None; n],
            pre_value: Array2::zeros((n, dim)),
            value_special: vec![None; n],
            tau: Vec::with_capacity(n),
            delta: Vec::with_capacity(n),
            admissible: Vec::with_capacity(n),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn set_row(
        &mut self,
        i: usize,
        feature: Slot<'_, T>,
        value: Slot<'_, T>,
        tau: u32,
        delta: u32,
        window_minutes: u32,
        admissible: bool,
    ) -> Result<()> {
        for t in [tau, delta] {
            if t >= window_minutes {
                return Err(Error::IndexOutOfRange {
                    index: t as usize,
                    rows: window_minutes as usize,
                });
            }
        }
        self.feature_special[i] = feature.write(self.pre_feature.row_mut(i))?;
        self.value_special[i] = value.write(self.pre_value.row_mut(i))?;
        self.tau.push(Some(tau as usize));
        self.delta.push(Some(delta as usize));
        self.admissible.push(admissible);
        Ok(())
    }
}

/// Source of one pre-embedding row.
enum Slot<'a, T> {
    Vector(&'a [f32]),
    /// Continuous value repeated across the row.
    Fill(T),
    Learned(Special),
}

impl<T: Scalar> Slot<'_, T> {
    fn from_pre(pre: &PreEmbedding) -> Slot<'_, T> {
        match pre {
            PreEmbedding::Vector(v) => Slot::Vector(v),
            PreEmbedding::Learned(s) => Slot::Learned(*s),
        }
    }

    fn write(self, mut row: ndarray::ArrayViewMut1<T>) -> Result<Option<usize>> {
        match self {
            Slot::Vector(v) => {
                check_dim(v.len(), row.len())?;
                for (dst, &src) in row.iter_mut().zip(v) {
                    *dst = T::c(f64::from(src));
                }
                Ok(None)
            }
            Slot::Fill(x) => {
                row.fill(x);
                Ok(None)
            }
            Slot::Learned(s) => Ok(Some(s.index())),
        }
    }
}

fn check_dim(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::ShapeMismatch(format!(
            "pre-embedding has {got} entries, model expects {want}"
        )));
    }
    Ok(())
}

/// Looks up every pre-embedding of `seq`. With `drop_padding`, trailing
/// [PAD] tokens are left out; since [PAD] keys are never attended to, the
/// remaining rows encode identically.
pub fn prepare<T: Scalar>(
    seq: &WindowSequence,
    pre: &dyn PreEmbed,
    window_minutes: u32,
    drop_padding: bool,
) -> Result<WindowInput<T>> {
    let tokens: Vec<_> = if drop_padding {
        seq.tokens.iter().filter(|t| !t.is_pad()).collect()
    } else {
        seq.tokens.iter().collect()
    };
    let mut input = WindowInput::with_rows(tokens.len(), pre.dim());
    for (i, t) in tokens.into_iter().enumerate() {
        let feature_vec;
        let feature = match Special::from_text(&t.feature_text) {
            Some(s) => Slot::Learned(s),
            None => {
                feature_vec = pre.vector(&t.feature_text)?;
                Slot::Vector(&feature_vec)
            }
        };
        let value_vec;
        let value = match &t.value {
            TokenValue::Number(x) if !x.is_finite() => return Err(Error::NonFiniteValue(*x)),
            // filled directly in T so f64 checks see the exact value
            TokenValue::Number(x) => Slot::Fill(T::c(*x)),
            TokenValue::Category(c) => {
                value_vec = pre.vector(c)?;
                Slot::Vector(&value_vec)
            }
            TokenValue::Special(s) => Slot::Learned(*s),
        };
        input.set_row(i, feature, value, t.tau_minutes, t.delta_minutes, window_minutes, !t.is_pad())?;
    }
    Ok(input)
}

/// `e_f + e_x + e_tau + e_delta` before dropout and normalization.
fn sum_on_tape<T: Scalar>(tape: &mut Tape<T>, model: &Model<T>, input: &WindowInput<T>) -> Result<Var> {
    let cfg = &model.config;
    if input.pre_feature.ncols() != cfg.pre_dim {
        return Err(Error::ShapeMismatch(format!(
            "pre-embeddings have {} entries, model expects {}",
            input.pre_feature.ncols(),
            cfg.pre_dim
        )));
    }
    let e = &model.layout.embed;
    let part = |tape: &mut Tape<T>, pre: &Array2<T>, special: &[Option<usize>], table: usize, w: usize, b: usize| {
        let fixed = tape.constant(pre.clone());
        let table = tape.param(table);
        let learned = tape.gather(table, special.to_vec());
        let x = tape.add(fixed, learned);
        let (w, b) = (tape.param(w), tape.param(b));
        tape.affine(x, w, b)
    };
    let ef = part(tape, &input.pre_feature, &input.feature_special, e.special_feature, e.feature_w, e.feature_b);
    let ex = part(tape, &input.pre_value, &input.value_special, e.special_value, e.value_w, e.value_b);
    let time = tape.param(e.time);
    let et = tape.gather(time, input.tau.clone());
    let duration = tape.param(e.duration);
    let ed = tape.gather(duration, input.delta.clone());
    let s = tape.add(ef, ex);
    let s = tape.add(s, et);
    Ok(tape.add(s, ed))
}

/// Composed embeddings of every row of `input` (`n × d`).
pub fn embed_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    input: &WindowInput<T>,
    drop: &mut Dropout,
) -> Result<Var> {
    let s = sum_on_tape(tape, model, input)?;
    let s = drop.apply(tape, s, model.config.embed_dropout);
    let e = &model.layout.embed;
    let (g, b) = (tape.param(e.norm_gain), tape.param(e.norm_bias));
    Ok(tape.layer_norm(s, g, b, T::c(LAYER_NORM_EPS)))
}

fn single_row<T: Scalar>(
    model: &Model<T>,
    feature: &PreEmbedding,
    value: &PreEmbedding,
    tau: u32,
    delta: u32,
) -> Result<WindowInput<T>> {
    let mut input = WindowInput::with_rows(1, model.config.pre_dim);
    input.set_row(0, Slot::from_pre(feature), Slot::from_pre(value), tau, delta, model.config.window_minutes, true)?;
    Ok(input)
}

/// Embedding `e_i` of a single token.
pub fn compose<T: Scalar>(
    model: &Model<T>,
    feature: &PreEmbedding,
    value: &PreEmbedding,
    tau: u32,
    delta: u32,
    mode: Mode,
    seed: u64,
) -> Result<Array1<T>> {
    let input = single_row(model, feature, value, tau, delta)?;
    let mut tape = Tape::new(&model.params.tensors);
    let mut drop = Dropout::new(mode, seed);
    let v = embed_on_tape(&mut tape, model, &input, &mut drop)?;
    Ok(tape.value(v).row(0).to_owned())
}

/// The four-way sum without dropout or layer normalization. Exposed so the
/// additivity of the composition can be tested directly.
#[doc(hidden)]
pub fn compose_unnormalized<T: Scalar>(
    model: &Model<T>,
    feature: &PreEmbedding,
    value: &PreEmbedding,
    tau: u32,
    delta: u32,
) -> Result<Array1<T>> {
    let input = single_row(model, feature, value, tau, delta)?;
    let mut tape = Tape::new(&model.params.tensors);
    let v = sum_on_tape(&mut tape, model, &input)?;
    Ok(tape.value(v).row(0).to_owned())
}

/// Embeds a truncated/padded window: `L × d` rows plus its attention mask.
pub fn embed_window<T: Scalar>(
    seq: &WindowSequence,
    pre: &dyn PreEmbed,
    model: &Model<T>,
    mode: Mode,
    seed: u64,
) -> Result<(Array2<T>, Vec<u8>)> {
    let input = prepare::<T>(seq, pre, model.config.window_minutes, false)?;
    let mut tape = Tape::new(&model.params.tensors);
    let mut drop = Dropout::new(mode, seed);
    let v = embed_on_tape(&mut tape, model, &input, &mut drop)?;
    Ok((tape.value(v).to_owned(), seq.attention_mask()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, ModelConfig};
    use crate::text_embed::{fill, EmbeddingProvider};
    use crate::tokenizer::truncate_and_pad;
    use crate::types::{Minute, Token};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> Model<f64> {
        let enc = EncoderConfig {
            layers: 1,
            hidden: 16,
            heads: 2,
            ffn_dim: 8,
            max_seq_len: 12,
            dropout: 0.5,
        };
        Model::init(ModelConfig::pretrain(enc, 8, 6, 4), seed).unwrap()
    }

    fn vector(seed: u64) -> PreEmbedding {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PreEmbedding::Vector((0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect())
    }

    #[test]
    fn zero_params_give_zero_output() {
        let mut m = model(1);
        let gain = m.layout.embed.norm_gain;
        for (i, t) in m.params.tensors.iter_mut().enumerate() {
            t.fill(if i == gain { 1.0 } else { 0.0 });
        }
        let e = compose(&m, &vector(1), &vector(2), 5, 0, Mode::Eval, 0).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_output_is_standardized() {
        let m = model(2);
        for seed in 0..20 {
            let e = compose(&m, &vector(seed), &vector(seed + 100), (seed * 37 % 1440) as u32, 3, Mode::Eval, 0)
                .unwrap();
            let n = e.len() as f64;
            let mean = e.sum() / n;
            let var = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-5, "{mean}");
            assert!((var - 1.0).abs() < 1e-4, "{var}");
        }
    }

    #[test]
    fn time_rows_differ() {
        let m = model(3);
        let a = compose_unnormalized(&m, &vector(1), &vector(2), 0, 0).unwrap();
        let b = compose_unnormalized(&m, &vector(1), &vector(2), 1, 0).unwrap();
        let t = &m.params.tensors[m.layout.embed.time];
        let diff = &b - &a;
        let expected = &t.row(1) - &t.row(0);
        assert!(diff.iter().zip(&expected).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn out_of_range_time() {
        let m = model(4);
        assert!(matches!(
            compose(&m, &vector(1), &vector(2), 1440, 0, Mode::Eval, 0),
            Err(Error::IndexOutOfRange { index: 1440, rows: 1440 })
        ));
        assert!(matches!(
            compose(&m, &vector(1), &vector(2), 0, 2000, Mode::Eval, 0),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn additive_in_each_source() {
        let m = model(5);
        let (f1, f2) = (vector(10), vector(11));
        let x = vector(12);
        let a = compose_unnormalized(&m, &f1, &x, 7, 2).unwrap();
        let b = compose_unnormalized(&m, &f2, &x, 7, 2).unwrap();
        let PreEmbedding::Vector(v1) = &f1 else { unreachable!() };
        let PreEmbedding::Vector(v2) = &f2 else { unreachable!() };
        let diff: Vec<f32> = v1.iter().zip(v2).map(|(a, b)| a - b).collect();
        let w = &m.params.tensors[m.layout.embed.feature_w];
        let dv = Array1::from_iter(diff.iter().map(|&v| f64::from(v)));
        let expected = dv.dot(w);
        assert!((&a - &b).iter().zip(&expected).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    fn window() -> WindowSequence {
        let tok = |f: &str, v: TokenValue, tau| Token {
            feature_text: f.into(),
            is_continuous: matches!(v, TokenValue::Number(_)),
            value: v,
            tau_minutes: tau,
            delta_minutes: 0,
            is_static: false,
        };
        let seq = WindowSequence {
            stay_id: "s".into(),
            window_index: 0,
            window_start: Minute(0),
            tokens: vec![
                Token::cls(),
                tok("chartevents: heart rate", TokenValue::Number(0.3), 5),
                tok("labevents: culture", TokenValue::Category("positive".into()), 90),
            ],
            label: None,
        };
        truncate_and_pad(&seq, 12).unwrap()
    }

    #[test]
    fn window_shape_and_determinism() {
        let m = model(6);
        let p = EmbeddingProvider::stub(8, 1);
        let seq = window();
        let (a, mask) = embed_window(&seq, &p, &m, Mode::Eval, 0).unwrap();
        assert_eq!(a.dim(), (12, 16));
        assert_eq!(mask.iter().map(|&v| v as usize).sum::<usize>(), 3);
        let (b, _) = embed_window(&seq, &p, &m, Mode::Eval, 99).unwrap();
        assert_eq!(a, b);
        // PAD rows all equal the composed PAD embedding
        assert_eq!(a.row(5), a.row(11));

        let (t1, _) = embed_window(&seq, &p, &m, Mode::Train, 42).unwrap();
        let (t2, _) = embed_window(&seq, &p, &m, Mode::Train, 42).unwrap();
        assert_eq!(t1, t2);
        assert_ne!(t1, a);
    }

    #[test]
    fn continuous_fill_is_exact() {
        let p = EmbeddingProvider::stub(8, 1);
        let input = prepare::<f64>(&window(), &p, 1440, true).unwrap();
        assert_eq!(input.len(), 3);
        assert_eq!(input.pre_value.row(1).to_vec(), vec![0.3; 8]);
        assert_eq!(input.value_special[1], None);
        assert_eq!(input.feature_special[0], Some(Special::Cls.index()));
        assert_eq!(input.value_special[0], Some(Special::Cls.index()));
        let PreEmbedding::Vector(v) = PreEmbedding::Vector(fill(0.3, 8).unwrap()) else { unreachable!() };
        assert_eq!(v.len(), 8);
    }
}
