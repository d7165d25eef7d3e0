//! Pre-training loss over masked slots and the fine-tuning losses.
//!
//! All slot counts of a batch are known once masking is planned, so the
//! total loss is a fixed linear combination of per-slot terms. That lets
//! each sequence compute its own gradient contribution independently.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::autodiff::Scalar;
use crate::encoder::MlvmOutputs;
use crate::error::{Error, Result};
use crate::mlvm::{MaskingPlan, ValueTarget};
use crate::types::Label;

/// Normalizer of the feature term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureNorm {
    /// Mean over masked feature slots.
    #[default]
    Masked,
    /// Sum over masked feature slots divided by the number of non-[PAD]
    /// tokens in the batch.
    AllTokens,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub feature_norm: FeatureNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 3.0,
            beta: 1.0,
            feature_norm: FeatureNorm::Masked,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_f: f64,
    pub l_cat: f64,
    pub l_cont: f64,
    pub n_f: usize,
    pub n_cat: usize,
    pub n_cont: usize,
    pub l_total: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// `L_f + β (L_cat N_cat + α L_cont N_cont) / (N_cat + N_cont)`, where an
/// empty value group contributes nothing.
pub fn total_loss(l_f: f64, l_cat: f64, n_cat: usize, l_cont: f64, n_cont: usize, alpha: f64, beta: f64) -> f64 {
    let n = n_cat + n_cont;
    if n == 0 {
        return l_f;
    }
    let cat = if n_cat > 0 { l_cat * n_cat as f64 } else { 0.0 };
    let cont = if n_cont > 0 { alpha * l_cont * n_cont as f64 } else { 0.0 };
    l_f + beta * (cat + cont) / n as f64
}

/// Unnormalized per-slot sums, additive across sequences.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SlotSums {
    pub ce_f: f64,
    pub ce_cat: f64,
    pub abs_cont: f64,
    pub n_f: usize,
    pub n_cat: usize,
    pub n_cont: usize,
    /// Non-[PAD] tokens, for [`FeatureNorm::AllTokens`].
    pub n_tokens: usize,
    /// Masked feature slots whose arg-max logit is the target.
    pub f_correct: usize,
}

impl SlotSums {
    pub fn add(&mut self, o: &SlotSums) {
        self.ce_f += o.ce_f;
        self.ce_cat += o.ce_cat;
        self.abs_cont += o.abs_cont;
        self.n_f += o.n_f;
        self.n_cat += o.n_cat;
        self.n_cont += o.n_cont;
        self.n_tokens += o.n_tokens;
        self.f_correct += o.f_correct;
    }

    pub fn n_slots(&self) -> usize {
        self.n_f + self.n_cat + self.n_cont
    }

    pub fn breakdown(&self, config: &LossConfig) -> Result<LossBreakdown> {
        if self.n_slots() == 0 {
            return Err(Error::NoMaskedSlots);
        }
        let mean = |s: f64, n: usize| if n > 0 { s / n as f64 } else { 0.0 };
        let l_f = match config.feature_norm {
            FeatureNorm::Masked => mean(self.ce_f, self.n_f),
            FeatureNorm::AllTokens => mean(self.ce_f, self.n_tokens),
        };
        let l_cat = mean(self.ce_cat, self.n_cat);
        let l_cont = mean(self.abs_cont, self.n_cont);
        Ok(LossBreakdown {
            l_f,
            l_cat,
            l_cont,
            n_f: self.n_f,
            n_cat: self.n_cat,
            n_cont: self.n_cont,
            l_total: total_loss(l_f, l_cat, self.n_cat, l_cont, self.n_cont, config.alpha, config.beta),
            alpha: config.alpha,
            beta: config.beta,
        })
    }

    /// d L_total / d (per-slot term) for each slot kind.
    pub fn scales(&self, config: &LossConfig) -> SlotScales {
        let inv = |n: usize| if n > 0 { 1.0 / n as f64 } else { 0.0 };
        let feature = match config.feature_norm {
            FeatureNorm::Masked => inv(self.n_f),
            FeatureNorm::AllTokens => inv(self.n_tokens),
        };
        let value = config.beta * inv(self.n_cat + self.n_cont);
        SlotScales {
            feature,
            cat: value,
            cont: value * config.alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotScales {
    pub feature: f64,
    pub cat: f64,
    pub cont: f64,
}

/// Cross-entropy of one logit row against `target`, and its gradient
/// `softmax - onehot`.
pub fn cross_entropy<T: Scalar>(logits: ArrayView1<T>, target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
    let exp: Vec<f64> = logits.iter().map(|v| (v.f64() - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    let loss = z.ln() + max - logits[target].f64();
    let mut grad: Vec<f64> = exp.iter().map(|e| e / z).collect();
    grad[target] -= 1.0;
    (loss, grad)
}

fn argmax<T: Scalar>(row: ArrayView1<T>) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Gradients of the slot terms of one sequence w.r.t. the head outputs at
/// the masked rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotGrads<T> {
    pub feature: Array2<T>,
    pub cat: Array2<T>,
    pub cont: Array2<T>,
}

/// Masked slots of one sequence, grouped by head.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SeqSlots {
    pub feature: Vec<(usize, usize)>,
    pub cat: Vec<(usize, usize)>,
    pub cont: Vec<(usize, f64)>,
    pub n_tokens: usize,
}

impl SeqSlots {
    pub fn from_plan(plan: &MaskingPlan, n_tokens: usize) -> Self {
        let mut s = SeqSlots {
            feature: plan.feature_slots().collect(),
            n_tokens,
            ..SeqSlots::default()
        };
        for (i, t) in plan.value_slots() {
            match t {
                ValueTarget::Category(c) => s.cat.push((i, c)),
                ValueTarget::Continuous(x) => s.cont.push((i, x)),
            }
        }
        s
    }

    pub fn counts(&self) -> SlotSums {
        SlotSums {
            n_f: self.feature.len(),
            n_cat: self.cat.len(),
            n_cont: self.cont.len(),
            n_tokens: self.n_tokens,
            ..SlotSums::default()
        }
    }

    /// Every row any head is evaluated at, sorted and distinct.
    pub fn rows(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self
            .feature
            .iter()
            .map(|p| p.0)
            .chain(self.cat.iter().map(|p| p.0))
            .chain(self.cont.iter().map(|p| p.0))
            .collect();
        rows.sort_unstable();
        rows.dedup();
        rows
    }

    /// Slot sums and, scaled by `scales`, gradients w.r.t. head outputs
    /// evaluated at `rows` (as returned by [`SeqSlots::rows`]).
    pub fn evaluate<T: Scalar>(
        &self,
        rows: &[usize],
        feature: ArrayView2<T>,
        cat: ArrayView2<T>,
        cont: ArrayView2<T>,
        scales: &SlotScales,
    ) -> (SlotSums, SlotGrads<T>) {
        let at = |pos: usize| rows.binary_search(&pos).expect("slot row evaluated");
        let mut sums = self.counts();
        let mut grads = SlotGrads {
            feature: Array2::zeros(feature.raw_dim()),
            cat: Array2::zeros(cat.raw_dim()),
            cont: Array2::zeros(cont.raw_dim()),
        };
        for &(pos, target) in &self.feature {
            let r = at(pos);
            let (loss, g) = cross_entropy(feature.row(r), target);
            sums.ce_f += loss;
            sums.f_correct += usize::from(argmax(feature.row(r)) == target);
            for (dst, v) in grads.feature.row_mut(r).iter_mut().zip(g) {
                *dst += T::c(v * scales.feature);
            }
        }
        for &(pos, target) in &self.cat {
            let r = at(pos);
            let (loss, g) = cross_entropy(cat.row(r), target);
            sums.ce_cat += loss;
            for (dst, v) in grads.cat.row_mut(r).iter_mut().zip(g) {
                *dst += T::c(v * scales.cat);
            }
        }
        for &(pos, target) in &self.cont {
            let r = at(pos);
            let diff = cont[[r, 0]].f64() - target;
            sums.abs_cont += diff.abs();
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            grads.cont[[r, 0]] += T::c(sign * scales.cont);
        }
        (sums, grads)
    }
}

/// Loss over full per-position head outputs for a batch of plans.
pub fn mlvm_loss<T: Scalar>(
    outputs: &MlvmOutputs<T>,
    plans: &[MaskingPlan],
    n_tokens: &[usize],
    config: &LossConfig,
) -> Result<LossBreakdown> {
    mlvm_loss_and_grad(outputs, plans, n_tokens, config).map(|(b, _)| b)
}

/// [`mlvm_loss`] plus its gradient w.r.t. every head output.
pub fn mlvm_loss_and_grad<T: Scalar>(
    outputs: &MlvmOutputs<T>,
    plans: &[MaskingPlan],
    n_tokens: &[usize],
    config: &LossConfig,
) -> Result<(LossBreakdown, MlvmOutputs<T>)> {
    let b = outputs.feature_logits.len_of(Axis(0));
    if plans.len() != b || n_tokens.len() != b || outputs.cont.nrows() != b {
        return Err(Error::ShapeMismatch(format!(
            "{b} output sequences, {} plans, {} token counts",
            plans.len(),
            n_tokens.len()
        )));
    }
    let l = outputs.feature_logits.len_of(Axis(1));
    if plans.iter().any(|p| p.tokens.len() > l) {
        return Err(Error::ShapeMismatch("plan longer than the outputs".into()));
    }
    let slots: Vec<SeqSlots> = plans.iter().zip(n_tokens).map(|(p, &n)| SeqSlots::from_plan(p, n)).collect();
    let mut counts = SlotSums::default();
    for s in &slots {
        counts.add(&s.counts());
    }
    let scales = counts.scales(config);
    let mut total = SlotSums::default();
    let mut grad = MlvmOutputs {
        feature_logits: outputs.feature_logits.mapv(|_| T::zero()),
        cat_logits: outputs.cat_logits.mapv(|_| T::zero()),
        cont: outputs.cont.mapv(|_| T::zero()),
    };
    let all_rows: Vec<usize> = (0..l).collect();
    for (i, s) in slots.iter().enumerate() {
        let cont = outputs.cont.row(i).insert_axis(Axis(1));
        let (sums, g) = s.evaluate(
            &all_rows,
            outputs.feature_logits.index_axis(Axis(0), i),
            outputs.cat_logits.index_axis(Axis(0), i),
            cont,
            &scales,
        );
        total.add(&sums);
        grad.feature_logits.index_axis_mut(Axis(0), i).assign(&g.feature);
        grad.cat_logits.index_axis_mut(Axis(0), i).assign(&g.cat);
        grad.cont.row_mut(i).assign(&g.cont.column(0));
    }
    Ok((total.breakdown(config)?, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Binary,
    MultiLabel(usize),
    Regression,
}

impl TaskKind {
    /// `binary`, `regression` or `multilabel:<n>`.
    pub fn parse(text: &str) -> Result<TaskKind> {
        match text {
            "binary" => Ok(TaskKind::Binary),
            "regression" => Ok(TaskKind::Regression),
            _ => text
                .strip_prefix("multilabel:")
                .and_then(|n| n.parse().ok())
                .filter(|&n| n > 0)
                .map(TaskKind::MultiLabel)
                .ok_or_else(|| Error::UnknownTask(text.to_string())),
        }
    }

    pub fn out_dim(self) -> usize {
        match self {
            TaskKind::Binary | TaskKind::Regression => 1,
            TaskKind::MultiLabel(n) => n,
        }
    }

    pub fn name(self) -> String {
        match self {
            TaskKind::Binary => "binary".into(),
            TaskKind::Regression => "regression".into(),
            TaskKind::MultiLabel(n) => format!("multilabel:{n}"),
        }
    }

    /// Label as a target row, checking it fits the task.
    pub fn target(self, label: &Label) -> Result<Vec<f64>> {
        match (self, label) {
            (TaskKind::Binary, Label::Binary(b)) => Ok(vec![f64::from(u8::from(*b))]),
            (TaskKind::Regression, Label::Regression(y)) if y.is_finite() => Ok(vec![*y]),
            (TaskKind::MultiLabel(n), Label::MultiLabel(v)) if v.len() == n => {
                Ok(v.iter().map(|b| f64::from(u8::from(*b))).collect())
            }
            _ => Err(Error::ShapeMismatch(format!("label {label:?} does not fit task {}", self.name()))),
        }
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_shapes(task: TaskKind, preds: ArrayView2<f64>, targets: ArrayView2<f64>, pos_weights: &[f64]) -> Result<()> {
    let k = task.out_dim();
    if preds.dim() != targets.dim() || preds.ncols() != k || preds.nrows() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "predictions {:?}, targets {:?}, task {}",
            preds.dim(),
            targets.dim(),
            task.name()
        )));
    }
    if task != TaskKind::Regression {
        if pos_weights.len() != k {
            return Err(Error::ShapeMismatch(format!("{} class weights for {k} outputs", pos_weights.len())));
        }
        if pos_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidConfig("class weights must be positive".into()));
        }
    }
    Ok(())
}

/// Task loss and its gradient w.r.t. `preds` (`n × out_dim`).
///
/// Classification uses `w·y·softplus(−z) + (1 − y)·softplus(z)` per output,
/// averaged over samples and outputs; regression is the MAE.
pub fn finetune_loss_and_grad(
    task: TaskKind,
    preds: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    pos_weights: &[f64],
) -> Result<(f64, Array2<f64>)> {
    check_shapes(task, preds, targets, pos_weights)?;
    let denom = preds.len() as f64;
    let mut grad = Array2::zeros(preds.raw_dim());
    let mut loss = 0.0;
    for ((i, j), &z) in preds.indexed_iter() {
        let y = targets[[i, j]];
        let (l, g) = match task {
            TaskKind::Regression => ((z - y).abs(), (z - y).signum() * f64::from(u8::from(z != y))),
            _ => {
                let w = pos_weights[j];
                // terms with a zero coefficient are skipped so infinite
                // logits on the correct side give 0 rather than 0·∞
                let (mut l, mut g) = (0.0, 0.0);
                if y != 0.0 {
                    l += w * y * softplus(-z);
                    g -= w * y * sigmoid(-z);
                }
                if y != 1.0 {
                    l += (1.0 - y) * softplus(z);
                    g += (1.0 - y) * sigmoid(z);
                }
                (l, g)
            }
        };
        loss += l;
        grad[[i, j]] = g / denom;
    }
    Ok((loss / denom, grad))
}

pub fn finetune_loss(task: TaskKind, preds: ArrayView2<f64>, targets: ArrayView2<f64>, pos_weights: &[f64]) -> Result<f64> {
    finetune_loss_and_grad(task, preds, targets, pos_weights).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlvm::{Corruption, TokenPlan};
    use ndarray::{array, Array3};

    #[test]
    fn worked_total() {
        let t = total_loss(0.7, 1.0, 2, 0.5, 2, 3.0, 1.0);
        assert!((t - 1.95).abs() < 1e-12, "{t}");
    }

    #[test]
    fn zero_count_terms_vanish() {
        assert_eq!(total_loss(0.4, f64::NAN, 0, 0.5, 3, 3.0, 1.0), 0.4 + 1.5);
        assert_eq!(total_loss(0.4, 2.0, 3, f64::NAN, 0, 3.0, 1.0), 2.4);
        assert_eq!(total_loss(0.4, f64::NAN, 0, f64::NAN, 0, 3.0, 1.0), 0.4);
    }

    #[test]
    fn alpha_monotone_and_weighted_mean_bounds() {
        let mut last = f64::NEG_INFINITY;
        for k in 0..20 {
            let alpha = 0.25 * k as f64;
            let t = total_loss(0.0, 0.8, 3, 0.2, 5, alpha, 1.0);
            assert!(t > last);
            last = t;
            let (a, b): (f64, f64) = (0.8, alpha * 0.2);
            assert!(t >= a.min(b) - 1e-15 && t <= a.max(b) + 1e-15);
        }
    }

    fn plan(len: usize, slots: &[(usize, Option<usize>, Option<ValueTarget>)]) -> MaskingPlan {
        let mut tokens = vec![TokenPlan::default(); len];
        for &(i, f, v) in slots {
            tokens[i] = TokenPlan {
                feature: f.map(|_| Corruption::Mask),
                value: v.map(|_| Corruption::Mask),
                feature_target: f,
                value_target: v,
            };
        }
        MaskingPlan { tokens }
    }

    #[test]
    fn uniform_feature_logits_give_ln_f() {
        let out = MlvmOutputs {
            feature_logits: Array3::<f64>::zeros((1, 2, 4)),
            cat_logits: Array3::zeros((1, 2, 3)),
            cont: Array2::zeros((1, 2)),
        };
        let p = plan(2, &[(1, Some(2), None)]);
        let b = mlvm_loss(&out, &[p], &[2], &LossConfig::default()).unwrap();
        assert!((b.l_f - 4f64.ln()).abs() < 1e-12);
        assert_eq!(b.l_total, b.l_f);
        assert_eq!((b.n_cat, b.n_cont), (0, 0));
    }

    #[test]
    fn perfect_predictions_floor() {
        let mut out = MlvmOutputs {
            feature_logits: Array3::<f64>::zeros((1, 3, 4)),
            cat_logits: Array3::zeros((1, 3, 3)),
            cont: Array2::zeros((1, 3)),
        };
        // one-hot in the limit: a large margin makes the CE underflow to 0
        out.feature_logits[[0, 1, 3]] = 1e3;
        out.cat_logits[[0, 1, 2]] = 1e3;
        out.cont[[0, 2]] = 0.75;
        let p = plan(
            3,
            &[(1, Some(3), Some(ValueTarget::Category(2))), (2, None, Some(ValueTarget::Continuous(0.75)))],
        );
        let b = mlvm_loss(&out, &[p], &[3], &LossConfig::default()).unwrap();
        assert_eq!((b.l_f, b.l_cat, b.l_cont, b.l_total), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn no_slots_is_an_error() {
        let out = MlvmOutputs {
            feature_logits: Array3::<f64>::zeros((1, 2, 4)),
            cat_logits: Array3::zeros((1, 2, 3)),
            cont: Array2::zeros((1, 2)),
        };
        let err = mlvm_loss(&out, &[plan(2, &[])], &[2], &LossConfig::default());
        assert!(matches!(err, Err(Error::NoMaskedSlots)));
    }

    #[test]
    fn all_tokens_normalization() {
        let out = MlvmOutputs {
            feature_logits: Array3::<f64>::zeros((1, 4, 4)),
            cat_logits: Array3::zeros((1, 4, 3)),
            cont: Array2::zeros((1, 4)),
        };
        let p = plan(4, &[(1, Some(2), None)]);
        let config = LossConfig {
            feature_norm: FeatureNorm::AllTokens,
            ..LossConfig::default()
        };
        let b = mlvm_loss(&out, &[p], &[4], &config).unwrap();
        assert!((b.l_f - 4f64.ln() / 4.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut out = MlvmOutputs {
            feature_logits: Array3::<f64>::from_shape_simple_fn((2, 5, 6), || rng.random_range(-2.0..2.0)),
            cat_logits: Array3::from_shape_simple_fn((2, 5, 4), || rng.random_range(-2.0..2.0)),
            cont: Array2::from_shape_simple_fn((2, 5), || rng.random_range(-2.0..2.0)),
        };
        let plans = vec![
            plan(
                5,
                &[
                    (1, Some(3), Some(ValueTarget::Continuous(0.3))),
                    (2, None, Some(ValueTarget::Category(1))),
                    (4, Some(5), None),
                ],
            ),
            plan(
                4,
                &[(1, Some(0), Some(ValueTarget::Category(3))), (3, None, Some(ValueTarget::Continuous(-1.1)))],
            ),
        ];
        let n = [5, 4];
        let config = LossConfig::default();
        let (_, grad) = mlvm_loss_and_grad(&out, &plans, &n, &config).unwrap();
        let eps = 1e-6;
        let f = |o: &MlvmOutputs<f64>| mlvm_loss(o, &plans, &n, &config).unwrap().l_total;
        macro_rules! check {
            ($field:ident) => {
                let idx: Vec<_> = out.$field.indexed_iter().map(|(i, _)| i).collect();
                for i in idx {
                    let x = out.$field[i];
                    out.$field[i] = x + eps;
                    let up = f(&out);
                    out.$field[i] = x - eps;
                    let down = f(&out);
                    out.$field[i] = x;
                    let num = (up - down) / (2.0 * eps);
                    let a = grad.$field[i];
                    assert!((a - num).abs() / a.abs().max(1.0) <= 1e-6, "{} {:?}: {a} vs {num}", stringify!($field), i);
                }
            };
        }
        check!(feature_logits);
        check!(cat_logits);
        check!(cont);
    }

    #[test]
    fn binary_bce_at_zero_logit() {
        let l = finetune_loss(TaskKind::Binary, array![[0.0]].view(), array![[1.0]].view(), &[1.0]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let weighted = finetune_loss(TaskKind::Binary, array![[0.0]].view(), array![[1.0]].view(), &[3.0]).unwrap();
        assert!((weighted - 3.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn floors() {
        let p = array![[1.5], [-2.0]];
        assert_eq!(finetune_loss(TaskKind::Regression, p.view(), p.view(), &[]).unwrap(), 0.0);
        let z = Array2::from_elem((2, 3), f64::NEG_INFINITY);
        let y = Array2::zeros((2, 3));
        assert_eq!(finetune_loss(TaskKind::MultiLabel(3), z.view(), y.view(), &[1.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn finetune_gradient() {
        let preds = array![[0.3, -1.2], [2.0, 0.1], [-0.4, 0.9]];
        let targets = array![[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]];
        let w = [2.5, 0.7];
        for task in [TaskKind::MultiLabel(2)] {
            let (_, g) = finetune_loss_and_grad(task, preds.view(), targets.view(), &w).unwrap();
            for (idx, &a) in g.indexed_iter() {
                let mut p = preds.clone();
                p[idx] += 1e-6;
                let up = finetune_loss(task, p.view(), targets.view(), &w).unwrap();
                p[idx] -= 2e-6;
                let down = finetune_loss(task, p.view(), targets.view(), &w).unwrap();
                assert!((a - (up - down) / 2e-6).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn task_parsing() {
        assert_eq!(TaskKind::parse("multilabel:25").unwrap(), TaskKind::MultiLabel(25));
        assert!(matches!(TaskKind::parse("survival"), Err(Error::UnknownTask(_))));
        assert!(matches!(
            finetune_loss(TaskKind::Binary, array![[0.0, 1.0]].view(), array![[1.0, 0.0]].view(), &[1.0]),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
