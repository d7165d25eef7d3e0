//! Masked language-value modelling: which quadruplets to corrupt, how, and
//! what the reconstruction heads must recover.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::types::{Special, Token, TokenValue, Vocabularies, WindowSequence};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskConfig {
    /// Per-token selection probability.
    pub rate: f64,
    /// Among selected tokens: both slots, value only, feature only.
    pub split: [f64; 3],
    /// Per masked slot: [MASK], random replacement, unchanged.
    pub corruption: [f64; 3],
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            rate: 0.15,
            split: [0.5, 0.25, 0.25],
            corruption: [0.8, 0.1, 0.1],
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = |p: &[f64]| p.iter().all(|x| x.is_finite() && *x >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        if !(0.0..=1.0).contains(&self.rate) || !probs(&self.split) || !probs(&self.corruption) {
            return Err(Error::InvalidConfig(format!("bad masking rates: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ValueTarget {
    Category(usize),
    Continuous(f64),
}

/// Masking decision for one token. `None` slots are left alone.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenPlan {
    pub feature: Option<Corruption>,
    pub value: Option<Corruption>,
    pub feature_target: Option<usize>,
    pub value_target: Option<ValueTarget>,
}

impl TokenPlan {
    pub fn selected(&self) -> bool {
        self.feature.is_some() || self.value.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskingPlan {
    pub tokens: Vec<TokenPlan>,
}

impl MaskingPlan {
    /// `(position, feature index)` of every masked feature slot.
    pub fn feature_slots(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.tokens
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.feature_target.map(|t| (i, t)))
    }

    /// `(position, target)` of every masked value slot.
    pub fn value_slots(&self) -> impl Iterator<Item = (usize, ValueTarget)> + '_ {
        self.tokens
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.value_target.map(|t| (i, t)))
    }

    pub fn n_selected(&self) -> usize {
        self.tokens.iter().filter(|p| p.selected()).count()
    }
}

/// Data tokens whose feature is in the vocabulary. Structural tokens and
/// features unseen in training have no reconstruction target.
pub fn is_eligible(token: &Token, vocab: &Vocabularies) -> bool {
    token.structural().is_none() && vocab.feature_index(&token.feature_text).is_some()
}

fn pick3(rng: &mut impl Rng, p: [f64; 3]) -> usize {
    let u: f64 = rng.random();
    if u < p[0] {
        0
    } else if u < p[0] + p[1] {
        1
    } else {
        2
    }
}

fn corruption(rng: &mut impl Rng, config: &MaskConfig) -> Corruption {
    [Corruption::Mask, Corruption::Random, Corruption::Keep][pick3(rng, config.corruption)]
}

fn value_target(token: &Token, vocab: &Vocabularies) -> Option<ValueTarget> {
    match &token.value {
        TokenValue::Number(x) => Some(ValueTarget::Continuous(*x)),
        TokenValue::Category(c) => Some(ValueTarget::Category(vocab.value_index(c))),
        TokenValue::Special(_) => None,
    }
}

pub fn plan_masking(
    seq: &WindowSequence,
    vocab: &Vocabularies,
    config: &MaskConfig,
    rng: &mut impl Rng,
) -> Result<MaskingPlan> {
    if !seq.tokens.iter().any(|t| is_eligible(t, vocab)) {
        return Err(Error::NoEligibleTokens);
    }
    let tokens = seq
        .tokens
        .iter()
        .map(|t| {
            if !is_eligible(t, vocab) || rng.random::<f64>() >= config.rate {
                return TokenPlan::default();
            }
            let (mask_feature, mask_value) = match pick3(rng, config.split) {
                0 => (true, true),
                1 => (false, true),
                _ => (true, false),
            };
            let mut plan = TokenPlan::default();
            if mask_feature {
                plan.feature = Some(corruption(rng, config));
                plan.feature_target = vocab.feature_index(&t.feature_text);
            }
            if mask_value {
                plan.value = Some(corruption(rng, config));
                plan.value_target = value_target(t, vocab);
            }
            plan
        })
        .collect();
    Ok(MaskingPlan { tokens })
}

pub fn apply_masking(
    seq: &WindowSequence,
    plan: &MaskingPlan,
    vocab: &Vocabularies,
    rng: &mut impl Rng,
) -> Result<WindowSequence> {
    if plan.tokens.len() != seq.tokens.len() {
        return Err(Error::ShapeMismatch(format!(
            "plan covers {} tokens, sequence has {}",
            plan.tokens.len(),
            seq.tokens.len()
        )));
    }
    let features = vocab.data_features();
    let values = vocab.data_values();
    let mut out = seq.clone();
    for (t, p) in out.tokens.iter_mut().zip(&plan.tokens) {
        match p.feature {
            Some(Corruption::Mask) => t.feature_text = Special::Mask.text().to_string(),
            Some(Corruption::Random) if !features.is_empty() => {
                let i = rng.random_range(features.clone());
                t.feature_text = vocab.features.text(i).expect("in range").to_string();
            }
            _ => {}
        }
        match p.value {
            Some(Corruption::Mask) => t.value = TokenValue::Special(Special::Mask),
            Some(Corruption::Random) => match t.value {
                TokenValue::Number(_) => t.value = TokenValue::Number(StandardNormal.sample(rng)),
                TokenValue::Category(_) if !values.is_empty() => {
                    let i = rng.random_range(values.clone());
                    let text = vocab.categorical_values.text(i).expect("in range");
                    t.value = TokenValue::Category(text.to_string());
                }
                _ => {}
            },
            _ => {}
        }
        t.is_continuous = matches!(t.value, TokenValue::Number(_));
    }
    Ok(out)
}
