//! Domain model shared by every stage of the pipeline: raw registries,
//! quadruplet tokens, window sequences and the training-split vocabularies.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default window length: one day at minute resolution.
pub const DEFAULT_WINDOW_MINUTES: u32 = 1440;
/// Default maximum sequence length, including [CLS].
pub const DEFAULT_MAX_SEQ_LEN: usize = 512;

/// Absolute time, in whole minutes since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Minute(pub i64);

impl Minute {
    /// Parses an ISO-8601 date-time. Seconds and fractions are accepted and
    /// floored to the minute; an offset, when present, is converted to UTC.
    pub fn parse(text: &str) -> Result<Self, String> {
        let text = text.trim();
        if text.is_empty() {
            return Err("missing timestamp".into());
        }
        if let Ok(dt) = DateTime::parse_from_rfc3339(text) {
            return Ok(Minute(dt.timestamp().div_euclid(60)));
        }
        const FORMATS: [&str; 4] = [
            "%Y-%m-%dT%H:%M",
            "%Y-%m-%dT%H:%M:%S",
            "%Y-%m-%dT%H:%M:%S%.f",
            "%Y-%m-%d %H:%M",
        ];
        for fmt in FORMATS {
            if let Ok(dt) = NaiveDateTime::parse_from_str(text, fmt) {
                return Ok(Minute(dt.and_utc().timestamp().div_euclid(60)));
            }
        }
        Err(format!("unparseable timestamp {text:?}"))
    }

    pub fn plus_minutes(self, minutes: i64) -> Minute {
        Minute(self.0 + minutes)
    }
}

impl fmt::Display for Minute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match DateTime::from_timestamp(self.0 * 60, 0) {
            Some(dt) => write!(f, "{}", dt.format("%Y-%m-%dT%H:%M")),
            None => write!(f, "minute:{}", self.0),
        }
    }
}

/// A recorded value: numeric measurements or categorical text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Number(f64),
    Category(String),
}

/// One raw entry of a medical record.
#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    pub patient_id: String,
    pub stay_id: String,
    pub source: String,
    pub variable: String,
    pub value: Value,
    pub timestamp: Minute,
    pub duration_minutes: i64,
    pub is_static: bool,
}

/// Checks the registry invariants and hands the registry back unchanged.
pub fn validate_registry(r: Registry) -> Result<Registry> {
    if r.source.trim().is_empty() {
        return Err(Error::InvalidRegistry("empty source".into()));
    }
    if r.variable.trim().is_empty() {
        return Err(Error::InvalidRegistry("empty variable".into()));
    }
    if r.duration_minutes < 0 {
        return Err(Error::InvalidRegistry("negative duration".into()));
    }
    match &r.value {
        Value::Number(x) if !x.is_finite() => {
            return Err(Error::InvalidRegistry(format!("non-finite value {x}")))
        }
        Value::Category(c) if c.trim().is_empty() => {
            return Err(Error::InvalidRegistry("empty categorical value".into()))
        }
        _ => {}
    }
    Ok(r)
}

fn normalize_text(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Canonical feature text `"<source>: <variable>"`, lowercased with runs of
/// whitespace collapsed.
pub fn feature_text(source: &str, variable: &str) -> Result<String> {
    let s = normalize_text(source);
    let v = normalize_text(variable);
    if s.is_empty() {
        return Err(Error::InvalidRegistry("empty source".into()));
    }
    if v.is_empty() {
        return Err(Error::InvalidRegistry("empty variable".into()));
    }
    Ok(format!("{s}: {v}"))
}

/// Canonical form of a categorical value (same normalization as feature text).
pub fn category_text(value: &str) -> String {
    normalize_text(value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Special {
    Cls,
    Pad,
    Mask,
}

impl Special {
    pub const ALL: [Special; 3] = [Special::Cls, Special::Pad, Special::Mask];

    pub fn text(self) -> &'static str {
        match self {
            Special::Cls => "[CLS]",
            Special::Pad => "[PAD]",
            Special::Mask => "[MASK]",
        }
    }

    /// Row of this special in the learned special-vector tables.
    pub fn index(self) -> usize {
        match self {
            Special::Cls => 0,
            Special::Pad => 1,
            Special::Mask => 2,
        }
    }

    pub fn from_text(text: &str) -> Option<Special> {
        Special::ALL.into_iter().find(|s| s.text() == text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TokenValue {
    Number(f64),
    Category(String),
    Special(Special),
}

/// Quadruplet token: feature text, value, offset into the window and
/// duration, both in minutes.
#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub feature_text: String,
    pub value: TokenValue,
    pub tau_minutes: u32,
    pub delta_minutes: u32,
    pub is_continuous: bool,
    pub is_static: bool,
}

impl Token {
    pub fn special(kind: Special) -> Token {
        Token {
            feature_text: kind.text().to_string(),
            value: TokenValue::Special(kind),
            tau_minutes: 0,
            delta_minutes: 0,
            is_continuous: false,
            is_static: false,
        }
    }

    pub fn cls() -> Token {
        Token::special(Special::Cls)
    }

    pub fn pad() -> Token {
        Token::special(Special::Pad)
    }

    /// `Some` for [CLS] and [PAD] tokens. A token whose slots were replaced
    /// by [MASK] is still a data token and returns `None`.
    pub fn structural(&self) -> Option<Special> {
        match (&self.value, Special::from_text(&self.feature_text)) {
            (TokenValue::Special(s @ (Special::Cls | Special::Pad)), Some(f)) if f == *s => {
                Some(*s)
            }
            _ => None,
        }
    }

    pub fn is_cls(&self) -> bool {
        self.structural() == Some(Special::Cls)
    }

    pub fn is_pad(&self) -> bool {
        self.structural() == Some(Special::Pad)
    }

    /// Shared validator for the token invariants.
    pub fn validate(&self, window_minutes: u32) -> Result<()> {
        let numeric = matches!(self.value, TokenValue::Number(_));
        if self.is_continuous != numeric {
            return Err(Error::InvalidToken(format!(
                "is_continuous={} but value is {:?}",
                self.is_continuous, self.value
            )));
        }
        if let TokenValue::Number(x) = self.value {
            if !x.is_finite() {
                return Err(Error::InvalidToken(format!("non-finite value {x}")));
            }
        }
        if self.tau_minutes >= window_minutes || self.delta_minutes >= window_minutes {
            return Err(Error::InvalidToken(format!(
                "tau={} delta={} outside [0, {window_minutes})",
                self.tau_minutes, self.delta_minutes
            )));
        }
        if self.structural().is_some() && (self.tau_minutes != 0 || self.delta_minutes != 0) {
            return Err(Error::InvalidToken(
                "[CLS]/[PAD] must have tau = delta = 0".into(),
            ));
        }
        let feature_special = Special::from_text(&self.feature_text);
        let value_special = matches!(self.value, TokenValue::Special(Special::Cls | Special::Pad));
        if value_special && self.structural().is_none() {
            return Err(Error::InvalidToken(
                "[CLS]/[PAD] value on a data token".into(),
            ));
        }
        if matches!(feature_special, Some(Special::Cls | Special::Pad)) && self.structural().is_none()
        {
            return Err(Error::InvalidToken(
                "[CLS]/[PAD] feature on a data token".into(),
            ));
        }
        if self.feature_text.is_empty() {
            return Err(Error::InvalidToken("empty feature text".into()));
        }
        Ok(())
    }
}

/// Task target attached to a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Binary(bool),
    MultiLabel(Vec<bool>),
    Regression(f64),
}

/// Ordered tokens for one window of one stay.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSequence {
    pub stay_id: String,
    pub window_index: usize,
    pub window_start: Minute,
    pub tokens: Vec<Token>,
    pub label: Option<Label>,
}

impl WindowSequence {
    /// Number of non-[PAD] tokens, including [CLS].
    pub fn real_len(&self) -> usize {
        self.tokens.iter().filter(|t| !t.is_pad()).count()
    }

    /// 1 for real positions, 0 for [PAD].
    pub fn attention_mask(&self) -> Vec<u8> {
        self.tokens.iter().map(|t| u8::from(!t.is_pad())).collect()
    }

    pub fn validate(&self, window_minutes: u32, max_len: usize) -> Result<()> {
        match self.tokens.first() {
            Some(t) if t.is_cls() => {}
            _ => return Err(Error::InvalidToken("sequence must start with [CLS]".into())),
        }
        if self.tokens.len() > max_len {
            return Err(Error::InvalidToken(format!(
                "sequence length {} exceeds {max_len}",
                self.tokens.len()
            )));
        }
        let mut seen_pad = false;
        for (i, t) in self.tokens.iter().enumerate() {
            t.validate(window_minutes)?;
            if i > 0 && t.is_cls() {
                return Err(Error::InvalidToken(format!("[CLS] at position {i}")));
            }
            if t.is_pad() {
                seen_pad = true;
            } else if seen_pad {
                return Err(Error::InvalidToken(format!(
                    "real token at position {i} after [PAD]"
                )));
            }
        }
        Ok(())
    }
}

/// Mean, standard deviation and count of a continuous feature over the
/// train split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: f64,
    pub stddev: f64,
    pub count: u64,
}

impl FeatureStats {
    /// z-score; features with zero spread are only centred.
    pub fn normalize(&self, x: f64) -> f64 {
        if self.stddev > 0.0 {
            (x - self.mean) / self.stddev
        } else {
            x - self.mean
        }
    }
}

/// Dense text-to-index bijection.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    entries: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab::default();
        for e in entries {
            v.insert(e.into());
        }
        v
    }

    pub fn insert(&mut self, text: String) -> usize {
        if let Some(&i) = self.index.get(&text) {
            return i;
        }
        let i = self.entries.len();
        self.index.insert(text.clone(), i);
        self.entries.push(text);
        i
    }

    pub fn get(&self, text: &str) -> Option<usize> {
        self.index.get(text).copied()
    }

    pub fn text(&self, index: usize) -> Option<&str> {
        self.entries.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(String::as_str)
    }

    pub(crate) fn reindex(&mut self) {
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.clone(), i))
            .collect();
    }
}

/// Reserved entries at the bottom of the feature vocabulary.
pub const FEATURE_RESERVED: [&str; 3] = ["[CLS]", "[PAD]", "[MASK]"];
/// Reserved entries at the bottom of the categorical-value vocabulary.
pub const VALUE_RESERVED: [&str; 2] = ["[MASK]", "[UNK]"];
pub const VALUE_MASK: usize = 0;
pub const VALUE_UNK: usize = 1;

/// Feature and categorical-value vocabularies plus the per-feature
/// normalization statistics, all drawn from the train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub features: Vocab,
    pub categorical_values: Vocab,
    pub per_feature_stats: BTreeMap<String, FeatureStats>,
}

impl Vocabularies {
    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn n_values(&self) -> usize {
        self.categorical_values.len()
    }

    pub fn feature_index(&self, text: &str) -> Option<usize> {
        self.features.get(text)
    }

    /// Categorical value index; values never seen in training map to [UNK].
    pub fn value_index(&self, text: &str) -> usize {
        self.categorical_values.get(text).unwrap_or(VALUE_UNK)
    }

    /// Non-reserved feature indices.
    pub fn data_features(&self) -> std::ops::Range<usize> {
        FEATURE_RESERVED.len()..self.features.len()
    }

    /// Non-reserved categorical value indices.
    pub fn data_values(&self) -> std::ops::Range<usize> {
        VALUE_RESERVED.len()..self.categorical_values.len()
    }

    pub fn normalize(&self, feature: &str, x: f64) -> f64 {
        match self.per_feature_stats.get(feature) {
            Some(s) => s.normalize(x),
            None => x,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocabularies serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut v: Vocabularies =
            serde_json::from_str(text).map_err(|e| Error::FormatError(e.to_string()))?;
        v.reindex();
        Ok(v)
    }

    /// Rebuilds the lookup maps after deserialization.
    pub(crate) fn reindex(&mut self) {
        self.features.reindex();
        self.categorical_values.reindex();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg(source: &str, variable: &str, duration: i64) -> Registry {
        Registry {
            patient_id: "p1".into(),
            stay_id: "s1".into(),
            source: source.into(),
            variable: variable.into(),
            value: Value::Number(80.0),
            timestamp: Minute(0),
            duration_minutes: duration,
            is_static: false,
        }
    }

    #[test]
    fn registry_validation() {
        assert!(validate_registry(reg("chartevents", "Heart Rate", 0)).is_ok());
        match validate_registry(reg("", "Heart Rate", 0)) {
            Err(Error::InvalidRegistry(m)) => assert_eq!(m, "empty source"),
            other => panic!("{other:?}"),
        }
        match validate_registry(reg("chartevents", "Heart Rate", -5)) {
            Err(Error::InvalidRegistry(m)) => assert_eq!(m, "negative duration"),
            other => panic!("{other:?}"),
        }
        let mut r = reg("a", "b", 0);
        r.value = Value::Number(f64::NAN);
        assert!(validate_registry(r).is_err());
    }

    #[test]
    fn feature_text_format() {
        assert_eq!(
            feature_text("chartevents", "Heart Rate").unwrap(),
            "chartevents: heart rate"
        );
        assert_eq!(
            feature_text("labevents", "Creatinine").unwrap(),
            "labevents: creatinine"
        );
        assert_eq!(
            feature_text("LabEvents ", " Creatinine  (serum)").unwrap(),
            "labevents: creatinine (serum)"
        );
        assert!(feature_text(" ", "x").is_err());
        assert!(feature_text("x", "").is_err());
    }

    #[test]
    fn timestamps_floor_to_minute() {
        let a = Minute::parse("2020-01-01T00:10").unwrap();
        let b = Minute::parse("2020-01-01T00:10:59").unwrap();
        let c = Minute::parse("2020-01-01T01:10:00+01:00").unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.to_string(), "2020-01-01T00:10");
        assert!(Minute::parse("").is_err());
        assert!(Minute::parse("yesterday").is_err());
    }

    #[test]
    fn token_invariants() {
        assert!(Token::cls().validate(1440).is_ok());
        let t = Token {
            feature_text: "a: b".into(),
            value: TokenValue::Number(1.0),
            tau_minutes: 1439,
            delta_minutes: 0,
            is_continuous: true,
            is_static: false,
        };
        assert!(t.validate(1440).is_ok());
        assert!(t.validate(1439).is_err());
        let mut bad = t.clone();
        bad.is_continuous = false;
        assert!(bad.validate(1440).is_err());
        let mut masked = t;
        masked.feature_text = "[MASK]".into();
        masked.value = TokenValue::Special(Special::Mask);
        masked.is_continuous = false;
        assert!(masked.validate(1440).is_ok());
        assert!(masked.structural().is_none());
    }

    #[test]
    fn sequence_invariants() {
        let data = Token {
            feature_text: "a: b".into(),
            value: TokenValue::Category("x".into()),
            tau_minutes: 3,
            delta_minutes: 0,
            is_continuous: false,
            is_static: false,
        };
        let mut seq = WindowSequence {
            stay_id: "s".into(),
            window_index: 0,
            window_start: Minute(0),
            tokens: vec![Token::cls(), data.clone(), Token::pad()],
            label: None,
        };
        assert!(seq.validate(1440, 3).is_ok());
        assert!(seq.validate(1440, 2).is_err());
        assert_eq!(seq.attention_mask(), vec![1, 1, 0]);
        seq.tokens.push(data);
        assert!(seq.validate(1440, 8).is_err());
    }

    #[test]
    fn vocab_json_round_trip() {
        let v = Vocabularies {
            features: Vocab::new(FEATURE_RESERVED.iter().copied().chain(["x: y"])),
            categorical_values: Vocab::new(VALUE_RESERVED.iter().copied().chain(["pos"])),
            per_feature_stats: BTreeMap::new(),
        };
        let back = Vocabularies::from_json(&v.to_json()).unwrap();
        assert_eq!(back.feature_index("x: y"), Some(3));
        assert_eq!(back.value_index("pos"), 2);
        assert_eq!(back.value_index("never seen"), VALUE_UNK);
    }
}
