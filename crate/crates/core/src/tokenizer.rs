//! Stay segmentation into fixed windows, registry → quadruplet conversion,
//! truncation/padding, and rolling windows for continuous tasks.

use crate::error::{Error, Result};
use crate::ingest::Stay;
use crate::types::{
    category_text, feature_text, Label, Minute, Registry, Token, TokenValue, Value,
    Vocabularies, WindowSequence,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenizerConfig {
    pub window_minutes: u32,
    pub max_seq_len: usize,
    /// Emit windows that contain statics only (no dynamic events).
    pub emit_empty_windows: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            window_minutes: crate::types::DEFAULT_WINDOW_MINUTES,
            max_seq_len: crate::types::DEFAULT_MAX_SEQ_LEN,
            emit_empty_windows: true,
        }
    }
}

fn registry_token(r: &Registry, tau: u32, window_minutes: u32) -> Result<Token> {
    let (value, is_continuous) = match &r.value {
        Value::Number(x) => (TokenValue::Number(*x), true),
        Value::Category(c) => (TokenValue::Category(category_text(c)), false),
    };
    let delta = r.duration_minutes.clamp(0, i64::from(window_minutes) - 1) as u32;
    Ok(Token {
        feature_text: feature_text(&r.source, &r.variable)?,
        value,
        tau_minutes: tau,
        delta_minutes: delta,
        is_continuous,
        is_static: r.is_static,
    })
}

fn static_tokens(stay: &Stay, window_minutes: u32) -> Result<Vec<Token>> {
    stay.statics
        .iter()
        .map(|r| registry_token(r, 0, window_minutes))
        .collect()
}

/// Reference time of a stay: earliest dynamic timestamp, or the earliest
/// static timestamp for stays without dynamic data.
pub fn stay_start(stay: &Stay) -> Option<Minute> {
    stay.registries
        .iter()
        .map(|r| r.timestamp)
        .min()
        .or_else(|| stay.statics.iter().map(|r| r.timestamp).min())
}

fn check_window(window_minutes: u32) -> Result<()> {
    if window_minutes == 0 {
        return Err(Error::InvalidConfig("window length must be at least 1 minute".into()));
    }
    Ok(())
}

fn build_window(
    stay_id: &str,
    index: usize,
    start: Minute,
    statics: &[Token],
    mut dynamic: Vec<(u32, Token)>,
) -> WindowSequence {
    // stable: ties keep input order
    dynamic.sort_by_key(|(tau, _)| *tau);
    let mut tokens = Vec::with_capacity(1 + statics.len() + dynamic.len());
    tokens.push(Token::cls());
    tokens.extend(statics.iter().cloned());
    tokens.extend(dynamic.into_iter().map(|(_, t)| t));
    WindowSequence {
        stay_id: stay_id.to_string(),
        window_index: index,
        window_start: start,
        tokens,
        label: None,
    }
}

/// Splits a stay into non-overlapping windows `[start + jW, start + (j+1)W)`.
/// Statics are replicated into every window with `tau = delta = 0`.
pub fn segment_windows(
    stay_id: &str,
    stay: &Stay,
    window_minutes: u32,
    emit_empty: bool,
) -> Result<Vec<WindowSequence>> {
    check_window(window_minutes)?;
    let start = stay_start(stay).ok_or_else(|| Error::EmptyStay(stay_id.to_string()))?;
    let w = i64::from(window_minutes);
    let statics = static_tokens(stay, window_minutes)?;
    let n_windows = stay
        .registries
        .iter()
        .map(|r| ((r.timestamp.0 - start.0) / w) as usize + 1)
        .max()
        .unwrap_or(1);
    let mut buckets: Vec<Vec<(u32, Token)>> = vec![Vec::new(); n_windows];
    for r in &stay.registries {
        let offset = r.timestamp.0 - start.0;
        let j = (offset / w) as usize;
        let tau = (offset - j as i64 * w) as u32;
        buckets[j].push((tau, registry_token(r, tau, window_minutes)?));
    }
    Ok(buckets
        .into_iter()
        .enumerate()
        .filter(|(j, b)| emit_empty || !b.is_empty() || (*j == 0 && stay.registries.is_empty()))
        .map(|(j, b)| {
            let ws = start.plus_minutes(j as i64 * w);
            build_window(stay_id, j, ws, &statics, b)
        })
        .collect())
}

/// Applies train-split z-scoring to every continuous token.
pub fn normalize_values(seq: &mut WindowSequence, vocab: &Vocabularies) {
    for t in &mut seq.tokens {
        if let TokenValue::Number(x) = t.value {
            t.value = TokenValue::Number(vocab.normalize(&t.feature_text, x));
        }
    }
}

/// Brings a sequence to exactly `max_len` tokens: over-long sequences keep
/// [CLS], every static token, then the latest dynamic tokens by `tau`;
/// short ones are right-padded with [PAD].
pub fn truncate_and_pad(seq: &WindowSequence, max_len: usize) -> Result<WindowSequence> {
    match seq.tokens.first() {
        Some(t) if t.is_cls() => {}
        _ => return Err(Error::InvalidToken("sequence must start with [CLS]".into())),
    }
    let real: Vec<&Token> = seq.tokens[1..].iter().filter(|t| !t.is_pad()).collect();
    let n_static = real.iter().filter(|t| t.is_static).count();
    if 1 + n_static > max_len {
        return Err(Error::StaticsOverflow {
            statics: n_static,
            max_len,
        });
    }
    let mut tokens = Vec::with_capacity(max_len);
    tokens.push(Token::cls());
    if real.len() < max_len {
        tokens.extend(real.into_iter().cloned());
    } else {
        tokens.extend(real.iter().filter(|t| t.is_static).map(|t| (*t).clone()));
        let mut dynamic: Vec<&Token> = real.iter().filter(|t| !t.is_static).copied().collect();
        dynamic.sort_by_key(|t| t.tau_minutes);
        let keep = max_len - tokens.len();
        tokens.extend(dynamic[dynamic.len() - keep..].iter().map(|t| (*t).clone()));
    }
    tokens.resize(max_len, Token::pad());
    Ok(WindowSequence {
        tokens,
        ..seq.clone()
    })
}

/// Overlapping windows of length `W` whose starts advance by `step`.
///
/// Start 0 is always emitted; a later start `kS` is emitted only when the
/// whole window `[kS, kS + W)` lies before `stay_end` (defaults to one
/// minute past the last dynamic event). Each window's label comes from
/// `label_at(window_end)`.
pub fn rolling_windows(
    stay_id: &str,
    stay: &Stay,
    window_minutes: u32,
    step_minutes: u32,
    stay_end: Option<Minute>,
    label_at: &dyn Fn(Minute) -> Option<Label>,
) -> Result<Vec<WindowSequence>> {
    check_window(window_minutes)?;
    if step_minutes == 0 {
        return Err(Error::InvalidConfig("rolling step must be at least 1 minute".into()));
    }
    let start = stay_start(stay).ok_or_else(|| Error::EmptyStay(stay_id.to_string()))?;
    let end = stay_end.unwrap_or_else(|| {
        stay.registries
            .iter()
            .map(|r| r.timestamp.plus_minutes(1))
            .max()
            .unwrap_or(start.plus_minutes(1))
    });
    let w = i64::from(window_minutes);
    let s = i64::from(step_minutes);
    let statics = static_tokens(stay, window_minutes)?;
    let mut out = Vec::new();
    let mut k = 0i64;
    loop {
        let ws = start.0 + k * s;
        if k > 0 && ws + w > end.0 {
            break;
        }
        let mut dynamic = Vec::new();
        for r in &stay.registries {
            let offset = r.timestamp.0 - ws;
            if (0..w).contains(&offset) {
                let tau = offset as u32;
                dynamic.push((tau, registry_token(r, tau, window_minutes)?));
            }
        }
        let mut seq = build_window(stay_id, k as usize, Minute(ws), &statics, dynamic);
        seq.label = label_at(Minute(ws + w));
        out.push(seq);
        k += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Special;

    fn reg(t: i64, duration: i64, is_static: bool) -> Registry {
        Registry {
            patient_id: "p".into(),
            stay_id: "s".into(),
            source: "chartevents".into(),
            variable: format!("v{t}"),
            value: Value::Number(t as f64),
            timestamp: Minute(1_000_000 + t),
            duration_minutes: duration,
            is_static,
        }
    }

    fn stay(regs: Vec<Registry>) -> Stay {
        let mut s = Stay {
            patient_id: "p".into(),
            ..Stay::default()
        };
        for r in regs {
            if r.is_static {
                s.statics.push(r);
            } else {
                s.registries.push(r);
            }
        }
        s
    }

    #[test]
    fn boundary_events_split_into_two_windows() {
        let s = stay(vec![reg(0, 0, false), reg(1439, 0, false), reg(1441, 0, false)]);
        let w = segment_windows("s", &s, 1440, true).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].tokens.len(), 1 + 2);
        assert_eq!(w[1].tokens.len(), 1 + 1);
        assert_eq!(w[0].tokens[2].tau_minutes, 1439);
        assert_eq!(w[1].tokens[1].tau_minutes, 1);
        assert_eq!(w[1].window_start, Minute(1_000_000 + 1440));
    }

    #[test]
    fn long_durations_clamp() {
        let s = stay(vec![reg(0, 3000, false)]);
        let w = segment_windows("s", &s, 1440, true).unwrap();
        assert_eq!(w[0].tokens[1].delta_minutes, 1439 as u32);
    }

    #[test]
    fn statics_only_stay() {
        let s = stay(vec![reg(0, 0, true), reg(5, 0, true)]);
        let w = segment_windows("s", &s, 1440, false).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].tokens.len(), 3);
        assert!(w[0].tokens[1..].iter().all(|t| t.is_static && t.tau_minutes == 0));
    }

    #[test]
    fn empty_stay_errors() {
        assert!(matches!(
            segment_windows("s", &stay(vec![]), 1440, true),
            Err(Error::EmptyStay(_))
        ));
    }

    #[test]
    fn gap_windows_emitted_or_skipped() {
        let s = stay(vec![reg(0, 0, true), reg(0, 0, false), reg(3000, 0, false)]);
        let all = segment_windows("s", &s, 1440, true).unwrap();
        assert_eq!(all.iter().map(|w| w.window_index).collect::<Vec<_>>(), [0, 1, 2]);
        assert_eq!(all[1].tokens.len(), 2);
        let dense = segment_windows("s", &s, 1440, false).unwrap();
        assert_eq!(dense.iter().map(|w| w.window_index).collect::<Vec<_>>(), [0, 2]);
    }

    fn data_token(tau: u32, is_static: bool) -> Token {
        Token {
            feature_text: format!("f: {tau}"),
            value: TokenValue::Number(0.0),
            tau_minutes: if is_static { 0 } else { tau },
            delta_minutes: 0,
            is_continuous: true,
            is_static,
        }
    }

    fn seq_of(tokens: Vec<Token>) -> WindowSequence {
        let mut all = vec![Token::cls()];
        all.extend(tokens);
        WindowSequence {
            stay_id: "s".into(),
            window_index: 0,
            window_start: Minute(0),
            tokens: all,
            label: None,
        }
    }

    #[test]
    fn truncation_keeps_statics_and_latest() {
        let mut toks: Vec<Token> = (0..9).map(|i| data_token(i, true)).collect();
        // shuffled dynamic order; truncation must pick the 502 largest taus
        toks.extend((0..590u32).map(|i| data_token((i * 7919) % 590, false)));
        let seq = seq_of(toks);
        assert_eq!(seq.tokens.len(), 600);
        let out = truncate_and_pad(&seq, 512).unwrap();
        assert_eq!(out.tokens.len(), 512);
        assert!(out.tokens[1..10].iter().all(|t| t.is_static));
        let mut kept: Vec<u32> = out.tokens[10..].iter().map(|t| t.tau_minutes).collect();
        kept.sort();
        let expected: Vec<u32> = (590 - 502..590).collect();
        assert_eq!(kept, expected);
        assert_eq!(out.real_len(), 512);
    }

    #[test]
    fn padding_to_length() {
        let seq = seq_of((0..99).map(|i| data_token(i, false)).collect());
        let out = truncate_and_pad(&seq, 512).unwrap();
        assert_eq!(out.tokens.len(), 512);
        assert_eq!(out.real_len(), 100);
        assert_eq!(out.attention_mask().iter().map(|&m| m as usize).sum::<usize>(), 100);
        assert!(out.tokens[100..].iter().all(|t| t.value == TokenValue::Special(Special::Pad)));
        assert_eq!(truncate_and_pad(&out, 512).unwrap(), out);
    }

    #[test]
    fn too_many_statics() {
        let seq = seq_of((0..513).map(|i| data_token(i, true)).collect());
        assert!(matches!(
            truncate_and_pad(&seq, 512),
            Err(Error::StaticsOverflow { statics: 513, max_len: 512 })
        ));
    }

    #[test]
    fn rolling_full_windows() {
        let regs: Vec<Registry> = (0..2880).step_by(60).map(|t| reg(t, 0, false)).collect();
        let s = stay(regs);
        let end = Some(Minute(1_000_000 + 2880));
        let w = rolling_windows("s", &s, 1440, 360, end, &|_| None).unwrap();
        let starts: Vec<i64> = w.iter().map(|x| x.window_start.0 - 1_000_000).collect();
        assert_eq!(starts, [0, 360, 720, 1080, 1440]);
        // every window's taus are relative to its own start
        for win in &w {
            assert!(win.tokens[1..].iter().all(|t| t.tau_minutes < 1440));
            assert_eq!(win.tokens.len(), 1 + 24);
        }
    }

    #[test]
    fn rolling_short_stay_only_first() {
        let regs: Vec<Registry> = (0..720).step_by(60).map(|t| reg(t, 0, false)).collect();
        let w = rolling_windows("s", &stay(regs), 1440, 360, None, &|_| None).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].tokens.len(), 13);
    }

    #[test]
    fn rolling_with_step_equal_window_matches_segments() {
        let regs: Vec<Registry> = (0..4320).step_by(90).map(|t| reg(t, 0, false)).collect();
        let s = stay(regs);
        let rolled = rolling_windows("s", &s, 1440, 1440, Some(Minute(1_000_000 + 4320)), &|_| None)
            .unwrap();
        let segs = segment_windows("s", &s, 1440, true).unwrap();
        assert_eq!(rolled.len(), segs.len());
        for (a, b) in rolled.iter().zip(&segs) {
            assert_eq!(a.window_start, b.window_start);
            assert_eq!(a.tokens, b.tokens);
        }
    }

    #[test]
    fn rolling_labels_at_window_end() {
        let regs: Vec<Registry> = (0..2880).step_by(60).map(|t| reg(t, 0, false)).collect();
        let s = stay(regs);
        let w = rolling_windows("s", &s, 1440, 720, None, &|end| {
            Some(Label::Binary(end.0 - 1_000_000 >= 2160))
        })
        .unwrap();
        let labels: Vec<_> = w.iter().map(|x| x.label.clone()).collect();
        assert_eq!(
            labels,
            [Some(Label::Binary(false)), Some(Label::Binary(true))]
        );
    }
}
