//! Event-line parsing, patient-level split assignment and train-split
//! vocabularies.
//!
//! The event-line format is one JSON object per line:
//!
//! ```text
//! {"patient_id":"p1","stay_id":"s1","source":"chartevents","variable":"Heart Rate",
//!  "value":80,"timestamp":"2180-07-23T14:00","duration_minutes":0,"static":false}
//! ```
//!
//! `value` is a JSON number or a quoted string. `duration_minutes` and
//! `static` are optional.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value as Json};

use crate::error::{Error, Result};
use crate::objective::TaskKind;
use crate::types::{
    category_text, feature_text, validate_registry, FeatureStats, Label, Minute, Registry, Value, Vocab,
    Vocabularies, FEATURE_RESERVED, VALUE_RESERVED,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// All registries of one ICU stay, dynamic and static kept apart.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Stay {
    pub patient_id: String,
    pub registries: Vec<Registry>,
    pub statics: Vec<Registry>,
}

impl Stay {
    pub fn all(&self) -> impl Iterator<Item = &Registry> {
        self.statics.iter().chain(self.registries.iter())
    }

    pub fn is_empty(&self) -> bool {
        self.registries.is_empty() && self.statics.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub stays: BTreeMap<String, Stay>,
    pub splits: BTreeMap<String, Split>,
}

impl Corpus {
    pub fn from_registries(registries: impl IntoIterator<Item = Registry>) -> Result<Self> {
        let mut corpus = Corpus::default();
        for r in registries {
            corpus.push(validate_registry(r)?)?;
        }
        Ok(corpus)
    }

    fn push(&mut self, r: Registry) -> Result<()> {
        let stay = self.stays.entry(r.stay_id.clone()).or_insert_with(|| Stay {
            patient_id: r.patient_id.clone(),
            ..Stay::default()
        });
        if stay.patient_id != r.patient_id {
            return Err(Error::InvalidRegistry(format!(
                "stay {} belongs to patients {} and {}",
                r.stay_id, stay.patient_id, r.patient_id
            )));
        }
        if r.is_static {
            stay.statics.push(r);
        } else {
            stay.registries.push(r);
        }
        Ok(())
    }

    pub fn n_registries(&self) -> usize {
        self.stays
            .values()
            .map(|s| s.registries.len() + s.statics.len())
            .sum()
    }

    pub fn patients(&self) -> BTreeSet<&str> {
        self.stays.values().map(|s| s.patient_id.as_str()).collect()
    }

    pub fn split_of_stay(&self, stay_id: &str) -> Option<Split> {
        let stay = self.stays.get(stay_id)?;
        self.splits.get(&stay.patient_id).copied()
    }

    /// Stays whose patient is assigned to `split`, in stay-id order.
    pub fn stays_in(&self, split: Split) -> impl Iterator<Item = (&String, &Stay)> {
        self.stays
            .iter()
            .filter(move |(_, s)| self.splits.get(&s.patient_id) == Some(&split))
    }

    pub fn all_registries(&self) -> impl Iterator<Item = &Registry> {
        self.stays.values().flat_map(Stay::all)
    }
}

fn field<'a>(obj: &'a Map<String, Json>, key: &str, line_no: usize) -> Result<&'a Json> {
    match obj.get(key) {
        Some(Json::Null) | None => Err(Error::ParseError {
            line_no,
            reason: format!("missing {key}"),
        }),
        Some(v) => Ok(v),
    }
}

fn id_field(obj: &Map<String, Json>, key: &str, line_no: usize) -> Result<String> {
    match field(obj, key, line_no)? {
        Json::String(s) if !s.is_empty() => Ok(s.clone()),
        Json::Number(n) => Ok(n.to_string()),
        _ => Err(Error::ParseError {
            line_no,
            reason: format!("{key} must be a non-empty string or number"),
        }),
    }
}

fn text_field(obj: &Map<String, Json>, key: &str, line_no: usize) -> Result<String> {
    match field(obj, key, line_no)? {
        Json::String(s) => Ok(s.clone()),
        _ => Err(Error::ParseError {
            line_no,
            reason: format!("{key} must be a string"),
        }),
    }
}

/// Parses one event line. `line_no` is 1-based and only used for errors.
pub fn parse_event_line(line: &str, line_no: usize) -> Result<Registry> {
    let parsed: Json = serde_json::from_str(line).map_err(|e| Error::ParseError {
        line_no,
        reason: format!("malformed JSON: {e}"),
    })?;
    let Json::Object(obj) = parsed else {
        return Err(Error::ParseError {
            line_no,
            reason: "expected a JSON object".into(),
        });
    };
    let value = match field(&obj, "value", line_no)? {
        Json::Number(n) => Value::Number(n.as_f64().ok_or_else(|| Error::ParseError {
            line_no,
            reason: "value out of range".into(),
        })?),
        Json::String(s) => Value::Category(s.clone()),
        _ => {
            return Err(Error::ParseError {
                line_no,
                reason: "value must be a number or a string".into(),
            })
        }
    };
    let timestamp = match field(&obj, "timestamp", line_no)? {
        Json::String(s) => Minute::parse(s).map_err(|reason| Error::ParseError { line_no, reason })?,
        _ => {
            return Err(Error::ParseError {
                line_no,
                reason: "timestamp must be an ISO-8601 string".into(),
            })
        }
    };
    let duration_minutes = match obj.get("duration_minutes") {
        None | Some(Json::Null) => 0,
        Some(Json::Number(n)) => n.as_i64().ok_or_else(|| Error::ParseError {
            line_no,
            reason: "duration_minutes must be an integer".into(),
        })?,
        Some(_) => {
            return Err(Error::ParseError {
                line_no,
                reason: "duration_minutes must be an integer".into(),
            })
        }
    };
    let is_static = match obj.get("static") {
        None | Some(Json::Null) => false,
        Some(Json::Bool(b)) => *b,
        Some(_) => {
            return Err(Error::ParseError {
                line_no,
                reason: "static must be a boolean".into(),
            })
        }
    };
    let r = Registry {
        patient_id: id_field(&obj, "patient_id", line_no)?,
        stay_id: id_field(&obj, "stay_id", line_no)?,
        source: text_field(&obj, "source", line_no)?,
        variable: text_field(&obj, "variable", line_no)?,
        value,
        timestamp,
        duration_minutes,
        is_static,
    };
    validate_registry(r).map_err(|e| Error::ParseError {
        line_no,
        reason: e.to_string(),
    })
}

/// Reads an event-line file into a corpus with no split assignment. Blank
/// lines are skipped.
pub fn parse_events(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_events_from(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_events_from(reader: impl BufRead) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = parse_event_line(&line, i + 1)?;
        corpus.push(r).map_err(|e| Error::ParseError {
            line_no: i + 1,
            reason: e.to_string(),
        })?;
    }
    Ok(corpus)
}

/// Reads a labels CSV with a `stay_id` column. Binary tasks read `label`
/// (0/1), regression reads `target`, and `multilabel:n` reads `label_0` to
/// `label_{n-1}`.
pub fn parse_labels(path: impl AsRef<Path>, task: TaskKind) -> Result<BTreeMap<String, Label>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_labels_from(file, task)
}

pub fn parse_labels_from(reader: impl std::io::Read, task: TaskKind) -> Result<BTreeMap<String, Label>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r
        .headers()
        .map_err(|e| Error::ParseError { line_no: 1, reason: e.to_string() })?
        .clone();
    let column = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::ParseError {
            line_no: 1,
            reason: format!("labels file has no {name} column"),
        })
    };
    let id = column("stay_id")?;
    let cols: Vec<usize> = match task {
        TaskKind::Binary => vec![column("label")?],
        TaskKind::Regression => vec![column("target")?],
        TaskKind::MultiLabel(n) => (0..n).map(|j| column(&format!("label_{j}"))).collect::<Result<_>>()?,
    };
    let mut out = BTreeMap::new();
    for (i, rec) in r.records().enumerate() {
        let line_no = i + 2;
        let bad = |reason: String| Error::ParseError { line_no, reason };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let get = |c: usize| rec.get(c).map(str::trim).ok_or_else(|| bad(format!("missing column {c}")));
        let flag = |c: usize| match get(c)? {
            "1" | "true" => Ok(true),
            "0" | "false" => Ok(false),
            other => Err(bad(format!("{other:?} is not a 0/1 label"))),
        };
        let label = match task {
            TaskKind::Binary => Label::Binary(flag(cols[0])?),
            TaskKind::Regression => {
                let text = get(cols[0])?;
                let y: f64 = text.parse().map_err(|_| bad(format!("{text:?} is not a number")))?;
                if !y.is_finite() {
                    return Err(Error::NonFiniteValue(y));
                }
                Label::Regression(y)
            }
            TaskKind::MultiLabel(_) => Label::MultiLabel(cols.iter().map(|&c| flag(c)).collect::<Result<_>>()?),
        };
        let stay = get(id)?.to_string();
        if stay.is_empty() {
            return Err(bad("empty stay_id".into()));
        }
        if out.insert(stay.clone(), label).is_some() {
            return Err(bad(format!("duplicate stay_id {stay}")));
        }
    }
    Ok(out)
}

/// Serializes one registry as an event line (no trailing newline).
pub fn event_line(r: &Registry) -> String {
    let mut obj = Map::new();
    obj.insert("patient_id".into(), Json::String(r.patient_id.clone()));
    obj.insert("stay_id".into(), Json::String(r.stay_id.clone()));
    obj.insert("source".into(), Json::String(r.source.clone()));
    obj.insert("variable".into(), Json::String(r.variable.clone()));
    let value = match &r.value {
        Value::Number(x) => serde_json::Number::from_f64(*x)
            .map(Json::Number)
            .unwrap_or(Json::Null),
        Value::Category(c) => Json::String(c.clone()),
    };
    obj.insert("value".into(), value);
    obj.insert("timestamp".into(), Json::String(r.timestamp.to_string()));
    obj.insert("duration_minutes".into(), Json::from(r.duration_minutes));
    obj.insert("static".into(), Json::Bool(r.is_static));
    Json::Object(obj).to_string()
}

pub fn write_events<'a>(
    mut out: impl Write,
    registries: impl IntoIterator<Item = &'a Registry>,
) -> std::io::Result<()> {
    for r in registries {
        writeln!(out, "{}", event_line(r))?;
    }
    Ok(())
}

/// Split sizes by largest remainder: floors first, then leftover patients go
/// to the largest fractional parts, ties to the larger ratio and then to the
/// earlier split.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::InvalidRatios(format!("{ratios:?} has a negative entry")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidRatios(format!("{ratios:?} sums to {sum}")));
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra)
            .then(ratios[b].total_cmp(&ratios[a]))
            .then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}

/// Assigns every patient to train/val/test. Deterministic in `seed`; all
/// stays of a patient share its split.
pub fn assign_splits(mut corpus: Corpus, ratios: [f64; 3], seed: u64) -> Result<Corpus> {
    let mut patients: Vec<String> = corpus.patients().into_iter().map(String::from).collect();
    let counts = split_counts(patients.len(), ratios)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    corpus.splits.clear();
    let mut it = patients.into_iter();
    for (split, n) in [Split::Train, Split::Val, Split::Test].into_iter().zip(counts) {
        for p in it.by_ref().take(n) {
            corpus.splits.insert(p, split);
        }
    }
    Ok(corpus)
}

/// Builds the feature and categorical-value vocabularies and the continuous
/// feature statistics from the train split only.
pub fn build_vocabularies(corpus: &Corpus) -> Result<Vocabularies> {
    let mut features = BTreeSet::new();
    let mut values = BTreeSet::new();
    let mut sums: BTreeMap<String, (f64, f64, u64)> = BTreeMap::new();
    let mut any = false;
    for (_, stay) in corpus.stays_in(Split::Train) {
        for r in stay.all() {
            any = true;
            let f = feature_text(&r.source, &r.variable)?;
            match &r.value {
                Value::Number(x) => {
                    let e = sums.entry(f.clone()).or_insert((0.0, 0.0, 0));
                    e.0 += x;
                    e.2 += 1;
                }
                Value::Category(c) => {
                    values.insert(category_text(c));
                }
            }
            features.insert(f);
        }
    }
    if !any {
        return Err(Error::EmptyTrainSplit);
    }
    // second pass for a numerically stable variance
    for (_, stay) in corpus.stays_in(Split::Train) {
        for r in stay.all() {
            if let Value::Number(x) = r.value {
                let f = feature_text(&r.source, &r.variable)?;
                let e = sums.get_mut(&f).expect("first pass saw this feature");
                let mean = e.0 / e.2 as f64;
                e.1 += (x - mean) * (x - mean);
            }
        }
    }
    let per_feature_stats = sums
        .into_iter()
        .map(|(f, (sum, ss, n))| {
            let mean = sum / n as f64;
            let stats = FeatureStats {
                mean,
                stddev: (ss / n as f64).sqrt(),
                count: n,
            };
            (f, stats)
        })
        .collect();
    Ok(Vocabularies {
        features: Vocab::new(FEATURE_RESERVED.iter().map(|s| s.to_string()).chain(features)),
        categorical_values: Vocab::new(VALUE_RESERVED.iter().map(|s| s.to_string()).chain(values)),
        per_feature_stats,
    })
}
