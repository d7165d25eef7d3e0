//! Synthetic event-stream corpora with a planted outcome.
//!
//! Each stay draws events for every dynamic feature from a Poisson process
//! over the stay. Features come in three kinds:
//!
//! * continuous measurements, whose values share a per-stay level so that
//!   one occurrence predicts the others;
//! * categorical observations with feature-specific value sets and a
//!   dominant per-stay value;
//! * infusions with a continuous rate and a feature-specific duration.
//!
//! The outcome is 1 when a positive blood culture is drawn within the first
//! window of the stay; the continuous target is shifted by the outcome.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::{write_events, Stay};
use crate::io_util::write_atomic;
use crate::tokenizer::stay_start;
use crate::train::derive_seed;
use crate::types::{category_text, feature_text, Minute, Registry, Value, DEFAULT_WINDOW_MINUTES};

pub const SIGNAL_SOURCE: &str = "microbiology";
pub const SIGNAL_VARIABLE: &str = "blood culture";
pub const SIGNAL_POSITIVE: &str = "positive";
pub const SIGNAL_NEGATIVE: &str = "negative";

const CONTINUOUS: [&str; 20] = [
    "heart rate",
    "respiratory rate",
    "systolic blood pressure",
    "diastolic blood pressure",
    "temperature",
    "oxygen saturation",
    "glucose",
    "creatinine",
    "sodium",
    "potassium",
    "hemoglobin",
    "platelets",
    "white blood cells",
    "lactate",
    "bicarbonate",
    "urea nitrogen",
    "chloride",
    "magnesium",
    "arterial ph",
    "bilirubin",
];

const CATEGORICAL: [&str; 16] = [
    "heart rhythm",
    "gcs eye opening",
    "gcs verbal response",
    "gcs motor response",
    "pupil response",
    "skin color",
    "edema",
    "mobility",
    "cough effort",
    "breath sounds",
    "bowel sounds",
    "pain level",
    "sedation scale",
    "urine color",
    "capillary refill",
    "activity tolerance",
];

const INFUSIONS: [&str; 16] = [
    "norepinephrine",
    "propofol",
    "insulin",
    "heparin",
    "normal saline",
    "fentanyl",
    "vancomycin",
    "midazolam",
    "dextrose",
    "potassium chloride",
    "furosemide",
    "vasopressin",
    "amiodarone",
    "dexmedetomidine",
    "lactated ringers",
    "piperacillin",
];

const LEVELS: [&str; 3] = ["normal", "mild", "severe"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub patients: usize,
    /// Dynamic features, excluding the blood culture.
    pub features: usize,
    /// Expected events per minute for each dynamic feature.
    pub rate: f64,
    /// Probability that a stay carries the planted positive culture.
    pub signal_incidence: f64,
    /// Probability of a negative culture somewhere in the stay.
    pub negative_culture_rate: f64,
    pub min_stay_hours: f64,
    pub max_stay_hours: f64,
    /// Shift of the continuous target for positive stays.
    pub target_shift: f64,
    pub window_minutes: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            patients: 100,
            features: 30,
            rate: 0.004,
            signal_incidence: 0.1,
            negative_culture_rate: 0.3,
            min_stay_hours: 24.0,
            max_stay_hours: 48.0,
            target_shift: 2.0,
            window_minutes: DEFAULT_WINDOW_MINUTES,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.patients == 0 {
            return bad("at least one patient is required");
        }
        if self.features < 2 {
            return bad("at least two features are required");
        }
        if !(self.rate.is_finite() && self.rate >= 0.0) {
            return bad("event rate must be finite and non-negative");
        }
        for p in [self.signal_incidence, self.negative_culture_rate] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if !(self.min_stay_hours > 0.0 && self.min_stay_hours <= self.max_stay_hours && self.max_stay_hours.is_finite()) {
            return bad("stay length range must be positive and ordered");
        }
        if self.window_minutes == 0 || !self.target_shift.is_finite() {
            return bad("window must be positive and the target shift finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Continuous { mean: f64, sd: f64 },
    Categorical,
    Infusion { mean: f64, sd: f64, duration: i64 },
}

#[derive(Debug, Clone, PartialEq)]
struct Feature {
    source: &'static str,
    variable: String,
    kind: Kind,
}

fn numbered(names: &[&str], i: usize) -> String {
    let base = names[i % names.len()];
    match i / names.len() {
        0 => base.to_string(),
        k => format!("{base} {}", k + 1),
    }
}

fn features(n: usize) -> Vec<Feature> {
    (0..n)
        .map(|k| {
            let j = k / 3;
            match k % 3 {
                0 => Feature {
                    source: if j % 2 == 0 { "chartevents" } else { "labevents" },
                    variable: numbered(&CONTINUOUS, j),
                    kind: Kind::Continuous {
                        mean: 10.0 * (1 + j % 9) as f64,
                        sd: 1.0 + (j % 4) as f64,
                    },
                },
                1 => Feature {
                    source: "chartevents",
                    variable: numbered(&CATEGORICAL, j),
                    kind: Kind::Categorical,
                },
                _ => Feature {
                    source: "inputevents",
                    variable: numbered(&INFUSIONS, j),
                    kind: Kind::Infusion {
                        mean: 5.0 * (1 + j % 5) as f64,
                        sd: 1.0 + (j % 3) as f64,
                        duration: (20 * (j as i64 + 1)).min(1439),
                    },
                },
            }
        })
        .collect()
}

fn round(x: f64, digits: i32) -> f64 {
    let p = 10f64.powi(digits);
    (x * p).round() / p
}

/// One generated stay with its outcome and continuous target.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthStay {
    pub patient_id: String,
    pub stay_id: String,
    pub registries: Vec<Registry>,
    pub label: bool,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub stays: Vec<SynthStay>,
}

impl SynthCorpus {
    pub fn registries(&self) -> impl Iterator<Item = &Registry> {
        self.stays.iter().flat_map(|s| s.registries.iter())
    }

    pub fn n_events(&self) -> usize {
        self.stays.iter().map(|s| s.registries.len()).sum()
    }

    /// `stay_id,label,target` rows with a header.
    pub fn labels_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::FormatError(e.to_string());
        w.write_record(["stay_id", "label", "target"]).map_err(err)?;
        for s in &self.stays {
            w.write_record([s.stay_id.as_str(), if s.label { "1" } else { "0" }, &format!("{}", s.target)])
                .map_err(err)?;
        }
        w.into_inner().map_err(|e| Error::FormatError(e.to_string()))
    }

    /// Writes the event lines to `path` and the labels next to it.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<PathBuf> {
        let path = path.as_ref();
        write_atomic(path, |w| write_events(w, self.registries()))?;
        let labels = labels_path(path);
        let bytes = self.labels_csv()?;
        write_atomic(&labels, |w| std::io::Write::write_all(w, &bytes))?;
        Ok(labels)
    }
}

/// `<events>.labels.csv`.
pub fn labels_path(events: &Path) -> PathBuf {
    let mut name = events.file_name().unwrap_or_default().to_os_string();
    name.push(".labels.csv");
    events.with_file_name(name)
}

fn registry(patient: &str, stay: &str, source: &str, variable: &str, value: Value, at: Minute, duration: i64, is_static: bool) -> Registry {
    Registry {
        patient_id: patient.to_string(),
        stay_id: stay.to_string(),
        source: source.to_string(),
        variable: variable.to_string(),
        value,
        timestamp: at,
        duration_minutes: duration,
        is_static,
    }
}

fn generate_stay(spec: &SynthSpec, feats: &[Feature], index: usize, seed: u64) -> SynthStay {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[index as u64]));
    let patient = format!("p{index:06}");
    let stay = format!("{patient}-1");
    // 2150-01-01T00:00 plus a few days per patient
    let admit = Minute(94_671_360 + index as i64 * 4 * 1440 + rng.random_range(0..1440));
    let minutes = (rng.random_range(spec.min_stay_hours..=spec.max_stay_hours) * 60.0).round().max(1.0) as i64;
    let r = |p: &str, v: &str, value: Value, at: Minute, d: i64, s: bool| registry(&patient, &stay, p, v, value, at, d, s);

    let mut statics = vec![
        r("demographics", "age", Value::Number(rng.random_range(18..=90) as f64), admit, 0, true),
        r(
            "demographics",
            "gender",
            Value::Category(if rng.random_bool(0.5) { "female" } else { "male" }.into()),
            admit,
            0,
            true,
        ),
    ];
    let mut dynamic: Vec<(i64, Registry)> = Vec::new();
    if spec.rate > 0.0 {
        let gap = Exp::new(spec.rate).expect("positive rate");
        for f in feats {
            let level: f64 = StandardNormal.sample(&mut rng);
            let dominant = rng.random_range(0..LEVELS.len());
            let mut t = 0.0;
            loop {
                t += gap.sample(&mut rng);
                if t >= minutes as f64 {
                    break;
                }
                let noise: f64 = StandardNormal.sample(&mut rng);
                let (value, duration) = match f.kind {
                    Kind::Continuous { mean, sd } => (Value::Number(round(mean + sd * (level + 0.3 * noise), 2)), 0),
                    Kind::Infusion { mean, sd, duration } => {
                        (Value::Number(round(mean + sd * (level + 0.3 * noise), 2)), duration)
                    }
                    Kind::Categorical => {
                        let k = if rng.random_bool(0.9) { dominant } else { rng.random_range(0..LEVELS.len()) };
                        (Value::Category(format!("{} {}", f.variable, LEVELS[k])), 0)
                    }
                };
                let at = t.floor() as i64;
                dynamic.push((at, r(f.source, &f.variable, value, admit.plus_minutes(at), duration, false)));
            }
        }
        let first = i64::from(spec.window_minutes).min(minutes);
        if rng.random_bool(spec.signal_incidence) {
            let at = rng.random_range(0..first);
            let v = Value::Category(SIGNAL_POSITIVE.into());
            dynamic.push((at, r(SIGNAL_SOURCE, SIGNAL_VARIABLE, v, admit.plus_minutes(at), 0, false)));
        }
        if rng.random_bool(spec.negative_culture_rate) {
            let at = rng.random_range(0..minutes);
            let v = Value::Category(SIGNAL_NEGATIVE.into());
            dynamic.push((at, r(SIGNAL_SOURCE, SIGNAL_VARIABLE, v, admit.plus_minutes(at), 0, false)));
        }
    }
    dynamic.sort_by_key(|(t, _)| *t);
    statics.extend(dynamic.into_iter().map(|(_, reg)| reg));
    let registries = statics;
    let label = oracle_label(&registries, spec.window_minutes).expect("window checked");
    let noise: f64 = StandardNormal.sample(&mut rng);
    let target = round(noise + if label { spec.target_shift } else { 0.0 }, 4);
    SynthStay {
        patient_id: patient.clone(),
        stay_id: stay.clone(),
        registries,
        label,
        target,
    }
}

pub fn generate_corpus(spec: &SynthSpec, seed: u64) -> Result<SynthCorpus> {
    spec.validate()?;
    let feats = features(spec.features);
    let stays = (0..spec.patients)
        .into_par_iter()
        .map(|i| generate_stay(spec, &feats, i, seed))
        .collect();
    Ok(SynthCorpus { stays })
}

/// 1 iff a positive blood culture falls in the stay's first window, with the
/// window anchored the same way the tokenizer anchors it.
pub fn oracle_label(registries: &[Registry], window_minutes: u32) -> Result<bool> {
    if window_minutes == 0 {
        return Err(Error::InvalidSpec("window must be positive".into()));
    }
    let stay = Stay {
        patient_id: String::new(),
        registries: registries.iter().filter(|r| !r.is_static).cloned().collect(),
        statics: registries.iter().filter(|r| r.is_static).cloned().collect(),
    };
    let Some(start) = stay_start(&stay) else {
        return Ok(false);
    };
    let signal = feature_text(SIGNAL_SOURCE, SIGNAL_VARIABLE)?;
    let end = start.plus_minutes(i64::from(window_minutes));
    Ok(stay.registries.iter().any(|r| {
        r.timestamp < end
            && matches!(&r.value, Value::Category(c) if category_text(c) == SIGNAL_POSITIVE)
            && feature_text(&r.source, &r.variable).is_ok_and(|f| f == signal)
    }))
}
