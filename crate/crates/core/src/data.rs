//! Observed recurrent-event data: subjects, samples, validation and file formats.
//!
//! JSON layout:
//!
//! ```json
//! { "d": 2, "subjects": [ { "T": 1.5, "delta": 1, "Z": [0.3, 1.2], "events": [0.2, 0.9] } ] }
//! ```
//!
//! The CSV layout is two files: one row per subject (`id,T,delta,z1..zd`) and one row per
//! recurrent event (`id,event_time`).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One individual's observation: `T = min(D, C)`, `delta = 1{D <= C}`, covariates and the
/// recurrent event times observed on `(0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub observation_time: f64,
    pub death_observed: bool,
    pub covariates: Vec<f64>,
    pub event_times: Vec<f64>,
}

impl Subject {
    pub fn new(
        observation_time: f64,
        death_observed: bool,
        covariates: Vec<f64>,
        event_times: Vec<f64>,
    ) -> Self {
        Self {
            observation_time,
            death_observed,
            covariates,
            event_times,
        }
    }

    /// `N(t)`: number of events in `[0, t]`.
    pub fn count(&self, t: f64) -> usize {
        self.event_times.partition_point(|&s| s <= t)
    }

    /// `theta' Z`.
    pub fn index(&self, theta: &[f64]) -> f64 {
        dot(theta, &self.covariates)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A validated sample: at least one subject, common covariate dimension, no ties among the
/// pooled observation and event times.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    subjects: Vec<Subject>,
    dim: usize,
}

/// How [`validate_sample`] treats tied times.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum TiePolicy {
    #[default]
    Reject,
    /// Break ties by perturbations of magnitude at most `1e-9 * max T`, drawn from a
    /// generator seeded with the given value.
    Jitter { seed: u64 },
}

impl Sample {
    /// Validates and wraps `subjects`, rejecting ties.
    pub fn new(subjects: Vec<Subject>) -> Result<Self> {
        validate_sample(subjects, TiePolicy::Reject)
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `T_(n)`, the largest observation time.
    pub fn max_observation_time(&self) -> f64 {
        self.subjects
            .iter()
            .map(|s| s.observation_time)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn total_events(&self) -> usize {
        self.subjects.iter().map(|s| s.event_times.len()).sum()
    }

    pub fn censoring_fraction(&self) -> f64 {
        let censored = self.subjects.iter().filter(|s| !s.death_observed).count();
        censored as f64 / self.len() as f64
    }

    /// Same subjects in a different order; `order` must be a permutation.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            subjects: order.iter().map(|&i| self.subjects[i].clone()).collect(),
            dim: self.dim,
        }
    }

    pub fn without(&self, index: usize) -> Result<Self> {
        let mut subjects = self.subjects.clone();
        subjects.remove(index);
        Sample::new(subjects)
    }
}

/// Checks the sample invariants, sorting each subject's event times.
pub fn validate_sample(mut subjects: Vec<Subject>, ties: TiePolicy) -> Result<Sample> {
    let Some(first) = subjects.first() else {
        return Err(Error::EmptySample);
    };
    let dim = first.covariates.len();
    for (i, s) in subjects.iter_mut().enumerate() {
        check_subject(i, s, dim)?;
        s.event_times.sort_by(f64::total_cmp);
    }
    let collisions = tied_times(&subjects);
    if !collisions.is_empty() {
        match ties {
            TiePolicy::Reject => return Err(Error::TieViolation { times: collisions }),
            TiePolicy::Jitter { seed } => {
                jitter(&mut subjects, seed)?;
                for (i, s) in subjects.iter_mut().enumerate() {
                    s.event_times.sort_by(f64::total_cmp);
                    check_subject(i, s, dim)?;
                }
            }
        }
    }
    Ok(Sample { subjects, dim })
}

fn check_subject(i: usize, s: &Subject, dim: usize) -> Result<()> {
    if s.covariates.is_empty() || s.covariates.len() != dim {
        return Err(Error::DimensionMismatch {
            subject: i,
            expected: dim.max(1),
            found: s.covariates.len(),
        });
    }
    if !s.observation_time.is_finite() {
        return Err(Error::NonFinite {
            subject: i,
            field: "T",
        });
    }
    if s.covariates.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite {
            subject: i,
            field: "Z",
        });
    }
    if s.event_times.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite {
            subject: i,
            field: "events",
        });
    }
    if s.observation_time < 0.0 {
        return Err(Error::NegativeTime {
            subject: i,
            value: s.observation_time,
        });
    }
    for &e in &s.event_times {
        if e <= 0.0 {
            return Err(Error::NegativeTime {
                subject: i,
                value: e,
            });
        }
        if e > s.observation_time {
            return Err(Error::EventAfterObservation {
                subject: i,
                event: e,
                observation: s.observation_time,
            });
        }
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Slot {
    Observation(usize),
    Event(usize, usize),
}

fn pooled(subjects: &[Subject]) -> Vec<(f64, Slot)> {
    let mut all = Vec::new();
    for (i, s) in subjects.iter().enumerate() {
        all.push((s.observation_time, Slot::Observation(i)));
        for (e, &t) in s.event_times.iter().enumerate() {
            all.push((t, Slot::Event(i, e)));
        }
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    all
}

fn tied_times(subjects: &[Subject]) -> Vec<f64> {
    let all = pooled(subjects);
    let mut out: Vec<f64> = Vec::new();
    for w in all.windows(2) {
        if w[0].0 == w[1].0 && out.last() != Some(&w[0].0) {
            out.push(w[0].0);
        }
    }
    out
}

/// Observation times move up and event times move down so `event <= T` survives.
fn jitter(subjects: &mut [Subject], seed: u64) -> Result<()> {
    let max_t = subjects
        .iter()
        .map(|s| s.observation_time)
        .fold(0.0, f64::max);
    let scale = 1e-9 * if max_t > 0.0 { max_t } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..64 {
        let all = pooled(subjects);
        let mut changed = false;
        let mut k = 0;
        while k < all.len() {
            let mut end = k + 1;
            while end < all.len() && all[end].0 == all[k].0 {
                end += 1;
            }
            for &(_, slot) in &all[k + 1..end] {
                let eps = scale * (1.0 - rng.random::<f64>());
                match slot {
                    Slot::Observation(i) => subjects[i].observation_time += eps,
                    Slot::Event(i, e) => subjects[i].event_times[e] -= eps,
                }
                changed = true;
            }
            k = end;
        }
        if !changed {
            return Ok(());
        }
    }
    Err(Error::TieViolation {
        times: tied_times(subjects),
    })
}

// ---------------------------------------------------------------------------
// File formats

#[derive(Debug, Serialize, Deserialize)]
struct JsonSample {
    d: usize,
    subjects: Vec<JsonSubject>,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonSubject {
    #[serde(rename = "T")]
    t: f64,
    delta: u8,
    #[serde(rename = "Z")]
    z: Vec<f64>,
    events: Vec<f64>,
}

/// Where a sample is read from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SampleSource {
    Json(PathBuf),
    Csv { subjects: PathBuf, events: PathBuf },
}

impl SampleSource {
    /// `a.json` reads JSON; `a.csv,b.csv` reads the subject and event CSV pair.
    pub fn parse(spec: &str) -> Result<Self> {
        if let Some((a, b)) = spec.split_once(',') {
            return Ok(SampleSource::Csv {
                subjects: a.trim().into(),
                events: b.trim().into(),
            });
        }
        if spec.ends_with(".csv") {
            return Err(Error::Schema(
                "CSV input needs both files: --data subjects.csv,events.csv".into(),
            ));
        }
        Ok(SampleSource::Json(spec.into()))
    }
}

pub fn load_sample(source: &SampleSource) -> Result<Sample> {
    match source {
        SampleSource::Json(path) => load_sample_json(path),
        SampleSource::Csv { subjects, events } => load_sample_csv(subjects, events),
    }
}

pub fn sample_from_json(text: &str, path: &Path) -> Result<Sample> {
    let raw: JsonSample = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        field: "<json>".into(),
        message: e.to_string(),
    })?;
    let mut subjects = Vec::with_capacity(raw.subjects.len());
    for (i, s) in raw.subjects.into_iter().enumerate() {
        if s.z.len() != raw.d {
            return Err(Error::DimensionMismatch {
                subject: i,
                expected: raw.d,
                found: s.z.len(),
            });
        }
        let delta = match s.delta {
            0 => false,
            1 => true,
            other => {
                return Err(Error::Schema(format!(
                    "subject {i}: delta must be 0 or 1, got {other}"
                )))
            }
        };
        subjects.push(Subject::new(s.t, delta, s.z, s.events));
    }
    Sample::new(subjects)
}

pub fn load_sample_json(path: &Path) -> Result<Sample> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    sample_from_json(&text, path)
}

pub fn sample_to_json(sample: &Sample) -> String {
    let raw = JsonSample {
        d: sample.dim(),
        subjects: sample
            .subjects()
            .iter()
            .map(|s| JsonSubject {
                t: s.observation_time,
                delta: u8::from(s.death_observed),
                z: s.covariates.clone(),
                events: s.event_times.clone(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&raw).expect("sample serializes")
}

pub fn save_sample_json(sample: &Sample, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, sample_to_json(sample).as_bytes())
}

fn csv_error(path: &Path, line: usize, field: &str, message: impl ToString) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        field: field.to_string(),
        message: message.to_string(),
    }
}

fn parse_field(path: &Path, line: usize, field: &str, raw: &str) -> Result<f64> {
    raw.trim()
        .parse::<f64>()
        .map_err(|e| csv_error(path, line, field, e))
}

pub fn load_sample_csv(subjects_path: &Path, events_path: &Path) -> Result<Sample> {
    let mut reader =
        csv::Reader::from_path(subjects_path).map_err(|e| csv_open_error(subjects_path, e))?;
    let headers = reader
        .headers()
        .map_err(|e| csv_error(subjects_path, 1, "<header>", e))?
        .clone();
    let column = |name: &str| headers.iter().position(|h| h.trim() == name);
    let id_col = column("id").ok_or_else(|| Error::Schema("subjects file lacks `id`".into()))?;
    let t_col = column("T").ok_or_else(|| Error::Schema("subjects file lacks `T`".into()))?;
    let delta_col =
        column("delta").ok_or_else(|| Error::Schema("subjects file lacks `delta`".into()))?;
    let mut z_cols = Vec::new();
    while let Some(c) = column(&format!("z{}", z_cols.len() + 1)) {
        z_cols.push(c);
    }
    if z_cols.is_empty() {
        return Err(Error::Schema("subjects file has no covariate column z1".into()));
    }

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Subject> = HashMap::new();
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| csv_error(subjects_path, line, "<row>", e))?;
        let get = |c: usize, name: &str| {
            record
                .get(c)
                .ok_or_else(|| csv_error(subjects_path, line, name, "missing field"))
        };
        let id = get(id_col, "id")?.trim().to_string();
        let t = parse_field(subjects_path, line, "T", get(t_col, "T")?)?;
        let delta = match get(delta_col, "delta")?.trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(csv_error(
                    subjects_path,
                    line,
                    "delta",
                    format!("expected 0 or 1, got `{other}`"),
                ))
            }
        };
        let mut z = Vec::with_capacity(z_cols.len());
        for (j, &c) in z_cols.iter().enumerate() {
            let name = format!("z{}", j + 1);
            z.push(parse_field(subjects_path, line, &name, get(c, &name)?)?);
        }
        if rows.contains_key(&id) {
            return Err(csv_error(subjects_path, line, "id", format!("duplicate id `{id}`")));
        }
        order.push(id.clone());
        rows.insert(id, Subject::new(t, delta, z, Vec::new()));
    }

    let mut reader =
        csv::Reader::from_path(events_path).map_err(|e| csv_open_error(events_path, e))?;
    let headers = reader
        .headers()
        .map_err(|e| csv_error(events_path, 1, "<header>", e))?
        .clone();
    let column = |name: &str| headers.iter().position(|h| h.trim() == name);
    let id_col = column("id").ok_or_else(|| Error::Schema("events file lacks `id`".into()))?;
    let e_col = column("event_time")
        .ok_or_else(|| Error::Schema("events file lacks `event_time`".into()))?;
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| csv_error(events_path, line, "<row>", e))?;
        let id = record
            .get(id_col)
            .ok_or_else(|| csv_error(events_path, line, "id", "missing field"))?
            .trim();
        let raw = record
            .get(e_col)
            .ok_or_else(|| csv_error(events_path, line, "event_time", "missing field"))?;
        let t = parse_field(events_path, line, "event_time", raw)?;
        let subject = rows
            .get_mut(id)
            .ok_or_else(|| csv_error(events_path, line, "id", format!("unknown id `{id}`")))?;
        subject.event_times.push(t);
    }

    let subjects = order
        .into_iter()
        .map(|id| rows.remove(&id).expect("id recorded"))
        .collect();
    Sample::new(subjects)
}

fn csv_open_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Schema(format!("{}: {other:?}", path.display())),
    }
}

/// Writes the two CSV files; subject ids are `1..=n`.
pub fn save_sample_csv(sample: &Sample, subjects_path: &Path, events_path: &Path) -> Result<()> {
    let mut subjects = String::from("id,T,delta");
    for j in 1..=sample.dim() {
        subjects.push_str(&format!(",z{j}"));
    }
    subjects.push('\n');
    let mut events = String::from("id,event_time\n");
    for (i, s) in sample.subjects().iter().enumerate() {
        subjects.push_str(&format!(
            "{},{},{}",
            i + 1,
            s.observation_time,
            u8::from(s.death_observed)
        ));
        for z in &s.covariates {
            subjects.push_str(&format!(",{z}"));
        }
        subjects.push('\n');
        for e in &s.event_times {
            events.push_str(&format!("{},{e}\n", i + 1));
        }
    }
    crate::io::write_atomic(subjects_path, subjects.as_bytes())?;
    crate::io::write_atomic(events_path, events.as_bytes())
}

/// The `j`-th covariate across subjects.
pub(crate) fn column(sample: &Sample, j: usize) -> Vec<f64> {
    sample.subjects().iter().map(|s| s.covariates[j]).collect()
}

/// Linear-interpolation sample quantile (type 7).
pub fn quantile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three() -> Vec<Subject> {
        vec![
            Subject::new(1.0, true, vec![0.1], vec![0.5]),
            Subject::new(2.0, false, vec![0.2], vec![1.5, 0.7]),
            Subject::new(3.0, true, vec![0.3], vec![]),
        ]
    }

    #[test]
    fn valid_sample_is_kept() {
        let sample = Sample::new(three()).unwrap();
        assert_eq!(sample.len(), 3);
        assert_eq!(sample.subjects()[1].event_times, vec![0.7, 1.5]);
        assert_eq!(sample.subjects()[0], three()[0]);
        assert_eq!(sample.max_observation_time(), 3.0);
        assert_eq!(sample.total_events(), 3);
    }

    #[test]
    fn event_after_observation_rejected() {
        let mut s = three();
        s[0].event_times.push(1.2);
        assert!(matches!(
            Sample::new(s),
            Err(Error::EventAfterObservation { subject: 0, .. })
        ));
    }

    #[test]
    fn negative_and_zero_times_rejected() {
        let mut s = three();
        s[2].observation_time = -1.0;
        assert!(matches!(Sample::new(s), Err(Error::NegativeTime { .. })));
        let mut s = three();
        s[2].event_times.push(0.0);
        assert!(matches!(Sample::new(s), Err(Error::NegativeTime { .. })));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut s = three();
        s[1].covariates.push(1.0);
        assert!(matches!(Sample::new(s), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(Sample::new(vec![]), Err(Error::EmptySample)));
    }

    #[test]
    fn tied_observation_times_rejected_then_jittered() {
        let subjects = vec![
            Subject::new(1.0, true, vec![0.0], vec![]),
            Subject::new(1.0, false, vec![1.0], vec![0.5]),
            Subject::new(2.0, true, vec![2.0], vec![0.5, 2.0]),
        ];
        match Sample::new(subjects.clone()) {
            Err(Error::TieViolation { times }) => assert_eq!(times, vec![0.5, 1.0, 2.0]),
            other => panic!("expected tie violation, got {other:?}"),
        }
        let a = validate_sample(subjects.clone(), TiePolicy::Jitter { seed: 3 }).unwrap();
        let b = validate_sample(subjects, TiePolicy::Jitter { seed: 3 }).unwrap();
        assert_eq!(a, b);
        assert!(tied_times(a.subjects()).is_empty());
        for (orig, s) in [1.0, 1.0, 2.0].iter().zip(a.subjects()) {
            assert!((s.observation_time - orig).abs() <= 2e-9 * 2.0);
            assert!(s.event_times.iter().all(|&e| e <= s.observation_time));
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let subjects = vec![
            Subject::new(0.1 + 0.2, true, vec![1.0 / 3.0, 2.0], vec![0.1, 0.2 + 1e-17]),
            Subject::new(1.7, false, vec![std::f64::consts::PI, -0.5], vec![]),
        ];
        let sample = Sample::new(subjects).unwrap();
        let text = sample_to_json(&sample);
        let back = sample_from_json(&text, Path::new("mem.json")).unwrap();
        assert_eq!(back, sample);
        assert_eq!(back.len(), 2);
    }

    #[test]
    fn json_schema_errors() {
        let bad = r#"{"d": 2, "subjects": [{"T": 1.0, "delta": 1, "Z": [1.0], "events": []}]}"#;
        assert!(matches!(
            sample_from_json(bad, Path::new("x")),
            Err(Error::DimensionMismatch { .. })
        ));
        let bad = r#"{"d": 1, "subjects": [{"T": 1.0, "delta": 2, "Z": [1.0], "events": []}]}"#;
        assert!(matches!(sample_from_json(bad, Path::new("x")), Err(Error::Schema(_))));
        let bad = r#"{"d": 1, "subjects": [{"T": 1.0, "Z": [1.0], "events": []}]}"#;
        assert!(matches!(sample_from_json(bad, Path::new("x")), Err(Error::Parse { .. })));
    }

    #[test]
    fn source_parsing() {
        assert_eq!(
            SampleSource::parse("a.csv,b.csv").unwrap(),
            SampleSource::Csv {
                subjects: "a.csv".into(),
                events: "b.csv".into()
            }
        );
        assert_eq!(
            SampleSource::parse("s.json").unwrap(),
            SampleSource::Json("s.json".into())
        );
        assert!(SampleSource::parse("s.csv").is_err());
    }

    #[test]
    fn quantile_interpolates() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert!((quantile(&v, 0.5) - 2.5).abs() < 1e-15);
        assert!((quantile(&v, 0.1) - 1.3).abs() < 1e-12);
    }
}
