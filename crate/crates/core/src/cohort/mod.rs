//! Visit-sequence cohorts: the record types, JSON-lines persistence, time
//! discretization, stratified splitting and fixed-time filtering.

mod synthetic;

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StrafeError};

pub use synthetic::{
    expected_event_fraction, generate_synthetic_cohort, oracle_survival, PatientTruth, SyntheticConfig,
    SyntheticGroundTruth,
};

pub const SCHEMA_V1: &str = "strafe-cohort-v1";
pub const DAYS_PER_MONTH: u32 = 30;

/// Vocabulary slot a code belongs to. Encoded in the code string as a
/// `cond:`, `proc:` or `drug:` prefix; unprefixed codes are conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Condition,
    Procedure,
    Drug,
}

impl Domain {
    pub fn prefix(self) -> &'static str {
        match self {
            Domain::Condition => "cond",
            Domain::Procedure => "proc",
            Domain::Drug => "drug",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ConceptCode {
    id: String,
    domain: Domain,
}

impl ConceptCode {
    pub fn parse(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(StrafeError::Contract("empty concept code".into()));
        }
        let domain = match id.split_once(':').map(|(p, _)| p) {
            Some("proc") => Domain::Procedure,
            Some("drug") => Domain::Drug,
            _ => Domain::Condition,
        };
        Ok(ConceptCode { id, domain })
    }

    pub fn as_str(&self) -> &str {
        &self.id
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }
}

impl TryFrom<String> for ConceptCode {
    type Error = StrafeError;

    fn try_from(s: String) -> Result<Self> {
        ConceptCode::parse(s)
    }
}

impl From<ConceptCode> for String {
    fn from(c: ConceptCode) -> String {
        c.id
    }
}

impl fmt::Display for ConceptCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visit {
    pub days_before_index: u32,
    pub codes: Vec<ConceptCode>,
}

impl Visit {
    /// Builds a visit, dropping repeated codes (first occurrence wins).
    pub fn new(days_before_index: u32, codes: impl IntoIterator<Item = ConceptCode>) -> Self {
        let mut seen = HashSet::new();
        let codes = codes.into_iter().filter(|c| seen.insert(c.clone())).collect();
        Visit { days_before_index, codes }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    #[serde(rename = "M")]
    Male,
    #[serde(rename = "F")]
    Female,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurvivalLabel {
    pub duration_months: u32,
    /// `true` when the event was observed, `false` when right-censored.
    pub event: bool,
}

impl SurvivalLabel {
    pub fn event(duration_months: u32) -> Self {
        SurvivalLabel { duration_months, event: true }
    }

    pub fn censored(duration_months: u32) -> Self {
        SurvivalLabel { duration_months, event: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub age: u32,
    pub sex: Sex,
    /// Oldest first (decreasing `days_before_index`).
    pub visits: Vec<Visit>,
    pub label: SurvivalLabel,
}

impl PatientRecord {
    /// Checks the record invariants, reporting the offending field.
    pub fn validate(&self, t_max: u32) -> std::result::Result<(), (String, String)> {
        if self.id.is_empty() {
            return Err(("id".into(), "must be non-empty".into()));
        }
        if self.visits.is_empty() {
            return Err(("visits".into(), "at least one visit is required".into()));
        }
        for (j, v) in self.visits.iter().enumerate() {
            if v.codes.is_empty() {
                return Err((format!("visits[{j}].codes"), "must be non-empty".into()));
            }
            let mut seen = HashSet::new();
            if let Some(dup) = v.codes.iter().find(|c| !seen.insert(*c)) {
                return Err((format!("visits[{j}].codes"), format!("duplicate code `{dup}`")));
            }
        }
        if let Some(j) = self
            .visits
            .windows(2)
            .position(|w| w[1].days_before_index > w[0].days_before_index)
        {
            return Err((
                format!("visits[{}].days_before_index", j + 1),
                "visits must be ordered oldest first".into(),
            ));
        }
        if self.label.duration_months > t_max {
            return Err((
                "label.duration_months".into(),
                format!("{} exceeds horizon {t_max}", self.label.duration_months),
            ));
        }
        if !self.label.event && self.label.duration_months == 0 {
            return Err(("label.duration_months".into(), "censored at month 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Cohort {
    pub patients: Vec<PatientRecord>,
}

impl Cohort {
    pub fn new(patients: Vec<PatientRecord>) -> Self {
        Cohort { patients }
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn events(&self) -> usize {
        self.patients.iter().filter(|p| p.label.event).count()
    }

    pub fn event_rate(&self) -> f64 {
        self.events() as f64 / self.len().max(1) as f64
    }

    pub fn get(&self, id: &str) -> Option<&PatientRecord> {
        self.patients.iter().find(|p| p.id == id)
    }

    pub fn labels(&self) -> Vec<SurvivalLabel> {
        self.patients.iter().map(|p| p.label).collect()
    }
}

/// Result of reading a cohort file: accepted records plus everything that
/// was rejected, with line numbers.
#[derive(Debug, Default)]
pub struct LoadedCohort {
    pub cohort: Cohort,
    pub rejected: Vec<StrafeError>,
    pub warnings: Vec<String>,
}

impl LoadedCohort {
    /// Fails on the first rejected record.
    pub fn strict(mut self) -> Result<Cohort> {
        if self.rejected.is_empty() {
            Ok(self.cohort)
        } else {
            Err(self.rejected.swap_remove(0))
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
}

pub fn read_cohort(reader: impl BufRead, t_max: u32) -> Result<LoadedCohort> {
    let mut out = LoadedCohort::default();
    let mut lines = reader.lines().enumerate();
    match lines.next() {
        None => {
            out.warnings.push("empty cohort file".into());
            return Ok(out);
        }
        Some((_, line)) => {
            let line = line?;
            let header: Header = serde_json::from_str(&line).map_err(|e| StrafeError::Parse {
                line: 1,
                detail: format!("missing schema header: {e}"),
            })?;
            if header.schema != SCHEMA_V1 {
                return Err(StrafeError::Parse {
                    line: 1,
                    detail: format!("unsupported schema `{}`", header.schema),
                });
            }
        }
    }
    for (i, line) in lines {
        let line = line?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: PatientRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                out.rejected.push(StrafeError::Parse {
                    line: line_no,
                    detail: e.to_string(),
                });
                continue;
            }
        };
        match record.validate(t_max) {
            Ok(()) => out.cohort.patients.push(record),
            Err((field, detail)) => out.rejected.push(StrafeError::Validation {
                line: line_no,
                field,
                detail,
            }),
        }
    }
    if out.cohort.is_empty() {
        out.warnings.push("cohort has no valid records".into());
    }
    Ok(out)
}

pub fn load_cohort(path: impl AsRef<Path>, t_max: u32) -> Result<LoadedCohort> {
    let file = std::fs::File::open(path)?;
    read_cohort(BufReader::new(file), t_max)
}

pub fn write_cohort(mut writer: impl Write, cohort: &Cohort) -> Result<()> {
    serde_json::to_writer(&mut writer, &Header { schema: SCHEMA_V1.into() })?;
    writer.write_all(b"\n")?;
    for p in &cohort.patients {
        serde_json::to_writer(&mut writer, p)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_cohort(path: impl AsRef<Path>, cohort: &Cohort) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_cohort(&mut w, cohort)?;
    w.flush()?;
    Ok(())
}

/// Month bin of an elapsed day count (30-day months).
pub fn discretize_time(days: i64) -> Result<u32> {
    if days < 0 {
        return Err(StrafeError::Contract(format!("negative day count {days}")));
    }
    u32::try_from(days / DAYS_PER_MONTH as i64).map_err(|_| StrafeError::Contract(format!("day count {days} too large")))
}

/// Whether a day count lies past month `t_max`; such events are recoded as
/// censored at `t_max`.
pub fn beyond_horizon(days: u32, t_max: u32) -> bool {
    days >= DAYS_PER_MONTH * (t_max + 1)
}

/// Stratified split: events and non-events are shuffled separately and the
/// same fraction of each goes to the training side. Both halves keep the
/// original cohort order.
pub fn split_train_test(cohort: &Cohort, ratio: f64, seed: u64) -> Result<(Cohort, Cohort)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(StrafeError::Parameter {
            name: "ratio",
            detail: format!("{ratio} not in (0, 1)"),
        });
    }
    if cohort.len() < 2 {
        return Err(StrafeError::Size(format!("cannot split a cohort of {}", cohort.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; cohort.len()];
    for stratum in [true, false] {
        let mut idx: Vec<usize> = (0..cohort.len())
            .filter(|&i| cohort.patients[i].label.event == stratum)
            .collect();
        idx.shuffle(&mut rng);
        let take = (ratio * idx.len() as f64).round() as usize;
        for &i in &idx[..take] {
            in_train[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (p, t) in cohort.patients.iter().zip(in_train) {
        if t {
            train.push(p.clone());
        } else {
            test.push(p.clone());
        }
    }
    Ok((Cohort::new(train), Cohort::new(test)))
}

/// Binary outcome at horizon `t_r`, or `None` when the patient was censored
/// before `t_r` and the outcome is unknown.
pub fn fixed_time_label(label: SurvivalLabel, t_r: u32) -> Option<bool> {
    if label.event && label.duration_months <= t_r {
        Some(true)
    } else if label.duration_months >= t_r {
        Some(false)
    } else {
        None
    }
}

/// Patients whose outcome at `t_r` is known, with that outcome.
pub fn filter_fixed_time_cohort(cohort: &Cohort, t_r: u32) -> (Cohort, Vec<bool>) {
    let mut kept = Vec::new();
    let mut labels = Vec::new();
    for p in &cohort.patients {
        if let Some(y) = fixed_time_label(p.label, t_r) {
            kept.push(p.clone());
            labels.push(y);
        }
    }
    (Cohort::new(kept), labels)
}
