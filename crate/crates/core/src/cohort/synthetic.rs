//! Synthetic cohorts whose discrete hazards are known exactly.
//!
//! Concepts are grouped into clusters; each patient has a primary cluster
//! from which most of their codes are drawn (Zipf-distributed within the
//! cluster). A concept's hazard weight is the sum of a cluster effect and an
//! idiosyncratic term, so marginally every weight is `Normal(0, weight_scale)`.
//! The monthly hazard is
//!
//! `λ*(t) = sigmoid(base_hazard_logit + Σ_{visits} Σ_{codes} w_c + 0.02·t)`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal, Poisson, Zipf};
use serde::{Deserialize, Serialize};

use super::{Cohort, ConceptCode, Domain, PatientRecord, Sex, SurvivalLabel, Visit};
use crate::error::{Result, StrafeError};
use crate::survival::SurvivalCurve;

pub const TIME_TREND: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_patients: usize,
    pub vocab_size: usize,
    pub t_max: u32,
    pub base_hazard_logit: f64,
    pub weight_scale: f64,
    /// Fraction of patients subject to random (non-administrative) censoring.
    pub censor_rate: f64,
    pub seed: u64,
    pub mean_visits: f64,
    pub mean_codes_per_visit: f64,
    pub n_clusters: usize,
    /// Probability that a code comes from the patient's primary cluster.
    pub cluster_affinity: f64,
    pub history_days: u32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_patients: 5000,
            vocab_size: 200,
            t_max: 12,
            base_hazard_logit: -6.0,
            weight_scale: 0.3,
            censor_rate: 0.3,
            seed: 42,
            mean_visits: 12.0,
            mean_codes_per_visit: 2.5,
            n_clusters: 8,
            cluster_affinity: 0.75,
            history_days: 1095,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, detail: String| Err(StrafeError::Parameter { name, detail });
        if self.n_patients == 0 {
            return bad("n_patients", "must be positive".into());
        }
        if self.vocab_size < 10 {
            return bad("vocab_size", format!("{} < 10", self.vocab_size));
        }
        if self.t_max == 0 {
            return bad("t_max", "must be at least 1".into());
        }
        if !self.base_hazard_logit.is_finite() {
            return bad("base_hazard_logit", "must be finite".into());
        }
        if !(self.weight_scale >= 0.0 && self.weight_scale.is_finite()) {
            return bad("weight_scale", format!("{} is not a non-negative number", self.weight_scale));
        }
        if !(0.0..=1.0).contains(&self.censor_rate) {
            return bad("censor_rate", format!("{} not in [0, 1]", self.censor_rate));
        }
        if !(self.mean_visits >= 1.0) {
            return bad("mean_visits", "must be at least 1".into());
        }
        if !(self.mean_codes_per_visit >= 1.0) {
            return bad("mean_codes_per_visit", "must be at least 1".into());
        }
        if self.n_clusters == 0 || self.n_clusters > self.vocab_size {
            return bad("n_clusters", format!("{} not in [1, vocab_size]", self.n_clusters));
        }
        if !(0.0..=1.0).contains(&self.cluster_affinity) {
            return bad("cluster_affinity", "must be a probability".into());
        }
        if self.history_days == 0 {
            return bad("history_days", "must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub linear_predictor: f64,
    /// `λ*(t)` for `t = 0..=T_max`.
    pub hazard: Vec<f64>,
    /// `S*(t) = Π_{τ≤t} (1 − λ*(τ))`.
    pub survival: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGroundTruth {
    pub config: SyntheticConfig,
    pub concept_weights: BTreeMap<String, f64>,
    pub patients: BTreeMap<String, PatientTruth>,
}

impl SyntheticGroundTruth {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn concept_name(j: usize) -> String {
    let domain = match j % 3 {
        0 => Domain::Condition,
        1 => Domain::Procedure,
        _ => Domain::Drug,
    };
    format!("{}:{j:04}", domain.prefix())
}

/// Analytic hazard curve for a linear predictor.
pub(crate) fn hazard_curve(base_logit: f64, linear_predictor: f64, t_max: u32) -> Vec<f64> {
    (0..=t_max)
        .map(|t| sigmoid(base_logit + linear_predictor + TIME_TREND * t as f64))
        .collect()
}

pub fn generate_synthetic_cohort(config: &SyntheticConfig) -> Result<(Cohort, SyntheticGroundTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k = config.n_clusters;
    let v = config.vocab_size;

    let codes: Vec<ConceptCode> = (0..v)
        .map(|j| ConceptCode::parse(concept_name(j)).expect("non-empty"))
        .collect();
    let members: Vec<Vec<usize>> = (0..k).map(|c| (c..v).step_by(k).collect()).collect();

    let shared = (0.8f64).sqrt() * config.weight_scale;
    let own = (0.2f64).sqrt() * config.weight_scale;
    // Evenly spaced effects with variance `shared²`, randomly assigned to
    // clusters: keeps the cohort-level risk spread stable across seeds.
    let spread = if k > 1 { shared * (3.0 * (k * k) as f64 / (k * k - 1) as f64).sqrt() } else { 0.0 };
    let mut cluster_effect: Vec<f64> = (0..k).map(|c| spread * (2.0 * (c as f64 + 0.5) / k as f64 - 1.0)).collect();
    cluster_effect.shuffle(&mut rng);
    let weights: Vec<f64> = (0..v).map(|j| cluster_effect[j % k] + gaussian(&mut rng, own)).collect();

    let global_zipf = Zipf::new(v as f64, 1.1).expect("valid zipf");
    let cluster_zipf: Vec<Zipf<f64>> = members
        .iter()
        .map(|m| Zipf::new(m.len() as f64, 1.1).expect("valid zipf"))
        .collect();
    let extra_visits = Geometric::new(1.0 / config.mean_visits).expect("p in (0, 1]");
    let extra_codes = Poisson::new(config.mean_codes_per_visit - 1.0).ok();

    let mut patients = Vec::with_capacity(config.n_patients);
    let mut truth = BTreeMap::new();
    for i in 0..config.n_patients {
        let id = format!("P{i:06}");
        let primary = rng.random_range(0..k);
        let n_visits = 1 + extra_visits.sample(&mut rng) as usize;
        let mut days: Vec<u32> = (0..n_visits).map(|_| rng.random_range(0..config.history_days)).collect();
        days.sort_unstable_by(|a, b| b.cmp(a));

        let mut lp = 0.0;
        let mut visits = Vec::with_capacity(n_visits);
        for d in days {
            let n_codes = 1 + extra_codes.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
            let picks = (0..n_codes).map(|_| {
                if rng.random::<f64>() < config.cluster_affinity {
                    members[primary][cluster_zipf[primary].sample(&mut rng) as usize - 1]
                } else {
                    global_zipf.sample(&mut rng) as usize - 1
                }
            });
            let mut unique: Vec<usize> = Vec::with_capacity(n_codes);
            for j in picks {
                if !unique.contains(&j) {
                    unique.push(j);
                }
            }
            lp += unique.iter().map(|&j| weights[j]).sum::<f64>();
            visits.push(Visit::new(d, unique.iter().map(|&j| codes[j].clone())));
        }

        let hazard = hazard_curve(config.base_hazard_logit, lp, config.t_max);
        let event_month = hazard.iter().position(|&h| rng.random::<f64>() < h);
        let censor_month = if rng.random::<f64>() < config.censor_rate {
            rng.random_range(1..=config.t_max)
        } else {
            config.t_max
        };
        let label = match event_month {
            Some(e) if e as u32 <= censor_month => SurvivalLabel::event(e as u32),
            _ => SurvivalLabel::censored(censor_month),
        };
        let age = rng.random_range(40..90);
        let sex = if rng.random::<bool>() { Sex::Male } else { Sex::Female };

        let survival = survival_from_hazard(&hazard).0;
        truth.insert(
            id.clone(),
            PatientTruth {
                linear_predictor: lp,
                hazard,
                survival,
            },
        );
        patients.push(PatientRecord {
            id,
            age,
            sex,
            visits,
            label,
        });
    }

    let concept_weights = codes
        .iter()
        .zip(&weights)
        .map(|(c, &w)| (c.as_str().to_string(), w))
        .collect();
    Ok((
        Cohort::new(patients),
        SyntheticGroundTruth {
            config: config.clone(),
            concept_weights,
            patients: truth,
        },
    ))
}

fn gaussian(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    if sd == 0.0 {
        0.0
    } else {
        Normal::new(0.0, sd).expect("finite sd").sample(rng)
    }
}

fn survival_from_hazard(hazard: &[f64]) -> SurvivalCurve {
    let mut running = 1.0;
    SurvivalCurve(
        hazard
            .iter()
            .map(|h| {
                running *= 1.0 - h;
                running
            })
            .collect(),
    )
}

/// The analytic survival curve of one synthetic patient.
pub fn oracle_survival(truth: &SyntheticGroundTruth, patient_id: &str) -> Result<SurvivalCurve> {
    truth
        .patients
        .get(patient_id)
        .map(|p| survival_from_hazard(&p.hazard))
        .ok_or_else(|| StrafeError::UnknownPatient(patient_id.to_string()))
}

/// Probability that a patient's event is observed, averaged over the cohort:
/// `Σ_c P(C = c) · (1 − S*(c))`.
pub fn expected_event_fraction(truth: &SyntheticGroundTruth) -> f64 {
    let cfg = &truth.config;
    let t_max = cfg.t_max as usize;
    let per_month = cfg.censor_rate / cfg.t_max as f64;
    let total: f64 = truth
        .patients
        .values()
        .map(|p| {
            let random: f64 = (1..=t_max).map(|c| per_month * (1.0 - p.survival[c])).sum();
            random + (1.0 - cfg.censor_rate) * (1.0 - p.survival[t_max])
        })
        .sum();
    total / truth.patients.len() as f64
}
