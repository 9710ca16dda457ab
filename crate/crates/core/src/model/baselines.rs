//! Fixed-time baselines: a SARD-style attention classifier and logistic
//! regression. Both predict the probability of an event by a horizon `T_R`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::{derive_seed, run_epochs, TrainParams, TrainReport};
use super::{contextualize_visits, encode_visits, layers, ModelConfig, VisitEncoding};
use crate::autodiff::{Tape, Var};
use crate::cohort::{PatientRecord, Sex};
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Result, StrafeError};
use crate::optim::{adam_step, AdamConfig, Bound, ParamStore};
use crate::survival::LOSS_CLAMP;
use crate::tensor::{Mode, Real, Tensor};

/// `[age / 100, 1 if male else 0]`.
pub fn demographics(patient: &PatientRecord) -> [f64; 2] {
    [patient.age as f64 / 100.0, if patient.sex == Sex::Male { 1.0 } else { 0.0 }]
}

fn bce_on_tape<T: Real>(tape: &mut Tape<T>, p: Var, positive: bool) -> Result<Var> {
    let p = tape.clamp(p, T::of(LOSS_CLAMP), T::of(1.0 - LOSS_CLAMP))?;
    let p = if positive { p } else { tape.one_minus(p)? };
    let l = tape.log(p)?;
    let l = tape.sum(l)?;
    tape.scale(l, -T::one())
}

/// Self-attention over visits, mean-pooled over the real visits, joined with
/// demographics and mapped to a probability by a small MLP. The
/// representation stage uses the same hyperparameters as the survival model.
#[derive(Debug, Clone, PartialEq)]
pub struct SardModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> SardModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, 0x5341_5244]));
        let d = config.d_e;
        let mut params = ParamStore::new();
        for l in 0..config.blocks {
            layers::init_attention(&mut params, &format!("sard.block{l}"), d, &mut rng);
        }
        layers::init_mlp(&mut params, "sard.head", d + 2, d, &mut rng);
        Ok(SardModel { config, params })
    }

    fn probability_on_tape(
        config: &ModelConfig,
        tape: &mut Tape<T>,
        bound: &Bound,
        enc: &VisitEncoding<T>,
        demo: [f64; 2],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let x = tape.constant(enc.x.clone())?;
        let (x, _) = contextualize_visits(tape, bound, "sard", config, enc, x, mode, rng)?;
        let inv = T::of(1.0 / enc.real_visits() as f64);
        let pool: Vec<T> = enc.mask.iter().map(|&m| if m { inv } else { T::zero() }).collect();
        let pool = tape.constant(Tensor::matrix(1, enc.mask.len(), pool)?)?;
        let pooled = tape.matmul(pool, x)?;
        let demo = tape.constant(Tensor::matrix(1, 2, vec![T::of(demo[0]), T::of(demo[1])])?)?;
        let joined = tape.concat_cols(&[pooled, demo])?;
        layers::mlp_probability(tape, bound, "sard.head", joined)
    }

    pub(crate) fn example(
        config: &ModelConfig,
        params: &ParamStore<T>,
        enc: &VisitEncoding<T>,
        demo: [f64; 2],
        positive: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape)?;
        let p = Self::probability_on_tape(config, &mut tape, &bound, enc, demo, Mode::Train, rng)?;
        let loss = bce_on_tape(&mut tape, p, positive)?;
        let value = tape.value(loss).data()[0].as_f64();
        let grads = tape.backward(loss)?;
        Ok((value, ParamStore::collect_grads(&bound, &grads)))
    }

    /// Trains with binary cross-entropy on a fixed-time cohort.
    pub fn fit(&mut self, patients: &[PatientRecord], labels: &[bool], emb: &EmbeddingMatrix, tp: &TrainParams) -> Result<TrainReport> {
        if patients.len() != labels.len() {
            return Err(StrafeError::Contract("patients and labels differ in length".into()));
        }
        let encoded: Vec<VisitEncoding<T>> = patients
            .par_iter()
            .map(|p| encode_visits(p, emb, &self.config))
            .collect::<Result<_>>()?;
        let demo: Vec<[f64; 2]> = patients.iter().map(demographics).collect();
        let seed = derive_seed(&[self.config.seed, 0x5341_5244, 1]);
        let config = self.config.clone();
        run_epochs(&mut self.params, patients.len(), tp, seed, |params, i, rng| {
            Self::example(&config, params, &encoded[i], demo[i], labels[i], rng)
        })
    }

    /// Eval-mode event probability for every patient.
    pub fn predict(&self, patients: &[PatientRecord], emb: &EmbeddingMatrix) -> Result<Vec<f64>> {
        patients
            .par_iter()
            .map(|p| {
                let enc = encode_visits::<T>(p, emb, &self.config)?;
                let mut tape = Tape::new();
                let bound = self.params.bind_frozen(&mut tape)?;
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let prob = Self::probability_on_tape(&self.config, &mut tape, &bound, &enc, demographics(p), Mode::Eval, &mut rng)?;
                Ok(tape.value(prob).data()[0].as_f64())
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogisticFitConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Ridge penalty on the weights of the standardized features.
    pub l2: f64,
}

impl Default for LogisticFitConfig {
    fn default() -> Self {
        LogisticFitConfig {
            lr: 0.05,
            epochs: 300,
            l2: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegression {
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LogisticRegression {
    pub fn zeros(dim: usize) -> Self {
        LogisticRegression {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    /// `sigmoid(w·x + b)`.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(StrafeError::Contract(format!(
                "feature length {} does not match {} weights",
                x.len(),
                self.weights.len()
            )));
        }
        Ok(sigmoid(self.bias + x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()))
    }

    /// Full-batch Adam on the mean binary cross-entropy. Features are
    /// standardized internally and the fitted weights mapped back, so
    /// [`predict`](Self::predict) takes raw features.
    pub fn fit(features: &[Vec<f64>], labels: &[bool], cfg: &LogisticFitConfig) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(StrafeError::Contract(format!(
                "{} feature rows for {} labels",
                features.len(),
                labels.len()
            )));
        }
        let dim = features[0].len();
        if let Some(row) = features.iter().find(|r| r.len() != dim) {
            return Err(StrafeError::Contract(format!("feature rows of length {dim} and {}", row.len())));
        }
        let n = features.len() as f64;
        let mean: Vec<f64> = (0..dim).map(|j| features.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..dim)
            .map(|j| {
                let var = features.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let z: Vec<Vec<f64>> = features
            .iter()
            .map(|r| r.iter().enumerate().map(|(j, v)| (v - mean[j]) / scale[j]).collect())
            .collect();

        let mut params = ParamStore::<f64>::new();
        params.insert("w", Tensor::zeros(&[dim.max(1)]));
        params.insert("b", Tensor::zeros(&[1]));
        let adam = AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        };
        for _ in 0..cfg.epochs {
            let (_, gw, gb) = logistic_loss_and_grad(params.value("w").data(), params.value("b").data()[0], &z, labels, cfg.l2);
            params.zero_grad();
            params.get_mut("w").unwrap().accumulate(&Tensor::from_vec(vec![dim.max(1)], pad(gw, dim))?)?;
            params.get_mut("b").unwrap().accumulate(&Tensor::scalar(gb))?;
            adam_step(&mut params, &adam)?;
        }
        let w = &params.value("w").data()[..dim];
        let b = params.value("b").data()[0];
        let weights: Vec<f64> = w.iter().zip(&scale).map(|(wi, s)| wi / s).collect();
        let bias = b - weights.iter().zip(&mean).map(|(wi, m)| wi * m).sum::<f64>();
        Ok(LogisticRegression { weights, bias })
    }
}

fn pad(mut v: Vec<f64>, dim: usize) -> Vec<f64> {
    v.resize(dim.max(1), 0.0);
    v
}

/// Mean cross-entropy plus `l2/2 ‖w‖²`, and its gradient.
pub(crate) fn logistic_loss_and_grad(w: &[f64], b: f64, x: &[Vec<f64>], y: &[bool], l2: f64) -> (f64, Vec<f64>, f64) {
    let n = x.len() as f64;
    let dim = x[0].len();
    let mut gw = vec![0.0; dim];
    let mut gb = 0.0;
    let mut loss = 0.0;
    for (row, &label) in x.iter().zip(y) {
        let p = sigmoid(b + row.iter().zip(w).map(|(a, c)| a * c).sum::<f64>());
        let p_c = p.clamp(LOSS_CLAMP, 1.0 - LOSS_CLAMP);
        loss -= if label { p_c.ln() } else { (1.0 - p_c).ln() };
        let r = p - if label { 1.0 } else { 0.0 };
        for j in 0..dim {
            gw[j] += r * row[j] / n;
        }
        gb += r / n;
    }
    loss /= n;
    for j in 0..dim {
        loss += 0.5 * l2 * w[j] * w[j];
        gw[j] += l2 * w[j];
    }
    (loss, gw, gb)
}
