//! Mini-batch training shared by the survival model and the baselines.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{patient_loss_and_grads, ModelConfig, StrafeModel, VisitEncoding};
use crate::cohort::Cohort;
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Result, StrafeError};
use crate::optim::{adam_step, AdamConfig, ParamStore};
use crate::tensor::{Mode, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainParams {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            batch_size: 256,
            lr: 2e-3,
            epochs: 10,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(StrafeError::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(StrafeError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-example loss of every epoch, measured while training.
    pub epoch_loss: Vec<f64>,
}

/// SplitMix64 over a sequence of words; used to give every (epoch, batch,
/// example) its own independent random stream.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut z = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Adds per-example results in order, so the sum is independent of how the
/// examples were scheduled.
pub(crate) fn sum_gradients<T: Real>(parts: Vec<(f64, BTreeMap<String, Tensor<T>>)>) -> (f64, BTreeMap<String, Tensor<T>>) {
    let mut total = 0.0;
    let mut acc: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for (loss, grads) in parts {
        total += loss;
        for (name, g) in grads {
            match acc.get_mut(&name) {
                Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, &y)| *x = *x + y),
                None => {
                    acc.insert(name, g);
                }
            }
        }
    }
    (total, acc)
}

/// Runs `epochs` passes of shuffled mini-batch Adam. `example` returns the
/// loss and gradients of one training example given the current parameters
/// and that example's random stream.
pub(crate) fn run_epochs<T, F>(
    params: &mut ParamStore<T>,
    n_examples: usize,
    tp: &TrainParams,
    seed: u64,
    example: F,
) -> Result<TrainReport>
where
    T: Real,
    F: Fn(&ParamStore<T>, usize, &mut ChaCha8Rng) -> Result<(f64, BTreeMap<String, Tensor<T>>)> + Sync,
{
    tp.validate()?;
    if n_examples == 0 && tp.epochs > 0 {
        return Err(StrafeError::Size("cannot train on an empty cohort".into()));
    }
    let adam = AdamConfig {
        lr: tp.lr,
        ..AdamConfig::default()
    };
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..n_examples).collect();
    for epoch in 0..tp.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch as u64])));
        let mut epoch_total = 0.0;
        for (batch, idx) in order.chunks(tp.batch_size).enumerate() {
            let diverged = || StrafeError::Divergence { epoch, batch };
            let snapshot: &ParamStore<T> = params;
            let parts = idx
                .par_iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch as u64, batch as u64, i as u64]));
                    example(snapshot, i, &mut rng)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    StrafeError::NonFinite { .. } => diverged(),
                    other => other,
                })?;
            let (loss, grads) = sum_gradients(parts);
            if !loss.is_finite() {
                return Err(diverged());
            }
            epoch_total += loss;
            params.zero_grad();
            for (name, g) in grads {
                params
                    .get_mut(&name)
                    .expect("gradients only exist for stored parameters")
                    .accumulate(&g)?;
            }
            adam_step(params, &adam).map_err(|_| diverged())?;
        }
        report.epoch_loss.push(epoch_total / n_examples as f64);
    }
    Ok(report)
}

impl<T: Real> StrafeModel<T> {
    /// Continues training from the current parameters.
    pub fn fit(&mut self, train: &Cohort, emb: &EmbeddingMatrix, tp: &TrainParams) -> Result<TrainReport> {
        for p in &train.patients {
            if p.label.duration_months > self.config.t_max {
                return Err(StrafeError::Contract(format!(
                    "patient {} has duration {} beyond t_max {}",
                    p.id, p.label.duration_months, self.config.t_max
                )));
            }
        }
        let encoded: Vec<VisitEncoding<T>> = train
            .patients
            .par_iter()
            .map(|p| self.encode(p, emb))
            .collect::<Result<_>>()?;
        let config = self.config.clone();
        let labels: Vec<_> = train.patients.iter().map(|p| p.label).collect();
        let seed = derive_seed(&[config.seed, 0x7261_696e]);
        run_epochs(&mut self.params, encoded.len(), tp, seed, |params, i, rng| {
            patient_loss_and_grads(&config, params, &encoded[i], labels[i], Mode::Train, rng)
        })
    }
}

/// Initializes a model from `config` and trains it on `train`.
pub fn train_strafe(
    train: &Cohort,
    emb: &EmbeddingMatrix,
    config: ModelConfig,
    tp: &TrainParams,
) -> Result<(StrafeModel<f32>, TrainReport)> {
    let mut model = StrafeModel::new(config)?;
    let report = model.fit(train, emb, tp)?;
    Ok((model, report))
}
