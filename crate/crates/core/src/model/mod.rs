//! The two-stage attention survival network, its ablation variants, the
//! fixed-time baselines and the training loop.
//!
//! Every patient is run on its own tape; mini-batch gradients are the
//! ordered sum of per-patient gradients, so results do not depend on the
//! number of worker threads.

mod baselines;
mod layers;
mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::cohort::{PatientRecord, SurvivalLabel};
use crate::embeddings::{embed_codes, EmbeddingMatrix};
use crate::error::{Result, StrafeError};
use crate::optim::{Bound, ParamStore};
use crate::survival::{loss_weights, survival_from_q, SurvivalCurve, LOSS_CLAMP};
use crate::tensor::{Mode, Real, Tensor};

pub use baselines::{
    demographics, LogisticFitConfig, LogisticRegression, SardModel,
};
pub use layers::{attention_block, lstm, mlp_probability, temporal_embedding, AttentionOut};
pub use train::{derive_seed, train_strafe, TrainParams, TrainReport};

/// Elapsed-time values above this many days share one temporal embedding
/// when clipping is enabled.
pub const ELAPSED_CLIP_DAYS: u32 = 365;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Strafe,
    StrafeLstm,
    UncontextualizedStrafe,
    UncontextualizedLstm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Strafe,
        Variant::StrafeLstm,
        Variant::UncontextualizedStrafe,
        Variant::UncontextualizedLstm,
    ];

    /// Whether visits attend to each other before the month mapping.
    pub fn contextualized(self) -> bool {
        matches!(self, Variant::Strafe | Variant::StrafeLstm)
    }

    /// Whether the month sequence goes through an LSTM instead of attention.
    pub fn recurrent(self) -> bool {
        matches!(self, Variant::StrafeLstm | Variant::UncontextualizedLstm)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Strafe => "strafe",
            Variant::StrafeLstm => "strafe-lstm",
            Variant::UncontextualizedStrafe => "uncontextualized-strafe",
            Variant::UncontextualizedLstm => "uncontextualized-lstm",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = StrafeError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| StrafeError::UnsupportedVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_e: usize,
    /// Most recent visits retained per patient.
    pub n_v: usize,
    pub heads: usize,
    pub blocks: usize,
    pub dropout: f64,
    pub t_max: u32,
    pub variant: Variant,
    pub seed: u64,
    /// Clip the visit elapsed time at [`ELAPSED_CLIP_DAYS`].
    pub clip_elapsed_days: bool,
}

impl Default for ModelConfig {
    /// Small enough to train on a laptop CPU in seconds.
    fn default() -> Self {
        ModelConfig {
            d_e: 16,
            n_v: 24,
            heads: 2,
            blocks: 1,
            dropout: 0.3,
            t_max: 12,
            variant: Variant::Strafe,
            seed: 1,
            clip_elapsed_days: true,
        }
    }
}

impl ModelConfig {
    /// The hyperparameters of the full-size published setup.
    pub fn full_scale() -> Self {
        ModelConfig {
            d_e: 128,
            n_v: 100,
            heads: 4,
            blocks: 1,
            dropout: 0.3,
            t_max: 48,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StrafeError::Config(m));
        if self.d_e == 0 || self.d_e % 2 != 0 {
            return bad(format!("d_e = {} must be positive and even", self.d_e));
        }
        if self.heads == 0 || self.d_e % self.heads != 0 {
            return bad(format!("d_e = {} is not divisible by heads = {}", self.d_e, self.heads));
        }
        if self.blocks == 0 {
            return bad("blocks must be at least 1".into());
        }
        if self.t_max == 0 {
            return bad("t_max must be at least 1".into());
        }
        if self.n_v < self.t_max as usize {
            return bad(format!("n_v = {} must be at least t_max = {}", self.n_v, self.t_max));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Length of the convolution that maps `n_v` visits onto `t_max` months.
    pub fn kernel_len(&self) -> usize {
        self.n_v - self.t_max as usize + 1
    }
}

/// One patient's visit matrix: left-padded so the real visits occupy the
/// last rows, padded rows all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitEncoding<T> {
    pub x: Tensor<T>,
    /// `true` marks a real visit.
    pub mask: Vec<bool>,
    /// Index into the patient's visit list of the oldest retained visit.
    pub first_visit: usize,
}

impl<T: Real> VisitEncoding<T> {
    pub fn real_visits(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Row of the padded matrix holding the `i`-th retained visit.
    pub fn row_of(&self, i: usize) -> usize {
        self.mask.len() - self.real_visits() + i
    }

    fn row_mask(&self) -> Tensor<T> {
        let d = self.x.cols();
        let data = self
            .mask
            .iter()
            .flat_map(|&m| std::iter::repeat_n(if m { T::one() } else { T::zero() }, d))
            .collect();
        Tensor::matrix(self.mask.len(), d, data).expect("mask shape matches the encoding")
    }
}

/// `ψ(V) = Σ φ(c)` over the visit's codes; unknown codes contribute nothing.
pub fn embed_visit(codes: &[crate::cohort::ConceptCode], emb: &EmbeddingMatrix) -> Vec<f64> {
    embed_codes(codes, emb)
}

fn elapsed(days: u32, config: &ModelConfig) -> f64 {
    if config.clip_elapsed_days {
        days.min(ELAPSED_CLIP_DAYS) as f64
    } else {
        days as f64
    }
}

/// Keeps the `n_v` most recent visits and adds each visit's temporal
/// embedding to its summed code embedding.
pub fn encode_visits<T: Real>(patient: &PatientRecord, emb: &EmbeddingMatrix, config: &ModelConfig) -> Result<VisitEncoding<T>> {
    if emb.dim != config.d_e {
        return Err(StrafeError::Config(format!(
            "embedding dimension {} does not match d_e = {}",
            emb.dim, config.d_e
        )));
    }
    let visits = &patient.visits;
    if visits.is_empty() {
        return Err(StrafeError::DegenerateRow { row: 0 });
    }
    let first_visit = visits.len().saturating_sub(config.n_v);
    let kept = &visits[first_visit..];
    let pad = config.n_v - kept.len();
    let d = config.d_e;
    let mut data = vec![T::zero(); config.n_v * d];
    for (i, v) in kept.iter().enumerate() {
        let psi = embed_visit(&v.codes, emb);
        let tau = temporal_embedding(elapsed(v.days_before_index, config), d)?;
        let row = &mut data[(pad + i) * d..(pad + i + 1) * d];
        for j in 0..d {
            row[j] = T::of(psi[j] + tau[j]);
        }
    }
    let mut mask = vec![false; config.n_v];
    mask[pad..].iter_mut().for_each(|m| *m = true);
    Ok(VisitEncoding {
        x: Tensor::matrix(config.n_v, d, data)?,
        mask,
        first_visit,
    })
}

/// Attention weights of the representation stage, `[block][head]`.
pub type AttentionTrace = Vec<Vec<Var>>;

/// Stage-1 self-attention over visits; padded rows are re-zeroed after
/// every block so they never leak into later computations.
#[allow(clippy::too_many_arguments)]
pub fn contextualize_visits<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    prefix: &str,
    config: &ModelConfig,
    enc: &VisitEncoding<T>,
    x: Var,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, AttentionTrace)> {
    let keep = tape.constant(enc.row_mask())?;
    let mut x = x;
    let mut trace = Vec::with_capacity(config.blocks);
    for l in 0..config.blocks {
        let out = attention_block(
            tape,
            bound,
            &format!("{prefix}.block{l}"),
            x,
            config.heads,
            Some(&enc.mask),
            config.dropout,
            mode,
            rng,
        )?;
        x = tape.mul(out.output, keep)?;
        trace.push(out.weights);
    }
    Ok((x, trace))
}

/// `n_v × d_e → T_max × d_e` by a valid convolution of length `n_v − T_max + 1`.
pub fn visits_to_months<T: Real>(tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
    tape.conv1d_seq(x, bound.get("conv.kernel"), bound.get("conv.bias"))
}

/// Month representations to `q(t)` for `t = 0..=T_max`, as a column.
///
/// The convolution yields `T_max` rows; month `T_max` reuses the last row and
/// is told apart by its temporal embedding.
pub fn predict_q<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    config: &ModelConfig,
    months: Var,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let t_max = config.t_max as usize;
    let rows: Vec<usize> = (0..t_max).chain(std::iter::once(t_max - 1)).collect();
    let z = tape.gather_rows(months, &rows)?;
    let te = month_embeddings::<T>(config)?;
    let te = tape.constant(te)?;
    let mut z = tape.add(z, te)?;
    if config.variant.recurrent() {
        z = lstm(tape, bound, "pred.lstm", z)?;
    } else {
        for l in 0..config.blocks {
            z = attention_block(
                tape,
                bound,
                &format!("pred.block{l}"),
                z,
                config.heads,
                None,
                config.dropout,
                mode,
                rng,
            )?
            .output;
        }
    }
    mlp_probability(tape, bound, "head", z)
}

fn month_embeddings<T: Real>(config: &ModelConfig) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity((config.t_max as usize + 1) * config.d_e);
    for t in 0..=config.t_max {
        data.extend(temporal_embedding(t as f64, config.d_e)?.into_iter().map(T::of));
    }
    Tensor::matrix(config.t_max as usize + 1, config.d_e, data)
}

/// Handles produced by one forward pass.
pub struct ForwardTrace {
    /// `(T_max+1) × 1` column of hazard complements.
    pub q: Var,
    pub attention: AttentionTrace,
}

pub fn forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    config: &ModelConfig,
    enc: &VisitEncoding<T>,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardTrace> {
    let x = tape.constant(enc.x.clone())?;
    let (x, attention) = if config.variant.contextualized() {
        contextualize_visits(tape, bound, "rep", config, enc, x, mode, rng)?
    } else {
        (x, Vec::new())
    };
    let months = visits_to_months(tape, bound, x)?;
    let q = predict_q(tape, bound, config, months, mode, rng)?;
    Ok(ForwardTrace { q, attention })
}

/// The survival negative log-likelihood of one patient, recorded on the tape.
pub fn survival_loss_on_tape<T: Real>(tape: &mut Tape<T>, q: Var, label: SurvivalLabel, t_max: u32) -> Result<Var> {
    let (survived, failed) = loss_weights(label, t_max)?;
    let n = survived.len();
    let s = tape.cumprod_rows(q)?;
    let s = tape.clamp(s, T::of(LOSS_CLAMP), T::of(1.0 - LOSS_CLAMP))?;
    let log_s = tape.log(s)?;
    let one_minus = tape.one_minus(s)?;
    let log_f = tape.log(one_minus)?;
    let ws = tape.constant(Tensor::matrix(n, 1, survived.into_iter().map(T::of).collect())?)?;
    let wf = tape.constant(Tensor::matrix(n, 1, failed.into_iter().map(T::of).collect())?)?;
    let a = tape.mul(log_s, ws)?;
    let b = tape.mul(log_f, wf)?;
    let total = tape.add(a, b)?;
    let total = tape.sum(total)?;
    tape.scale(total, -T::one())
}

/// Model parameters together with the configuration that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct StrafeModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> StrafeModel<T> {
    /// Glorot-initialized weights and zero biases, seeded by `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_e;
        let mut params = ParamStore::new();
        if config.variant.contextualized() {
            for l in 0..config.blocks {
                layers::init_attention(&mut params, &format!("rep.block{l}"), d, &mut rng);
            }
        }
        let k = config.kernel_len();
        params.insert("conv.kernel", Tensor::glorot(&[k, d, d], k * d, d, &mut rng));
        params.insert("conv.bias", Tensor::zeros(&[d]));
        if config.variant.recurrent() {
            layers::init_lstm(&mut params, "pred.lstm", d, &mut rng);
        } else {
            for l in 0..config.blocks {
                layers::init_attention(&mut params, &format!("pred.block{l}"), d, &mut rng);
            }
        }
        layers::init_mlp(&mut params, "head", d, d, &mut rng);
        Ok(StrafeModel { config, params })
    }

    /// Wraps existing parameters after checking they match the configuration.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let reference = StrafeModel::<T>::new(config.clone())?;
        check_same_layout(&reference.params, &params)?;
        Ok(StrafeModel { config, params })
    }

    pub fn cast<U: Real>(&self) -> StrafeModel<U> {
        StrafeModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn encode(&self, patient: &PatientRecord, emb: &EmbeddingMatrix) -> Result<VisitEncoding<T>> {
        encode_visits(patient, emb, &self.config)
    }

    /// Loss and parameter gradients for one encoded patient.
    pub fn example_loss_and_grads(
        &self,
        enc: &VisitEncoding<T>,
        label: SurvivalLabel,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
        patient_loss_and_grads(&self.config, &self.params, enc, label, mode, rng)
    }

    /// Summed loss and gradients over several patients; the dropout stream
    /// of the `i`-th patient is derived from `(seed, i)`.
    pub fn loss_and_grads(
        &self,
        patients: &[&PatientRecord],
        emb: &EmbeddingMatrix,
        mode: Mode,
        seed: u64,
    ) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
        let encoded = patients
            .iter()
            .map(|p| self.encode(p, emb))
            .collect::<Result<Vec<_>>>()?;
        let per_patient = encoded
            .par_iter()
            .zip(patients.par_iter())
            .enumerate()
            .map(|(i, (enc, p))| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, i as u64]));
                self.example_loss_and_grads(enc, p.label, mode, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(train::sum_gradients(per_patient))
    }

    /// Eval-mode hazard complements for one encoded patient.
    pub fn q_for(&self, enc: &VisitEncoding<T>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = forward_on_tape(&mut tape, &bound, &self.config, enc, Mode::Eval, &mut rng)?;
        Ok(tape.value(trace.q).data().iter().map(|v| v.as_f64()).collect())
    }

    /// Eval-mode `q(t)` for `t = 0..=T_max`, one row per patient.
    pub fn forward(&self, patients: &[PatientRecord], emb: &EmbeddingMatrix) -> Result<Vec<Vec<f64>>> {
        patients
            .par_iter()
            .map(|p| self.q_for(&self.encode(p, emb)?))
            .collect()
    }

    pub fn survival_curves(&self, patients: &[PatientRecord], emb: &EmbeddingMatrix) -> Result<Vec<SurvivalCurve>> {
        Ok(self
            .forward(patients, emb)?
            .iter()
            .map(|q| survival_from_q(q))
            .collect())
    }
}

pub(crate) fn patient_loss_and_grads<T: Real>(
    config: &ModelConfig,
    params: &ParamStore<T>,
    enc: &VisitEncoding<T>,
    label: SurvivalLabel,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let trace = forward_on_tape(&mut tape, &bound, config, enc, mode, rng)?;
    let loss = survival_loss_on_tape(&mut tape, trace.q, label, config.t_max)?;
    let value = tape.value(loss).data()[0].as_f64();
    let grads = tape.backward(loss)?;
    Ok((value, ParamStore::collect_grads(&bound, &grads)))
}

pub(crate) fn check_same_layout<T: Real>(expected: &ParamStore<T>, actual: &ParamStore<T>) -> Result<()> {
    for (name, p) in expected.iter() {
        match actual.get(name) {
            None => return Err(StrafeError::Checkpoint(format!("missing parameter `{name}`"))),
            Some(q) if q.value.shape() != p.value.shape() => {
                return Err(StrafeError::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    q.value.shape(),
                    p.value.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = actual.names().find(|n| expected.get(n).is_none()) {
        return Err(StrafeError::Checkpoint(format!("unexpected parameter `{extra}`")));
    }
    Ok(())
}
