//! Attention inspection and visit-removal counterfactuals for one patient.
//!
//! Visit indices here are positions within the retained window (the `n_v`
//! most recent visits), oldest first — the same indexing as the rows of the
//! attention matrix.

use std::collections::BTreeSet;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::cohort::{Domain, PatientRecord, Visit};
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Result, StrafeError};
use crate::model::{forward_on_tape, StrafeModel};
use crate::survival::{mean_survival_time, survival_from_q, SurvivalCurve};
use crate::tensor::{Mode, Real};

pub type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMatrix {
    /// `[layer][head]`, each restricted to the real visits.
    pub per_head: Vec<Vec<Matrix>>,
    /// Mean over the heads of the last representation layer. Row `i` is how
    /// visit `i` distributes its attention; the matrix is not symmetric.
    pub aggregate: Matrix,
    /// Elapsed days of each retained visit.
    pub days_before_index: Vec<u32>,
    /// Position in the patient's full visit list of retained visit 0.
    pub first_visit: usize,
}

impl AttentionMatrix {
    pub fn len(&self) -> usize {
        self.aggregate.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aggregate.is_empty()
    }

    /// `(A + Aᵀ) / 2`, an undirected interaction strength.
    pub fn symmetric(&self) -> Matrix {
        let a = &self.aggregate;
        (0..a.len())
            .map(|i| (0..a.len()).map(|j| 0.5 * (a[i][j] + a[j][i])).collect())
            .collect()
    }

    /// The off-diagonal pair `(i, j)`, `i < j`, with the largest symmetric
    /// interaction; the first such pair on ties.
    pub fn top_pair(&self) -> Option<(usize, usize, f64)> {
        let s = self.symmetric();
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                if best.is_none_or(|(_, _, w)| s[i][j] > w) {
                    best = Some((i, j, s[i][j]));
                }
            }
        }
        best
    }
}

/// Runs the model in eval mode and keeps the representation-stage attention
/// weights over the patient's real visits.
pub fn extract_attention<T: Real>(patient: &PatientRecord, model: &StrafeModel<T>, emb: &EmbeddingMatrix) -> Result<AttentionMatrix> {
    if !model.config.variant.contextualized() {
        return Err(StrafeError::UnsupportedVariant(format!(
            "{} has no representation-stage attention to explain",
            model.config.variant
        )));
    }
    let enc = model.encode(patient, emb)?;
    let mut tape = Tape::new();
    let bound = model.params.bind_frozen(&mut tape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let trace = forward_on_tape(&mut tape, &bound, &model.config, &enc, Mode::Eval, &mut rng)?;
    let offset = enc.row_of(0);
    let n = enc.real_visits();
    let per_head: Vec<Vec<Matrix>> = trace
        .attention
        .iter()
        .map(|heads| {
            heads
                .iter()
                .map(|&a| {
                    let a = tape.value(a);
                    (0..n)
                        .map(|i| (0..n).map(|j| a.get2(offset + i, offset + j).as_f64()).collect())
                        .collect()
                })
                .collect()
        })
        .collect();
    let last = per_head.last().expect("at least one representation block");
    let h = last.len() as f64;
    let aggregate = (0..n)
        .map(|i| (0..n).map(|j| last.iter().map(|m| m[i][j]).sum::<f64>() / h).collect())
        .collect();
    Ok(AttentionMatrix {
        per_head,
        aggregate,
        days_before_index: patient.visits[enc.first_visit..].iter().map(|v| v.days_before_index).collect(),
        first_visit: enc.first_visit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub idx: usize,
    pub days_before_index: u32,
    pub domain_tag: Domain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub i: usize,
    pub j: usize,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

/// The most frequent code domain of a visit; ties go to the earlier of
/// condition, procedure, drug.
pub fn dominant_domain(visit: &Visit) -> Domain {
    let count = |d: Domain| visit.codes.iter().filter(|c| c.domain() == d).count();
    [Domain::Condition, Domain::Procedure, Domain::Drug]
        .into_iter()
        .rev()
        .max_by_key(|&d| count(d))
        .expect("three domains")
}

/// Nodes are the retained visits; an undirected edge joins `i < j` when
/// their symmetric interaction exceeds `threshold` (every pair at 0).
pub fn visit_graph_export(attn: &AttentionMatrix, patient: &PatientRecord, threshold: f64) -> Result<VisitGraph> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(StrafeError::Contract(format!("threshold {threshold} outside [0, 1]")));
    }
    let retained = &patient.visits[attn.first_visit..];
    if retained.len() != attn.len() {
        return Err(StrafeError::Contract("attention matrix does not belong to this patient".into()));
    }
    let nodes = retained
        .iter()
        .enumerate()
        .map(|(idx, v)| GraphNode {
            idx,
            days_before_index: v.days_before_index,
            domain_tag: dominant_domain(v),
        })
        .collect();
    let s = attn.symmetric();
    let mut edges = Vec::new();
    for i in 0..s.len() {
        for j in i + 1..s.len() {
            if threshold == 0.0 || s[i][j] > threshold {
                edges.push(GraphEdge { i, j, w: s[i][j] });
            }
        }
    }
    Ok(VisitGraph { nodes, edges })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterfactual {
    pub original: SurvivalCurve,
    pub counterfactual: SurvivalCurve,
    /// `μ(counterfactual) − μ(original)`.
    pub delta_mu: f64,
}

/// Deletes the listed retained visits and re-runs the model; the shorter
/// history is re-padded, so older visits may move into the window.
pub fn counterfactual_remove_visits<T: Real>(
    patient: &PatientRecord,
    remove: &[usize],
    model: &StrafeModel<T>,
    emb: &EmbeddingMatrix,
) -> Result<Counterfactual> {
    let first = patient.visits.len().saturating_sub(model.config.n_v);
    let retained = patient.visits.len() - first;
    let remove: BTreeSet<usize> = remove.iter().copied().collect();
    if let Some(&bad) = remove.iter().find(|&&i| i >= retained) {
        return Err(StrafeError::Contract(format!(
            "visit index {bad} does not exist; the patient has {retained} retained visits"
        )));
    }
    if remove.len() == patient.visits.len() {
        return Err(StrafeError::Contract("cannot remove every visit".into()));
    }
    let mut edited = patient.clone();
    edited.visits = patient
        .visits
        .iter()
        .enumerate()
        .filter(|(k, _)| *k < first || !remove.contains(&(k - first)))
        .map(|(_, v)| v.clone())
        .collect();
    let original = survival_from_q(&model.q_for(&model.encode(patient, emb)?)?);
    let counterfactual = survival_from_q(&model.q_for(&model.encode(&edited, emb)?)?);
    let delta_mu = mean_survival_time(&counterfactual) - mean_survival_time(&original);
    Ok(Counterfactual {
        original,
        counterfactual,
        delta_mu,
    })
}

/// One CSV row per matrix row, no header.
pub fn write_heatmap_csv(mut w: impl Write, m: &Matrix) -> Result<()> {
    for row in m {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

pub fn write_graph_json(w: impl Write, g: &VisitGraph) -> Result<()> {
    serde_json::to_writer_pretty(w, g)?;
    Ok(())
}

pub fn write_counterfactual_csv(mut w: impl Write, cf: &Counterfactual) -> Result<()> {
    writeln!(w, "t,S_original,S_counterfactual")?;
    for (t, (a, b)) in cf.original.values().iter().zip(cf.counterfactual.values()).enumerate() {
        writeln!(w, "{t},{a},{b}")?;
    }
    Ok(())
}
