//! Evaluation metrics: concordance, MAE, ROC AUC, bootstrap comparison and
//! decile tables.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::SurvivalLabel;
use crate::error::{Result, StrafeError};
use crate::model::derive_seed;
use crate::survival::{mean_survival_time, SurvivalCurve};

/// Predictions aligned with the observed outcomes of the same patients.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    /// Empty when only predicted times are known.
    pub curves: Vec<SurvivalCurve>,
    /// Predicted survival time `T̂` in months.
    pub predicted_time: Vec<f64>,
    pub labels: Vec<SurvivalLabel>,
}

impl PredictionSet {
    pub fn from_curves(curves: Vec<SurvivalCurve>, labels: Vec<SurvivalLabel>) -> Result<Self> {
        let predicted_time = curves.iter().map(mean_survival_time).collect();
        let set = PredictionSet {
            curves,
            predicted_time,
            labels,
        };
        set.check()?;
        Ok(set)
    }

    pub fn from_times(predicted_time: Vec<f64>, labels: Vec<SurvivalLabel>) -> Result<Self> {
        let set = PredictionSet {
            curves: Vec::new(),
            predicted_time,
            labels,
        };
        set.check()?;
        Ok(set)
    }

    fn check(&self) -> Result<()> {
        if self.predicted_time.len() != self.labels.len() || (!self.curves.is_empty() && self.curves.len() != self.labels.len()) {
            return Err(StrafeError::Contract("prediction set columns differ in length".into()));
        }
        if self.predicted_time.iter().any(|t| !t.is_finite()) {
            return Err(StrafeError::NonFinite { op: "predicted time" });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The rows `idx` (repeats allowed), for resampling.
    pub fn select(&self, idx: &[usize]) -> PredictionSet {
        PredictionSet {
            curves: if self.curves.is_empty() {
                Vec::new()
            } else {
                idx.iter().map(|&i| self.curves[i].clone()).collect()
            },
            predicted_time: idx.iter().map(|&i| self.predicted_time[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Dense 0-based ranks of the distinct values (equal values share a rank).
fn dense_ranks(values: &[f64]) -> (Vec<usize>, usize) {
    // `+ 0.0` folds −0 into +0 so `total_cmp` agrees with `==`.
    let values: Vec<f64> = values.iter().map(|v| v + 0.0).collect();
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let ranks = values
        .iter()
        .map(|v| sorted.binary_search_by(|p| p.total_cmp(v)).expect("value is present"))
        .collect();
    (ranks, sorted.len())
}

struct Fenwick(Vec<u64>);

impl Fenwick {
    fn new(n: usize) -> Self {
        Fenwick(vec![0; n + 1])
    }

    fn add(&mut self, i: usize) {
        let mut i = i + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< i`.
    fn prefix(&self, i: usize) -> u64 {
        let mut i = i;
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Pair counts behind the concordance index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConcordanceCounts {
    pub comparable: u64,
    pub concordant: u64,
    /// Comparable pairs with equal predicted times.
    pub tied: u64,
}

impl ConcordanceCounts {
    pub fn index(&self, harrell_ties: bool) -> Result<f64> {
        if self.comparable == 0 {
            return Err(StrafeError::undefined("c-index", "no comparable pairs"));
        }
        let ties = if harrell_ties { self.tied } else { 0 };
        Ok((2 * self.concordant + ties) as f64 / (2 * self.comparable) as f64)
    }
}

/// A pair `(i, j)` is comparable when `i` had the event and `T_i < T_j`; it
/// is concordant when also `T̂_i < T̂_j`. O(n log n).
pub fn concordance_counts(preds: &PredictionSet) -> ConcordanceCounts {
    let n = preds.len();
    let (rank, n_ranks) = dense_ranks(&preds.predicted_time);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| preds.labels[b].duration_months.cmp(&preds.labels[a].duration_months));
    let mut tree = Fenwick::new(n_ranks);
    let mut inserted = 0u64;
    let mut counts = ConcordanceCounts::default();
    let mut start = 0;
    while start < n {
        let t = preds.labels[order[start]].duration_months;
        let end = start + order[start..].iter().take_while(|&&i| preds.labels[i].duration_months == t).count();
        for &i in &order[start..end] {
            if preds.labels[i].event {
                let below = tree.prefix(rank[i]);
                let at_or_below = tree.prefix(rank[i] + 1);
                counts.comparable += inserted;
                counts.concordant += inserted - at_or_below;
                counts.tied += at_or_below - below;
            }
        }
        for &i in &order[start..end] {
            tree.add(rank[i]);
            inserted += 1;
        }
        start = end;
    }
    counts
}

/// Concordance of predicted survival times with observed durations. Ties in
/// `T̂` score 0 unless `harrell_ties` is set, in which case they score ½.
pub fn c_index(preds: &PredictionSet, harrell_ties: bool) -> Result<f64> {
    concordance_counts(preds).index(harrell_ties)
}

/// Mean absolute error of `T̂` over patients with an observed event.
pub fn mae(preds: &PredictionSet) -> Result<f64> {
    let mut total = 0.0;
    let mut observed = 0usize;
    for (t_hat, l) in preds.predicted_time.iter().zip(&preds.labels) {
        if l.event {
            total += (l.duration_months as f64 - t_hat).abs();
            observed += 1;
        }
    }
    if observed == 0 {
        return Err(StrafeError::undefined("mae", "no observed events"));
    }
    Ok(total / observed as f64)
}

/// Mann–Whitney estimate of `P(score⁺ > score⁻) + ½ P(score⁺ = score⁻)`,
/// computed from midranks in exact integer arithmetic.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(StrafeError::Contract("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(StrafeError::NonFinite { op: "auc scores" });
    }
    let n_pos = labels.iter().filter(|&&y| y).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(StrafeError::undefined("auc", "needs both positive and negative labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of the positives; a tie block spanning 1-based
    // positions a..=b has midrank (a+b)/2.
    let mut doubled_rank_sum = 0u64;
    let mut start = 0;
    while start < order.len() {
        let end = start + order[start..].iter().take_while(|&&i| scores[i] == scores[order[start]]).count();
        let doubled_midrank = (start + 1 + end) as u64;
        let positives = order[start..end].iter().filter(|&&i| labels[i]).count() as u64;
        doubled_rank_sum += positives * doubled_midrank;
        start = end;
    }
    let doubled_u = doubled_rank_sum - n_pos * (n_pos + 1);
    Ok(doubled_u as f64 / (2 * n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    /// Metric value of each non-degenerate resample, in resample order.
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Resamples on which the metric was undefined.
    pub skipped: usize,
    pub n_resamples: usize,
    pub seed: u64,
}

fn resample_indices(n: usize, seed: u64, r: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, r as u64]));
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn summarize(values: Vec<f64>, skipped: usize, n_resamples: usize, seed: u64) -> BootstrapSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    BootstrapSummary {
        ci_low: quantile_sorted(&sorted, 0.025),
        ci_high: quantile_sorted(&sorted, 0.975),
        values,
        mean,
        std,
        skipped,
        n_resamples,
        seed,
    }
}

fn degenerate(e: &StrafeError) -> bool {
    matches!(e, StrafeError::UndefinedMetric { .. })
}

/// Resamples `n` rows with replacement `n_resamples` times and evaluates
/// `metric` on each set of row indices. Resample `r` draws from its own
/// stream derived from `(seed, r)`, so results do not depend on scheduling.
pub fn bootstrap_metric<F>(n: usize, metric: F, n_resamples: usize, seed: u64) -> Result<BootstrapSummary>
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    let results: Vec<Result<f64>> = (0..n_resamples)
        .into_par_iter()
        .map(|r| metric(&resample_indices(n, seed, r)))
        .collect();
    let mut values = Vec::with_capacity(n_resamples);
    let mut skipped = 0;
    for r in results {
        match r {
            Ok(v) => values.push(v),
            Err(e) if degenerate(&e) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if values.is_empty() {
        return Err(StrafeError::undefined("bootstrap", "every resample was degenerate"));
    }
    Ok(summarize(values, skipped, n_resamples, seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedBootstrap {
    pub a: BootstrapSummary,
    pub b: BootstrapSummary,
    /// Twice the fraction of resamples on which A does not beat B, capped at 1.
    pub p_value: f64,
}

/// Evaluates two methods on the same resamples. A resample degenerate for
/// either method is skipped for both.
pub fn paired_bootstrap<FA, FB>(n: usize, metric_a: FA, metric_b: FB, n_resamples: usize, seed: u64) -> Result<PairedBootstrap>
where
    FA: Fn(&[usize]) -> Result<f64> + Sync,
    FB: Fn(&[usize]) -> Result<f64> + Sync,
{
    let results: Vec<Result<Option<(f64, f64)>>> = (0..n_resamples)
        .into_par_iter()
        .map(|r| {
            let idx = resample_indices(n, seed, r);
            match (metric_a(&idx), metric_b(&idx)) {
                (Ok(a), Ok(b)) => Ok(Some((a, b))),
                (Err(e), _) | (_, Err(e)) if !degenerate(&e) => Err(e),
                _ => Ok(None),
            }
        })
        .collect();
    let mut pairs = Vec::with_capacity(n_resamples);
    let mut skipped = 0;
    for r in results {
        match r? {
            Some(p) => pairs.push(p),
            None => skipped += 1,
        }
    }
    if pairs.is_empty() {
        return Err(StrafeError::undefined("bootstrap", "every resample was degenerate"));
    }
    let not_better = pairs.iter().filter(|(a, b)| a <= b).count();
    let p_value = (2.0 * not_better as f64 / pairs.len() as f64).min(1.0);
    let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    Ok(PairedBootstrap {
        a: summarize(a, skipped, n_resamples, seed),
        b: summarize(b, skipped, n_resamples, seed),
        p_value,
    })
}

/// Splits `order` into ten consecutive groups whose sizes differ by at most
/// one; the larger groups come first.
pub fn decile_partition(order: &[usize]) -> Result<Vec<Vec<usize>>> {
    let n = order.len();
    if n < 10 {
        return Err(StrafeError::Size(format!("decile analysis needs at least 10 patients, got {n}")));
    }
    let (base, extra) = (n / 10, n % 10);
    let mut out = Vec::with_capacity(10);
    let mut start = 0;
    for d in 0..10 {
        let size = base + usize::from(d < extra);
        out.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(out)
}

/// Indices sorted by `key`; equal keys keep their input order.
fn stable_order(key: &[f64], descending: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..key.len()).collect();
    if descending {
        order.sort_by(|&a, &b| key[b].total_cmp(&key[a]));
    } else {
        order.sort_by(|&a, &b| key[a].total_cmp(&key[b]));
    }
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileTimes {
    pub decile: usize,
    pub size: usize,
    pub observed: usize,
    /// Quartiles of the actual event month among observed patients.
    pub q1: Option<f64>,
    pub median: Option<f64>,
    pub q3: Option<f64>,
}

/// Deciles by ascending predicted survival time, with quartiles of the
/// actual event times of observed patients in each.
pub fn decile_progression(preds: &PredictionSet) -> Result<Vec<DecileTimes>> {
    let groups = decile_partition(&stable_order(&preds.predicted_time, false))?;
    Ok(groups
        .iter()
        .enumerate()
        .map(|(d, g)| {
            let mut times: Vec<f64> = g
                .iter()
                .filter(|&&i| preds.labels[i].event)
                .map(|&i| preds.labels[i].duration_months as f64)
                .collect();
            times.sort_by(f64::total_cmp);
            let q = |p| (!times.is_empty()).then(|| quantile_sorted(&times, p));
            DecileTimes {
                decile: d + 1,
                size: g.len(),
                observed: times.len(),
                q1: q(0.25),
                median: q(0.5),
                q3: q(0.75),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileRate {
    pub decile: usize,
    pub size: usize,
    pub events: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecilePpv {
    /// Decile 1 holds the highest predicted risks.
    pub deciles: Vec<DecileRate>,
    pub cohort_rate: f64,
    /// Top-decile event rate over the cohort rate.
    pub lift: f64,
}

/// Event rate per decile of descending predicted risk. `cohort_rate`
/// defaults to the prevalence of `labels`.
pub fn decile_ppv(risks: &[f64], labels: &[bool], cohort_rate: Option<f64>) -> Result<DecilePpv> {
    if risks.len() != labels.len() {
        return Err(StrafeError::Contract("risks and labels differ in length".into()));
    }
    let groups = decile_partition(&stable_order(risks, true))?;
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 || positives == labels.len() {
        return Err(StrafeError::undefined("decile ppv", "needs both positive and negative labels"));
    }
    let cohort_rate = cohort_rate.unwrap_or(positives as f64 / labels.len() as f64);
    let deciles: Vec<DecileRate> = groups
        .iter()
        .enumerate()
        .map(|(d, g)| {
            let events = g.iter().filter(|&&i| labels[i]).count();
            DecileRate {
                decile: d + 1,
                size: g.len(),
                events,
                rate: events as f64 / g.len() as f64,
            }
        })
        .collect();
    let lift = deciles[0].rate / cohort_rate;
    Ok(DecilePpv {
        deciles,
        cohort_rate,
        lift,
    })
}

/// AUC within each group; `None` where a group lacks one of the classes.
pub fn stratified_auc(scores: &[f64], labels: &[bool], groups: &[String]) -> Result<BTreeMap<String, Option<f64>>> {
    if scores.len() != groups.len() || labels.len() != groups.len() {
        return Err(StrafeError::Contract("scores, labels and groups differ in length".into()));
    }
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        members.entry(g).or_default().push(i);
    }
    members
        .into_iter()
        .map(|(g, idx)| {
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let y: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            match auc_roc(&s, &y) {
                Ok(v) => Ok((g.to_string(), Some(v))),
                Err(e) if degenerate(&e) => Ok((g.to_string(), None)),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Average ranks (1-based) with ties sharing their mean rank.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let order = stable_order(x, false);
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let end = start + order[start..].iter().take_while(|&&i| x[i] == x[order[start]]).count();
        let r = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(StrafeError::Contract("spearman needs two equal-length series of length ≥ 2".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(StrafeError::undefined("spearman", "a series is constant"));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// One entry of a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub name: String,
    pub value: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub resamples: Option<usize>,
    pub seed: Option<u64>,
    /// Why the value is missing, when it is.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl MetricEntry {
    pub fn point(name: impl Into<String>, value: Result<f64>) -> Self {
        let (value, note) = match value {
            Ok(v) => (Some(v), None),
            Err(e) => (None, Some(e.to_string())),
        };
        MetricEntry {
            name: name.into(),
            value,
            ci_low: None,
            ci_high: None,
            resamples: None,
            seed: None,
            note,
        }
    }

    pub fn with_bootstrap(mut self, b: &BootstrapSummary) -> Self {
        self.ci_low = Some(b.ci_low);
        self.ci_high = Some(b.ci_high);
        self.resamples = Some(b.n_resamples);
        self.seed = Some(b.seed);
        self
    }
}

pub fn write_decile_times_csv(mut w: impl Write, rows: &[DecileTimes]) -> Result<()> {
    writeln!(w, "decile,size,observed,q1,median,q3")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        writeln!(w, "{},{},{},{},{},{}", r.decile, r.size, r.observed, opt(r.q1), opt(r.median), opt(r.q3))?;
    }
    Ok(())
}

pub fn write_decile_ppv_csv(mut w: impl Write, table: &DecilePpv) -> Result<()> {
    writeln!(w, "decile,size,events,rate,lift")?;
    for r in &table.deciles {
        writeln!(w, "{},{},{},{},{}", r.decile, r.size, r.events, r.rate, r.rate / table.cohort_rate)?;
    }
    Ok(())
}
