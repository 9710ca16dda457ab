//! Discrete-time survival mathematics on a monthly grid `t = 0..=T_max`.
//!
//! A model predicts the hazard complement `q(t) = 1 − λ(t)` for every month;
//! the survival curve is the running product of those values.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cohort::SurvivalLabel;
use crate::error::{Result, StrafeError};

/// Lower/upper clamp applied to predicted survival before taking logs.
pub const LOSS_CLAMP: f64 = 1e-7;

/// `S(t)` for `t = 0..=T_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve(pub Vec<f64>);

impl SurvivalCurve {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn t_max(&self) -> u32 {
        (self.0.len() - 1) as u32
    }

    pub fn at(&self, t: u32) -> f64 {
        self.0[t as usize]
    }

    pub fn is_valid(&self) -> bool {
        !self.0.is_empty()
            && self.0.iter().all(|s| s.is_finite() && (0.0..=1.0).contains(s))
            && self.0.windows(2).all(|w| w[1] <= w[0])
    }
}

/// `S(t) = Π_{τ≤t} q(τ)`.
pub fn survival_from_q(q: &[f64]) -> SurvivalCurve {
    let mut running = 1.0;
    SurvivalCurve(
        q.iter()
            .map(|&v| {
                running *= v;
                running
            })
            .collect(),
    )
}

/// Expected survival time in months, `μ = Σ_t S(t)`.
pub fn mean_survival_time(s: &SurvivalCurve) -> f64 {
    s.0.iter().sum()
}

/// Per-month weights of the loss: the coefficient of `−log Ŝ(t)` and of
/// `−log(1 − Ŝ(t))`. Observed patients contribute survival terms for
/// `t < T` and event terms for `T ≤ t ≤ T_max`; censored patients only the
/// survival terms.
pub fn loss_weights(label: SurvivalLabel, t_max: u32) -> Result<(Vec<f64>, Vec<f64>)> {
    if label.duration_months > t_max {
        return Err(StrafeError::Contract(format!(
            "duration {} outside [0, {t_max}]",
            label.duration_months
        )));
    }
    let n = t_max as usize + 1;
    let cut = label.duration_months as usize;
    let survived = (0..n).map(|t| if t < cut { 1.0 } else { 0.0 }).collect();
    let failed = (0..n)
        .map(|t| if label.event && t >= cut { 1.0 } else { 0.0 })
        .collect();
    Ok((survived, failed))
}

/// Negative log-likelihood of one patient's label under a predicted curve.
pub fn survival_loss(s_hat: &SurvivalCurve, label: SurvivalLabel) -> Result<f64> {
    let (survived, failed) = loss_weights(label, s_hat.t_max())?;
    let mut loss = 0.0;
    for (t, &s) in s_hat.0.iter().enumerate() {
        let s = s.clamp(LOSS_CLAMP, 1.0 - LOSS_CLAMP);
        if survived[t] != 0.0 {
            loss -= s.ln();
        }
        if failed[t] != 0.0 {
            loss -= (1.0 - s).ln();
        }
    }
    Ok(loss)
}

/// Sum of per-patient losses.
pub fn batch_survival_loss(curves: &[SurvivalCurve], labels: &[SurvivalLabel]) -> Result<f64> {
    if curves.len() != labels.len() {
        return Err(StrafeError::Contract("curves and labels differ in length".into()));
    }
    curves.iter().zip(labels).map(|(s, &l)| survival_loss(s, l)).sum()
}

/// Probability of the event in months `0..=t_r`, `1 − S(t_r)`.
pub fn fixed_time_risk(s: &SurvivalCurve, t_r: u32) -> Result<f64> {
    if t_r > s.t_max() {
        return Err(StrafeError::Contract(format!("horizon {t_r} beyond curve end {}", s.t_max())));
    }
    Ok(1.0 - s.at(t_r))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KaplanMeier {
    pub survival: SurvivalCurve,
    /// Patients still under observation at the start of each month.
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

/// Product-limit estimate on the monthly grid `0..=t_max`. A patient with
/// duration `T` is at risk in months `0..=T`.
pub fn kaplan_meier(labels: &[SurvivalLabel], t_max: u32) -> Result<KaplanMeier> {
    if labels.is_empty() {
        return Err(StrafeError::Size("Kaplan-Meier needs at least one label".into()));
    }
    let n = t_max as usize + 1;
    let mut events = vec![0usize; n];
    let mut leaving = vec![0usize; n];
    for l in labels {
        let t = (l.duration_months as usize).min(n - 1);
        if l.event {
            events[t] += 1;
        }
        leaving[t] += 1;
    }
    let mut at_risk = vec![0usize; n];
    let mut remaining = labels.len();
    let mut s = 1.0;
    let mut curve = Vec::with_capacity(n);
    for t in 0..n {
        at_risk[t] = remaining;
        if remaining > 0 && events[t] > 0 {
            s *= (remaining - events[t]) as f64 / remaining as f64;
        }
        curve.push(s);
        remaining -= leaving[t];
    }
    Ok(KaplanMeier {
        survival: SurvivalCurve(curve),
        at_risk,
        events,
    })
}

/// Writes `patient_id,t,S` rows.
pub fn write_curves_csv<'a>(
    mut w: impl Write,
    curves: impl IntoIterator<Item = (&'a str, &'a SurvivalCurve)>,
) -> Result<()> {
    writeln!(w, "patient_id,t,S")?;
    for (id, curve) in curves {
        for (t, s) in curve.0.iter().enumerate() {
            writeln!(w, "{id},{t},{s}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn curve_from_q() {
        let s = survival_from_q(&[0.5; 4]);
        assert_eq!(s.0, vec![0.5, 0.25, 0.125, 0.0625]);
        let s = survival_from_q(&[1.0 - 1e-12; 5]);
        assert!(s.0.iter().all(|v| (v - 1.0).abs() < 1e-10));
    }

    #[test]
    fn mean_time() {
        assert_eq!(mean_survival_time(&SurvivalCurve(vec![1.0; 4])), 4.0);
        assert_eq!(mean_survival_time(&SurvivalCurve(vec![0.0; 4])), 0.0);
        assert_eq!(mean_survival_time(&SurvivalCurve(vec![0.5, 0.25, 0.125, 0.0625])), 0.9375);
    }

    #[test]
    fn loss_examples() {
        let s = SurvivalCurve(vec![0.9, 0.8, 0.7, 0.6]);
        assert_eq!(survival_loss(&s, SurvivalLabel::censored(0)).unwrap(), 0.0);

        let half = SurvivalCurve(vec![0.5, 0.5]);
        let l = survival_loss(&half, SurvivalLabel::event(0)).unwrap();
        assert!((l - 1.3862943611198906).abs() < 1e-12);

        let l = survival_loss(&s, SurvivalLabel::censored(2)).unwrap();
        assert!((l - 0.3285040669720361).abs() < 1e-12);

        assert!(survival_loss(&s, SurvivalLabel::event(4)).is_err());
    }

    #[test]
    fn loss_is_finite_at_extremes() {
        let s = SurvivalCurve(vec![1.0, 0.0]);
        assert!(survival_loss(&s, SurvivalLabel::event(0)).unwrap().is_finite());
        assert!(survival_loss(&s, SurvivalLabel::censored(1)).unwrap().is_finite());
    }

    #[test]
    fn risk() {
        let s = SurvivalCurve(vec![1.0, 0.8, 0.5]);
        assert_eq!(fixed_time_risk(&s, 0).unwrap(), 0.0);
        assert!((fixed_time_risk(&s, 1).unwrap() - 0.2).abs() < 1e-15);
        assert!(fixed_time_risk(&s, 3).is_err());
    }

    #[test]
    fn km_hand_example() {
        let labels = [SurvivalLabel::event(1), SurvivalLabel::censored(2), SurvivalLabel::event(3)];
        let km = kaplan_meier(&labels, 3).unwrap();
        assert_eq!(km.survival.0, vec![1.0, 2.0 / 3.0, 2.0 / 3.0, 0.0]);
        assert_eq!(km.at_risk, vec![3, 3, 2, 1]);
    }

    #[test]
    fn km_all_censored_and_empty() {
        let labels = [SurvivalLabel::censored(1), SurvivalLabel::censored(4)];
        assert!(kaplan_meier(&labels, 5).unwrap().survival.0.iter().all(|&s| s == 1.0));
        assert!(kaplan_meier(&[], 5).is_err());
    }

    #[test]
    fn csv_export() {
        let mut buf = Vec::new();
        let c = SurvivalCurve(vec![1.0, 0.5]);
        write_curves_csv(&mut buf, [("p1", &c)]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "patient_id,t,S\np1,0,1\np1,1,0.5\n");
    }

    proptest! {
        #[test]
        fn curve_invariants(q in prop::collection::vec(0.0f64..=1.0, 1..50)) {
            let s = survival_from_q(&q);
            prop_assert!(s.is_valid());
            let risks: Vec<f64> = (0..=s.t_max()).map(|t| fixed_time_risk(&s, t).unwrap()).collect();
            prop_assert!(risks.windows(2).all(|w| w[1] >= w[0]));
        }

        #[test]
        fn km_without_censoring_is_empirical(durations in prop::collection::vec(0u32..12, 1..60)) {
            let labels: Vec<_> = durations.iter().map(|&d| SurvivalLabel::event(d)).collect();
            let km = kaplan_meier(&labels, 12).unwrap();
            let n = labels.len() as f64;
            for t in 0..=12u32 {
                let empirical = durations.iter().filter(|&&d| d > t).count() as f64 / n;
                prop_assert!((km.survival.at(t) - empirical).abs() < 1e-12);
            }
        }
    }
}
