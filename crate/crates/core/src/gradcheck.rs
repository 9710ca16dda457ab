//! Central finite-difference verification of reverse-mode gradients.

use std::collections::BTreeMap;

use crate::error::{Result, StrafeError};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over the elements of each parameter.
    pub per_parameter: BTreeMap<String, f64>,
    pub max_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_parameter
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.as_str(), *v))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central differences of a scalar function of one tensor.
pub fn finite_difference(x: &Tensor<f64>, h: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Compares the gradients a model reports against central differences of its
/// loss.
///
/// `closure(params, want_grads)` must return the loss and, when asked, the
/// gradient of every parameter it uses. Parameters without a reported
/// gradient are treated as having gradient zero.
pub fn grad_check<F>(params: &ParamStore<f64>, tolerance: f64, h: f64, mut closure: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, bool) -> Result<(f64, BTreeMap<String, Tensor<f64>>)>,
{
    let (loss, analytic) = closure(params, true)?;
    let (again, _) = closure(params, false)?;
    if loss.to_bits() != again.to_bits() {
        return Err(StrafeError::NonDeterministic { first: loss, second: again });
    }

    let mut probe = params.clone();
    let mut per_parameter = BTreeMap::new();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.value(&name).len();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let orig = params.value(&name).data()[i];
            let mut eval_at = |v: f64| -> Result<f64> {
                probe.get_mut(&name).expect("same names").value.data_mut()[i] = v;
                Ok(closure(&probe, false)?.0)
            };
            let plus = eval_at(orig + h)?;
            let minus = eval_at(orig - h)?;
            eval_at(orig)?;
            let numeric = (plus - minus) / (2.0 * h);
            let reported = analytic.get(&name).map_or(0.0, |g| g.data()[i]);
            worst = worst.max(relative_error(reported, numeric));
        }
        per_parameter.insert(name, worst);
    }
    let max_error = per_parameter.values().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_parameter,
        max_error,
        tolerance,
    })
}
