//! Learnable parameters and the Adam update.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Result, StrafeError};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    first_moment: Tensor<T>,
    second_moment: Tensor<T>,
    pub step: u64,
}

impl<T: Real> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Parameter {
            grad: zeros.clone(),
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
            step: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn accumulate(&mut self, g: &Tensor<T>) -> Result<()> {
        self.grad.same_shape(g, "accumulate")?;
        for (a, &d) in self.grad.data_mut().iter_mut().zip(g.data()) {
            *a += d;
        }
        Ok(())
    }
}

/// Named parameters in a fixed (sorted) order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Parameter<T>>,
}

/// Tape handles for every parameter of a store, created by [`ParamStore::bind`].
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` was not bound"))
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), Parameter::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> &Tensor<T> {
        &self.params[name].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Parameter::zero_grad);
    }

    /// Records every parameter as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, p) in &self.params {
            vars.insert(name.clone(), tape.leaf(p.value.clone())?);
        }
        Ok(Bound { vars })
    }

    /// Records every parameter as a constant, for inference-only tapes.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, p) in &self.params {
            vars.insert(name.clone(), tape.constant(p.value.clone())?);
        }
        Ok(Bound { vars })
    }

    /// Adds the gradients computed on a tape into the accumulators.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients<T>) -> Result<()> {
        for (name, var) in &bound.vars {
            if let Some(g) = grads.get(*var) {
                self.params
                    .get_mut(name)
                    .expect("bound names come from this store")
                    .accumulate(g)?;
            }
        }
        Ok(())
    }

    /// Extracts the gradients of a tape into a name-keyed map.
    pub fn collect_grads(bound: &Bound, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        bound
            .vars
            .iter()
            .filter_map(|(name, v)| grads.get(*v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), Parameter::new(p.value.cast())))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter. Gradients are left in
/// place; the caller clears them.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, cfg: &AdamConfig) -> Result<()> {
    for p in params.params.values_mut() {
        if !p.grad.all_finite() {
            return Err(StrafeError::NonFinite { op: "adam_step" });
        }
        p.step += 1;
        let t = p.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step_size = T::of(cfg.lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let eps = T::of(cfg.eps);
        let values = p.value.data_mut();
        let m = p.first_moment.data_mut();
        let v = p.second_moment.data_mut();
        for (i, &g) in p.grad.data().iter().enumerate() {
            m[i] = b1 * m[i] + one_b1 * g;
            v[i] = b2 * v[i] + one_b2 * g * g;
            values[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
        }
        if !p.value.all_finite() {
            return Err(StrafeError::NonFinite { op: "adam_step" });
        }
    }
    Ok(())
}
