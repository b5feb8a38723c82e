use std::collections::HashMap;

use super::array::Tensor;
use super::real::Real;
use super::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named trainable tensor with its adadelta accumulators.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Running average of squared gradients.
    pub sq_grad: Vec<T>,
    /// Running average of squared updates.
    pub sq_update: Vec<T>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        let n = value.numel();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, sq_grad: vec![T::zero(); n], sq_update: vec![T::zero(); n] });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Copies values from `other` by name; shapes must match.
    pub fn load_values_from<U: Real>(&mut self, other: &ParamStore<U>) -> Result<(), TensorError> {
        for p in &mut self.params {
            let id = other.id(&p.name).ok_or_else(|| TensorError::MissingParam(p.name.clone()))?;
            let src = other.value(id);
            if src.shape() != p.value.shape() {
                return Err(TensorError::Shape(format!(
                    "parameter {} has shape {:?}, source has {:?}",
                    p.name,
                    p.value.shape(),
                    src.shape()
                )));
            }
            p.value = src.cast();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast()).expect("names are unique");
        }
        out
    }
}

/// Per-parameter gradient buffers, allocated lazily.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Gradients { grads: vec![None; store.len()] }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[T]) {
        match &mut self.grads[id.0] {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(x, &v)| *x += v),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    /// True when the parameter received no gradient or only exact zeros.
    pub fn is_zero(&self, id: ParamId) -> bool {
        self.get(id).is_none_or(|g| g.iter().all(|&v| v == T::zero()))
    }

    pub fn merge(&mut self, other: &Gradients<T>) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.grads.iter().flatten().flat_map(|g| g.iter()).map(|v| Real::to_f64(*v).powi(2)).sum::<f64>().sqrt()
    }
}

/// Adadelta with optional global step size (1.0 is the plain method).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adadelta {
    pub rho: f64,
    pub eps: f64,
    pub lr: f64,
}

impl Default for Adadelta {
    fn default() -> Self {
        Adadelta { rho: 0.95, eps: 1e-6, lr: 1.0 }
    }
}

impl Adadelta {
    /// Applies one update. Parameters without a gradient are skipped and
    /// keep their accumulators untouched.
    pub fn step<T: Real>(&self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        let rho = T::from_f64(self.rho);
        let one_m = T::one() - rho;
        let eps = T::from_f64(self.eps);
        let lr = T::from_f64(self.lr);
        for (i, p) in store.params.iter_mut().enumerate() {
            let Some(g) = grads.get(ParamId(i)) else { continue };
            let data = p.value.data_mut();
            for j in 0..data.len() {
                let gj = g[j];
                p.sq_grad[j] = rho * p.sq_grad[j] + one_m * gj * gj;
                let delta = -((p.sq_update[j] + eps).sqrt() / (p.sq_grad[j] + eps).sqrt()) * gj;
                p.sq_update[j] = rho * p.sq_update[j] + one_m * delta * delta;
                data[j] += lr * delta;
            }
        }
    }
}
