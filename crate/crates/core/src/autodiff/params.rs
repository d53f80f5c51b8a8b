use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors together with their gradient accumulators.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.grads.push(Tensor::zeros(value.shape().to_vec()));
        self.values.push(value);
        self.names.push(name);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        for (a, b) in self.grads[id.0].data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }

    pub(crate) fn values_and_grads_mut(&mut self) -> (&mut [Tensor], &[Tensor]) {
        (&mut self.values, &self.grads)
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Scalar parameter count over tensors whose name starts with `prefix`.
    pub fn num_elements_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.values.clone()
    }

    pub fn restore(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Mismatch(format!(
                "snapshot holds {} tensors, store has {}",
                values.len(),
                self.values.len()
            )));
        }
        for (dst, src) in self.values.iter_mut().zip(values) {
            if dst.shape() != src.shape() {
                return Err(Error::Shape(format!(
                    "snapshot shape {:?} vs {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.clone_from(src);
        }
        Ok(())
    }

    /// Named view used by checkpoints.
    pub fn named_values(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Replaces values by name; every stored tensor must be present with a matching shape.
    pub fn load_named(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        if tensors.len() != self.values.len() {
            return Err(Error::Mismatch(format!(
                "checkpoint holds {} tensors, model expects {}",
                tensors.len(),
                self.values.len()
            )));
        }
        for (name, t) in tensors {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::Mismatch(format!("unknown tensor {name} in checkpoint")))?;
            if self.values[id.0].shape() != t.shape() {
                return Err(Error::Mismatch(format!(
                    "width mismatch for {name}: checkpoint {:?}, model {:?}",
                    t.shape(),
                    self.values[id.0].shape()
                )));
            }
            self.values[id.0] = t;
        }
        Ok(())
    }
}

/// Uniform in `±1/sqrt(fan_in)`.
pub fn init_uniform<R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("numel matches")
}

pub fn init_normal<R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("numel matches")
}
