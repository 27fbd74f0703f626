use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    fresh: bool,
}

/// Named trainable tensors and their gradient accumulators.
///
/// Gradients accumulate additively across calls to [`Params::accumulate`];
/// the optimizer clears them after each step.
#[derive(Clone, Debug, Default)]
pub struct Params {
    entries: Vec<Entry>,
}

/// Per-parameter gradients detached from a graph, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn empty(n: usize) -> Self {
        ParamGrads {
            grads: vec![None; n],
        }
    }

    pub fn set(&mut self, id: ParamId, grad: Vec<f64>) {
        self.grads[id.0] = Some(grad);
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Usage(format!("duplicate parameter name {name:?}")));
        }
        let n = value.len();
        self.entries.push(Entry {
            name,
            value,
            grad: vec![0.0; n],
            fresh: false,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// The accumulated gradient, or `None` if nothing has been accumulated
    /// since the last step.
    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        let e = &self.entries[id.0];
        e.fresh.then_some(e.grad.as_slice())
    }

    pub fn has_grad(&self, id: ParamId) -> bool {
        self.entries[id.0].fresh
    }

    pub fn grad_norm(&self, id: ParamId) -> f64 {
        self.grad(id)
            .map(|g| g.iter().map(|x| x * x).sum::<f64>().sqrt())
            .unwrap_or(0.0)
    }

    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for (e, g) in self.entries.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                for (a, b) in e.grad.iter_mut().zip(g) {
                    *a += b;
                }
                e.fresh = true;
            }
        }
    }

    /// Multiplies every accumulated gradient by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        for e in &mut self.entries {
            for g in &mut e.grad {
                *g *= factor;
            }
        }
    }

    pub fn global_grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.grad.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
            e.fresh = false;
        }
    }

    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut [f64], &[f64]) {
        let e = &mut self.entries[id.0];
        (e.value.data_mut(), &e.grad)
    }

    /// Copies values from `other`, which must have the same names and shapes.
    pub fn load_values(&mut self, other: &Params) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Usage(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Usage(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }
}
