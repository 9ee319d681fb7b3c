//! Named learnable tensors, their gradients, and deterministic initialization.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Gradients, Graph, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("duplicate parameter name `{0}`")]
    Duplicate(String),
    #[error("unknown parameter `{0}`")]
    Missing(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar = f32> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Ordered map of unique names to learnable tensors. Iteration order is
/// insertion order, which is also the checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamRegistry<T: Scalar = f32> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ParamRegistry<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<(), ParamError> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        self.entries.insert(name, Param { value, grad: None });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>, ParamError> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<(), ParamError> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| ParamError::Missing(name.to_string()))?;
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamRegistry<U> {
        ParamRegistry {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: p.grad.as_ref().map(Tensor::cast),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Place every parameter on `graph` as a gradient-tracked leaf.
    pub fn bind<'g>(&self, graph: &'g Graph<T>) -> Bound<'g, T> {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), graph.leaf(p.value.clone())))
                .collect(),
        }
    }

    /// Same as [`Self::bind`] but without gradient tracking.
    pub fn bind_frozen<'g>(&self, graph: &'g Graph<T>) -> Bound<'g, T> {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), graph.constant(p.value.clone())))
                .collect(),
        }
    }

    /// Bind caller-supplied variables in registry order, so parameters can be
    /// treated as ordinary inputs (used by gradient checks).
    pub fn bind_vars<'g>(&self, vars: &[Var<'g, T>]) -> Result<Bound<'g, T>, ParamError> {
        if vars.len() != self.entries.len() {
            return Err(ParamError::Missing(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.entries.len()
            )));
        }
        Ok(Bound {
            vars: self.entries.keys().cloned().zip(vars.iter().copied()).collect(),
        })
    }

    /// Add the gradients of a backward sweep into the stored gradients.
    /// Gradients keep accumulating until [`Self::zero_grad`].
    pub fn accumulate(&mut self, bound: &Bound<'_, T>, grads: &Gradients<T>) {
        for (name, p) in self.entries.iter_mut() {
            let Some(var) = bound.vars.get(name) else { continue };
            let Some(g) = grads.get(*var) else { continue };
            match &mut p.grad {
                Some(acc) => acc.add_assign(g),
                slot => *slot = Some(g.clone()),
            }
        }
    }
}

/// Parameters bound to one graph.
pub struct Bound<'g, T: Scalar = f32> {
    vars: IndexMap<String, Var<'g, T>>,
}

impl<'g, T: Scalar> Bound<'g, T> {
    pub fn get(&self, name: &str) -> Result<Var<'g, T>, ParamError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ParamError::Missing(name.to_string()))
    }
}

/// Seeded parameter factory used while declaring a model.
pub struct Initializer {
    rng: ChaCha8Rng,
    registry: ParamRegistry<f32>,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            registry: ParamRegistry::new(),
        }
    }

    /// Uniform in `±1/√fan_in`, or zeros.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, zero: bool) -> Result<(), ParamError> {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        // draw even for zero-initialized tensors so toggling one flag does not
        // shift every later parameter
        let draws: Vec<f32> = (0..shape.iter().product::<usize>())
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        let value = if zero {
            Tensor::zeros(shape)
        } else {
            Tensor::from_parts(shape.to_vec(), draws)
        };
        self.registry.insert(name, value)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<(), ParamError> {
        self.registry.insert(name, Tensor::full(shape, value))
    }

    pub fn finish(self) -> ParamRegistry<f32> {
        self.registry
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut r = ParamRegistry::<f32>::new();
        r.insert("a", Tensor::zeros(&[1])).unwrap();
        assert_eq!(
            r.insert("a", Tensor::zeros(&[1])),
            Err(ParamError::Duplicate("a".into()))
        );
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut r = ParamRegistry::<f64>::new();
        r.insert("w", Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap()).unwrap();
        for expected in [2.0, 4.0] {
            let g = Graph::new();
            let b = r.bind(&g);
            let loss = b.get("w").unwrap().scale(2.0).sum_all();
            let grads = g.backward(loss).unwrap();
            r.accumulate(&b, &grads);
            assert_eq!(r.get("w").unwrap().grad.as_ref().unwrap().data(), &[expected; 2]);
        }
        r.zero_grad();
        assert!(r.get("w").unwrap().grad.is_none());
    }
}
