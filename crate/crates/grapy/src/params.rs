//! Named parameter storage and its binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("no parameter named `{0}`")]
    Missing(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("parameter `{0}` is defined twice")]
    Duplicate(String),
}

/// Parameters keyed by unique dotted names, kept in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), ParamError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ParamError> {
        self.params
            .get(name)
            .ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, ParamError> {
        self.params
            .get_mut(name)
            .ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    /// Replaces an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), ParamError> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(ParamError::Shape {
                name: name.to_string(),
                expected: slot.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialisation.
pub fn uniform_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    scaled_uniform(rng, shape, fan_in, 1.0)
}

/// He-uniform: `[-sqrt(6/fan_in), sqrt(6/fan_in)]`, for layers followed by ReLU.
pub fn he_uniform_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    scaled_uniform(rng, shape, fan_in, 6f64.sqrt())
}

fn scaled_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let bound = gain / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

type Route<'a> = Box<dyn Fn(&str) -> String + 'a>;
type Filter<'a> = Box<dyn Fn(&str) -> bool + 'a>;

/// Binds parameters onto a tape on first use.
///
/// Model code asks for parameters by logical name; the route maps logical
/// names to storage names (identity by default). Only parameters actually
/// requested become tape leaves, so an update built from [`Binder::grads`]
/// never touches parameters the forward pass did not read.
pub struct Binder<'a> {
    store: &'a ParamStore,
    route: Route<'a>,
    trainable: Filter<'a>,
    bound: BTreeMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            route: Box::new(str::to_string),
            trainable: Box::new(|_| true),
            bound: BTreeMap::new(),
        }
    }

    pub fn with_route(mut self, route: impl Fn(&str) -> String + 'a) -> Self {
        self.route = Box::new(route);
        self
    }

    pub fn with_trainable(mut self, trainable: impl Fn(&str) -> bool + 'a) -> Self {
        self.trainable = Box::new(trainable);
        self
    }

    /// Storage name for a logical name.
    pub fn resolve(&self, logical: &str) -> String {
        (self.route)(logical)
    }

    pub fn param(&mut self, tape: &mut Tape, logical: &str) -> Result<Var, ParamError> {
        let name = self.resolve(logical);
        if let Some(&v) = self.bound.get(&name) {
            return Ok(v);
        }
        let value = self.store.get(&name)?.clone();
        let v = tape.leaf(value, (self.trainable)(&name));
        self.bound.insert(name, v);
        Ok(v)
    }

    /// Storage names bound so far.
    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(String::as_str)
    }

    /// Gradients of every bound trainable parameter, by storage name.
    /// Parameters the loss did not reach get zero gradients.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter(|(_, &v)| tape.requires_grad(v))
            .map(|(name, &v)| {
                let g = tape
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::zeros(&[1])).unwrap();
        assert_eq!(
            store.insert("a", Tensor::zeros(&[1])),
            Err(ParamError::Duplicate("a".into()))
        );
    }

    #[test]
    fn binder_routes_and_binds_once() {
        let mut store = ParamStore::new();
        store.insert("shared.w", Tensor::ones(&[2])).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store).with_route(|n| format!("shared.{n}"));
        let a = binder.param(&mut tape, "w").unwrap();
        let b = binder.param(&mut tape, "w").unwrap();
        assert_eq!(a, b);
        assert!(binder.param(&mut tape, "missing").is_err());
        let s = tape.sum_all(a).unwrap();
        tape.backward(s).unwrap();
        let grads = binder.grads(&tape);
        assert_eq!(grads["shared.w"].data(), &[1.0, 1.0]);
    }

    #[test]
    fn frozen_params_have_no_grads() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::ones(&[2])).unwrap();
        store.insert("b", Tensor::ones(&[2])).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store).with_trainable(|n| n == "a");
        let a = binder.param(&mut tape, "a").unwrap();
        let b = binder.param(&mut tape, "b").unwrap();
        let c = tape.mul(a, b).unwrap();
        let s = tape.sum_all(c).unwrap();
        tape.backward(s).unwrap();
        let grads = binder.grads(&tape);
        assert!(grads.contains_key("a") && !grads.contains_key("b"));
    }
}
