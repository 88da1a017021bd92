use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    /// Frozen parameters enter tapes as constants and are never optimized.
    pub frozen: bool,
}

/// Named parameters that outlive individual tapes. Iteration order is the
/// lexicographic order of names, which keeps serialization deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(
            name.into(),
            Param {
                tensor,
                frozen: false,
            },
        );
    }

    pub fn insert_frozen(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(
            name.into(),
            Param {
                tensor,
                frozen: true,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn freeze_all(&mut self) {
        self.params.values_mut().for_each(|p| p.frozen = true);
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.params
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(k, _)| k.as_str())
    }

    /// Replaces the values of `other`'s entries, requiring matching names
    /// and shapes. Frozen flags are kept from `self`.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        for (name, p) in &self.params {
            let src = other
                .params
                .get(name)
                .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))?;
            if src.tensor.shape() != p.tensor.shape() {
                return Err(Error::config(format!(
                    "parameter `{name}` has shape {} but {} was supplied",
                    p.tensor.shape(),
                    src.tensor.shape()
                )));
            }
        }
        for (name, p) in self.params.iter_mut() {
            p.tensor = other.params[name].tensor.clone();
        }
        Ok(())
    }
}

/// Fan-in scaled Gaussian: N(0, 2 / fan_in) times `gain`.
pub fn he_normal(shape: Shape, fan_in: usize, gain: f64, rng: &mut impl Rng) -> Tensor {
    let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let normal = Normal::new(0.0, std).expect("finite positive std");
    let data = (0..shape.numel()).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Registers `{name}.weight` `[cout, cin, k, k]` and `{name}.bias` `[cout, 1, 1, 1]`.
pub fn init_conv(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    kernel: usize,
    gain: f64,
    rng: &mut impl Rng,
) {
    let w = he_normal(Shape::new(cout, cin, kernel, kernel), cin * kernel * kernel, gain, rng);
    store.insert(format!("{name}.weight"), w);
    store.insert(format!("{name}.bias"), Tensor::zeros(Shape::new(cout, 1, 1, 1)));
}

/// Scalar count of a conv layer with bias.
pub const fn conv_param_count(cin: usize, cout: usize, kernel: usize) -> usize {
    cout * cin * kernel * kernel + cout
}
