use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use std::collections::{BTreeMap, HashMap};

/// Which half of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamSet {
    /// Pretrained base weights (θ).
    Base,
    /// Control-branch weights (φ).
    Control,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub set: ParamSet,
    pub trainable: bool,
}

/// Named parameters, kept in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

/// Gradient per trainable parameter name.
pub type GradMap<T> = BTreeMap<String, Tensor<T>>;

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, set: ParamSet) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value,
            set,
            trainable: true,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn numel_of(&self, set: ParamSet) -> usize {
        self.params.iter().filter(|p| p.set == set).map(|p| p.value.numel()).sum()
    }

    pub fn set_trainable(&mut self, set: ParamSet, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.set == set) {
            p.trainable = trainable;
        }
    }

    /// Drops every parameter of `set`.
    pub fn remove_set(&mut self, set: ParamSet) {
        self.params.retain(|p| p.set != set);
        self.index = self.params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
    }

    /// Order-sensitive digest of the raw bits of every parameter in `set`.
    pub fn checksum(&self, set: ParamSet) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u64| {
            h ^= b;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for p in self.params.iter().filter(|p| p.set == set) {
            for b in p.name.bytes() {
                eat(u64::from(b));
            }
            for v in p.value.data() {
                eat(v.f64().to_bits());
            }
        }
        h
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    set: p.set,
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Global L2 norm over every gradient in the map.
pub fn global_norm<T: Scalar>(grads: &GradMap<T>) -> f64 {
    grads.values().map(|g| g.sq_norm()).sum::<f64>().sqrt()
}
