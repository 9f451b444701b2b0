//! Named learnable parameters.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Glorot/Xavier uniform with fan-in = rows, fan-out = cols.
    XavierUniform,
    Zeros,
    Constant(f64),
}

/// Parameters in registration order, addressable by dotted path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    lookup: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        init: Init,
        rng: &mut impl Rng,
    ) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter `{name}`");
        let value = match init {
            Init::XavierUniform => {
                let limit = (6.0 / (shape.0 + shape.1) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite xavier bound");
                Array2::from_shape_simple_fn(shape, || dist.sample(rng))
            }
            Init::Zeros => Array2::zeros(shape),
            Init::Constant(c) => Array2::from_elem(shape, c),
        };
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }

    /// Appends an already-materialized parameter.
    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
        }
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Array2<f64>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.id(name).map(|id| &mut self.values[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    /// Overwrites a value, keeping the registered shape.
    pub fn set(&mut self, name: &str, value: Array2<f64>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if self.values[id.0].dim() != value.dim() {
            return Err(Error::Dimension(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                self.values[id.0].dim(),
                value.dim()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Places every parameter on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.variable(v.clone())).collect()
    }

    /// Collects parameter adjoints; parameters the root never reached get zeros.
    pub fn gradients(&self, grads: &Gradients, bound: &[Var]) -> Vec<Array2<f64>> {
        self.values
            .iter()
            .zip(bound)
            .map(|(v, var)| grads.get(*var).cloned().unwrap_or_else(|| Array2::zeros(v.dim())))
            .collect()
    }
}
