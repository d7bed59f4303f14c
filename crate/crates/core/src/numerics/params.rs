use std::ops::Index;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

/// Initialization scheme for a new parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-a, a]`.
    Uniform(f64),
    /// Xavier/Glorot uniform using the first and last dimensions as fan-in/out.
    Xavier,
    Normal(f64),
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn add_init<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut R) -> ParamId {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Uniform(a) => Tensor::uniform(shape, -a, a, rng),
            Init::Xavier => {
                let fan_in = shape.first().copied().unwrap_or(1);
                let fan_out = shape.last().copied().unwrap_or(1);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::uniform(shape, -a, a, rng)
            }
            Init::Normal(std) => Tensor::normal(shape, std, rng),
        };
        self.add(name, value)
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

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Overwrites every parameter from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::invalid(format!(
                "parameter count mismatch: expected {}, found {}",
                self.len(),
                other.len()
            )));
        }
        for (i, name) in self.names.iter().enumerate() {
            let j = other
                .find(name)
                .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))?;
            let src = other.get(j);
            if src.shape() != self.values[i].shape() {
                return Err(Error::shape("load parameter", self.values[i].shape(), src.shape()));
            }
            self.values[i] = src.clone();
        }
        Ok(())
    }

    /// Places every parameter on `tape`. Frozen stores are bound as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound {
            vars: self
                .values
                .iter()
                .map(|v| tape.leaf(v.clone().with_requires_grad(trainable)))
                .collect(),
        }
    }

    /// Gradient per parameter in store order (zeros for unreached ones).
    pub fn collect_grads(&self, grads: &Gradients, bound: &Bound) -> Vec<Tensor> {
        bound.vars.iter().map(|&v| grads.tensor(v)).collect()
    }
}

/// The tape variables of a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Element-wise sum of per-sample gradient lists, in order.
pub fn accumulate(total: &mut Vec<Tensor>, sample: Vec<Tensor>) {
    if total.is_empty() {
        *total = sample;
        return;
    }
    for (t, s) in total.iter_mut().zip(&sample) {
        t.add_assign(s);
    }
}
