//! Named parameters and their binding onto a tape.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    /// Uniform in `±bound`.
    Uniform(f32),
}

/// All parameters of a model, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor<f32>, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(input_err!("duplicate parameter name {name}"));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param { name: name.to_string(), value, trainable });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn init<R: Rng>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => alloc::vec![0.0; n],
            Init::Ones => alloc::vec![1.0; n],
            Init::Xavier => {
                let fan_in = if shape.len() > 1 { shape[0] } else { 1 };
                let fan_out = *shape.last().unwrap_or(&1);
                let a = num_traits::Float::sqrt(6.0 / (fan_in + fan_out) as f32);
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            }
            Init::Uniform(a) => (0..n).map(|_| rng.random_range(-a..=a)).collect(),
        };
        self.add(name, Tensor::new(shape, data)?, true)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Push every parameter onto `g` as a leaf.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>) -> Bound {
        let vars = self.params.iter().map(|p| g.leaf(p.value.cast(), p.trainable)).collect();
        Bound { vars }
    }

    /// Push every parameter as a constant, for inference.
    pub fn bind_frozen<T: Real>(&self, g: &mut Graph<T>) -> Bound {
        let vars = self.params.iter().map(|p| g.constant(p.value.cast())).collect();
        Bound { vars }
    }

    /// Like [`bind`](Self::bind) but with substitute values, used to evaluate
    /// the model at perturbed (or higher precision) parameters.
    pub fn bind_values<T: Real>(&self, g: &mut Graph<T>, values: &[Tensor<T>]) -> Result<Bound> {
        if values.len() != self.params.len() {
            return Err(input_err!("{} values for {} parameters", values.len(), self.params.len()));
        }
        let mut vars = Vec::with_capacity(values.len());
        for (p, v) in self.params.iter().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(input_err!("value for {} has shape {:?}", p.name, v.shape()));
            }
            vars.push(g.leaf(v.clone(), p.trainable));
        }
        Ok(Bound { vars })
    }
}

/// Parameter handles on one particular tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles already on the tape, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
