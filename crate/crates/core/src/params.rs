//! Named parameter storage.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Result, SlamError};
use crate::tensor::{NdArray, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Initialisation scheme. Values are always sampled in `f64` and then cast,
/// so stores of either precision built from the same seed agree.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
    /// Glorot uniform over the given fan-in and fan-out.
    Xavier { fan_in: usize, fan_out: usize },
}

impl Init {
    fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        match *self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Uniform(limit) => uniform(limit, n, rng),
            Init::Xavier { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                uniform(limit, n, rng)
            }
        }
    }
}

fn uniform<R: Rng + ?Sized>(limit: f64, n: usize, rng: &mut R) -> Vec<f64> {
    if limit == 0.0 {
        return vec![0.0; n];
    }
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    (0..n).map(|_| dist.sample(rng)).collect()
}

#[derive(Clone, Debug)]
pub struct Parameter<S> {
    pub name: String,
    pub value: NdArray<S>,
}

/// Flat list of parameters addressed by [`ParamId`] or dotted name.
#[derive(Clone, Debug)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new() }
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(SlamError::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let n: usize = shape.iter().product();
        let value = NdArray::from_f64(shape, &init.sample(n, rng))?;
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, value });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &NdArray<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut NdArray<S> {
        &mut self.params[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), value: p.value.cast() })
                .collect(),
            index: self.index.clone(),
        }
    }
}
