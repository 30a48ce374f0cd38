use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{numel, Float, Tensor};
use crate::error::{Error, Result};

/// A named trainable tensor. The name is its serialization slot.
#[derive(Clone, Debug)]
pub struct Parameter<T: Float> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug)]
pub struct ParamStore<T: Float> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }
}

/// Zero-mean Gaussian values with the given standard deviation.
pub fn init_normal<T: Float>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Vec<T> {
    let n = numel(shape);
    if std == 0.0 {
        return vec![T::zero(); n];
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| T::lit(dist.sample(rng))).collect()
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a leaf tensor under `name` and returns a handle to it.
    pub fn add(&mut self, name: impl Into<String>, data: Vec<T>, shape: &[usize]) -> Result<Tensor<T>> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let tensor = Tensor::leaf(data, shape)?;
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            tensor: tensor.clone(),
        });
        Ok(tensor)
    }

    /// Fan-in scaled Gaussian weight: std = `gain / sqrt(fan_in)`.
    pub fn add_weight(&mut self, name: impl Into<String>, shape: &[usize], gain: f64, rng: &mut impl Rng) -> Result<Tensor<T>> {
        let fan_in: usize = shape[1..].iter().product();
        let std = gain / (fan_in.max(1) as f64).sqrt();
        self.add(name, init_normal(shape, std, rng), shape)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<Tensor<T>> {
        self.add(name, vec![T::zero(); numel(shape)], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i].tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|p| p.tensor.zero_grad());
    }

    /// Overwrites parameter values from `(name, shape, values)` records.
    /// Every registered parameter must be present; extra records are ignored.
    pub fn load_records(&self, records: &[super::serialize::Record]) -> Result<()> {
        let by_name: HashMap<&str, &super::serialize::Record> = records.iter().map(|r| (r.name.as_str(), r)).collect();
        for p in &self.params {
            let r = by_name
                .get(p.name.as_str())
                .ok_or_else(|| Error::MissingParameter(p.name.clone()))?;
            if r.shape != p.tensor.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load parameter",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: r.shape.clone(),
                });
            }
            let mut d = p.tensor.data_mut();
            d.iter_mut().zip(&r.values).for_each(|(d, &v)| *d = T::lit(v as f64));
        }
        Ok(())
    }

    pub fn to_records(&self) -> Vec<super::serialize::Record> {
        self.params
            .iter()
            .map(|p| super::serialize::Record {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                values: p.tensor.data().iter().map(|v| v.as_f32()).collect(),
            })
            .collect()
    }
}

/// Stochastic gradient descent with momentum and L2 weight decay:
/// `v ← μ·v + g + λ·θ`, `θ ← θ − η·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T: Float> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: HashMap<String, Vec<T>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum: T::lit(momentum),
            weight_decay: T::lit(weight_decay),
            velocity: HashMap::new(),
        }
    }

    /// Applies one update and zeroes every gradient.
    pub fn step(&mut self, params: &ParamStore<T>, lr: f64) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.tensor.grad().is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        let lr = T::lit(lr);
        for p in params.iter() {
            let grad = p.tensor.grad().expect("checked above");
            let mut data = p.tensor.data_mut();
            let v = self.velocity.entry(p.name.clone()).or_insert_with(|| vec![T::zero(); grad.len()]);
            for ((v, &g), w) in v.iter_mut().zip(&grad).zip(data.iter_mut()) {
                *v = self.momentum * *v + g + self.weight_decay * *w;
                *w -= lr * *v;
            }
            drop(data);
            p.tensor.zero_grad();
        }
        Ok(())
    }

    /// Velocity buffers as records named `optim.velocity.<param>`.
    pub fn to_records(&self, params: &ParamStore<T>) -> Vec<super::serialize::Record> {
        params
            .iter()
            .filter_map(|p| {
                self.velocity.get(&p.name).map(|v| super::serialize::Record {
                    name: format!("optim.velocity.{}", p.name),
                    shape: p.tensor.shape().to_vec(),
                    values: v.iter().map(|x| x.as_f32()).collect(),
                })
            })
            .collect()
    }

    pub fn load_records(&mut self, records: &[super::serialize::Record]) {
        for r in records {
            if let Some(name) = r.name.strip_prefix("optim.velocity.") {
                self.velocity
                    .insert(name.to_string(), r.values.iter().map(|&v| T::lit(v as f64)).collect());
            }
        }
    }
}
