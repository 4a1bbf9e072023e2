use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

/// Parameters recorded as leaves on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::Config(format!("duplicate parameter name `{name}`")));
        }
        tensor.set_requires_grad(true);
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn bind(&self, tape: &Tape<T>) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| tape.leaf(t)).collect() }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds the sweep's gradients into each parameter's accumulator.
    /// Parameters that the loss never reached get an explicit zero gradient.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients<T>) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            match grads.get(v) {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![T::zero(); t.numel()])?,
            }
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Copies values from `other` by name; shapes must agree.
    pub fn load_from<U: Element>(&mut self, other: &ParamStore<U>) -> Result<()> {
        if other.len() != self.len() {
            return Err(TensorError::Format(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        for (name, src) in other.iter() {
            let id = self
                .id(name)
                .ok_or_else(|| TensorError::Format(format!("unknown parameter `{name}`")))?;
            let dst = &mut self.tensors[id.0];
            if dst.shape() != src.shape() {
                return Err(TensorError::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = T::of(s.as_f64());
            }
        }
        Ok(())
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`; `fan_in` is the
/// second-to-last axis (the contracted one in `x·W`), or the only axis for vectors.
pub fn uniform_fan_in<T: Element>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let fan_in = if shape.len() >= 2 { shape[shape.len() - 2] } else { shape[0] };
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

pub fn normal<T: Element>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}
