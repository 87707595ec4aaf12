use std::collections::HashMap;

use crate::autodiff::{Gradients, Tape, Tensor};
use crate::error::{Error, Result};

/// Ordered, named parameter blocks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::ValueCount { shape, len: values.len() });
        }
        if self.index.contains_key(&name) {
            return Err(Error::config(name, "duplicate parameter block"));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.shapes.push(shape);
        self.values.push(values);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.position(name).map(|i| self.values[i].as_slice())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let i = self.position(name)?;
        Some(self.values[i].as_mut_slice())
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.values
    }

    /// Every block registered on `tape` as a differentiable variable.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            tensors: self
                .shapes
                .iter()
                .zip(&self.values)
                .map(|(s, v)| tape.variable(Tensor::new(s.clone(), v.clone()).expect("checked on push")))
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Every block as an untracked constant.
    pub fn constants(&self) -> Bound {
        Bound {
            tensors: self
                .shapes
                .iter()
                .zip(&self.values)
                .map(|(s, v)| Tensor::new(s.clone(), v.clone()).expect("checked on push"))
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameter blocks materialized as tensors for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Bound {
    /// Pairs caller-made tensors with `params`' block names; shapes must match block by block.
    pub fn from_tensors(params: &ParamSet, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != params.len() {
            return Err(Error::Length {
                what: "parameter blocks",
                left: params.len(),
                right: tensors.len(),
            });
        }
        for (i, t) in tensors.iter().enumerate() {
            if t.shape() != params.shape(i) {
                return Err(Error::Shape {
                    op: "bind parameters",
                    lhs: params.shape(i).to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            tensors,
            index: params.index.clone(),
        })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::config(name, "missing parameter block"))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Gradient buffers in block order; zero-filled for blocks off the root's path.
    pub fn grads<'g>(&self, grads: &'g Gradients) -> Result<Vec<&'g [f64]>> {
        self.tensors
            .iter()
            .map(|t| grads.get(t).ok_or(Error::StaleTensor))
            .collect()
    }
}
