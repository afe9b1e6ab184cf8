use super::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::gtensor::{Real, Tensor};

/// A learnable tensor with a gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor<f32>,
    pub grad: Tensor<f32>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor<f32>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }
}

/// Ordered collection of parameters; order defines checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new(params: Vec<Parameter>) -> Self {
        Self { params }
    }

    pub fn push(&mut self, p: Parameter) {
        self.params.push(p);
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Register every parameter (cast to `T`) on the tape, in order.
    pub fn register<T: Real>(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.param(p.name.clone(), p.value.cast()))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// `grad += scale · g` for every parameter present in `grads`.
    pub fn accumulate<T: Real>(&mut self, grads: &Gradients<T>, scale: f64) -> Result<()> {
        for p in &mut self.params {
            let Some(g) = grads.get(&p.name) else { continue };
            if g.shape() != p.grad.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient for {} has shape {:?}, parameter {:?}",
                    p.name,
                    g.shape(),
                    p.grad.shape()
                )));
            }
            for (acc, v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *acc += (v.as_f64() * scale) as f32;
            }
        }
        Ok(())
    }
}
