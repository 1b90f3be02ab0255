use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::scalar::Scalar;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable tensor with its gradient and Adam moment buffers.
#[derive(Clone, Debug)]
pub struct ParamTensor<T: Scalar> {
    pub name: String,
    pub value: Matrix<T>,
    pub gradient: Matrix<T>,
    pub adam_m: Matrix<T>,
    pub adam_v: Matrix<T>,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn new(name: impl Into<String>, value: Matrix<T>) -> Self {
        let (r, c) = value.shape();
        ParamTensor {
            name: name.into(),
            value,
            gradient: Matrix::zeros(r, c),
            adam_m: Matrix::zeros(r, c),
            adam_v: Matrix::zeros(r, c),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    tensors: Vec<ParamTensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        self.tensors.push(ParamTensor::new(name, value));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.tensors[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<T>> {
        self.tensors.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors
            .iter()
            .position(|t| t.name == name)
            .map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.gradient.fill(T::zero());
        }
    }

    /// Copies per-parameter gradients into the stores' gradient buffers.
    pub fn set_gradients(&mut self, grads: &super::Gradients<T>) -> Result<()> {
        for (id, t) in self.tensors.iter_mut().enumerate() {
            match grads.get(ParamId(id)) {
                Some(g) => {
                    if g.shape() != t.value.shape() {
                        return Err(Error::shape(
                            t.name.clone(),
                            format!("gradient {:?} vs value {:?}", g.shape(), t.value.shape()),
                        ));
                    }
                    t.gradient.as_mut_slice().copy_from_slice(g.as_slice());
                }
                None => t.gradient.fill(T::zero()),
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.is_finite())
    }
}
