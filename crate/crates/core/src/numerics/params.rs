use std::collections::HashMap;

use crate::error::{MianError, Result};
use crate::numerics::DenseMatrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a tensor is, which decides whether L2 applies and how it is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Weight matrix: truncated-normal init, L2-penalized.
    Weight,
    /// Bias: zero init.
    Bias,
    /// Embedding table: truncated-normal init, not penalized.
    Embedding,
    /// Layer-norm gain: ones.
    Gain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub path: String,
    pub kind: ParamKind,
    pub value: DenseMatrix<T>,
}

/// Every learnable tensor, addressable by a stable string path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_path: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_path: HashMap::new(),
        }
    }

    /// Registers a tensor. Panics on a duplicate path, which is a programming error.
    pub fn add(&mut self, path: impl Into<String>, kind: ParamKind, value: DenseMatrix<T>) -> ParamId {
        let path = path.into();
        assert!(!self.by_path.contains_key(&path), "duplicate parameter path {path}");
        let id = ParamId(self.params.len());
        self.by_path.insert(path.clone(), id);
        self.params.push(Param { path, kind, value });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, path: &str) -> Option<ParamId> {
        self.by_path.get(path).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &DenseMatrix<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut DenseMatrix<T> {
        &mut self.params[id.0].value
    }

    pub fn by_path(&self, path: &str) -> Option<&DenseMatrix<T>> {
        self.id(path).map(|id| self.value(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces a tensor's values after checking the shape.
    pub fn assign(&mut self, path: &str, value: DenseMatrix<T>) -> Result<()> {
        let id = self
            .id(path)
            .ok_or_else(|| MianError::Schema(format!("unknown parameter `{path}`")))?;
        let current = self.value(id);
        if current.shape() != value.shape() {
            return Err(MianError::ShapeMismatch {
                op: "assign",
                left: current.shape(),
                right: value.shape(),
            });
        }
        self.params[id.0].value = value;
        Ok(())
    }

    pub fn zero_grads(&self) -> ParamGrads<T> {
        ParamGrads {
            grads: self
                .params
                .iter()
                .map(|p| DenseMatrix::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T> {
    grads: Vec<DenseMatrix<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn get(&self, id: ParamId) -> &DenseMatrix<T> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseMatrix<T> {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn zero(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(T::zero()));
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(DenseMatrix::is_finite)
    }
}
