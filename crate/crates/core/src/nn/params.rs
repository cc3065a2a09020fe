use super::tensor::{Real, Tensor};
use crate::error::{check_dim, Error, Result};

/// Ordered collection of named parameter tensors. Layers refer to their
/// parameters by index; gradients and optimizer state are kept in sets with
/// the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }
    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
    pub fn names(&self) -> &[String] {
        &self.names
    }
    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }
    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }
    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }
    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }
    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Same names and shapes, in the same order.
    pub fn check_layout(&self, other: &ParamSet<T>) -> Result<()> {
        check_dim("ParamSet", "tensor count", self.len(), other.len())?;
        for (i, (a, b)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if a.shape() != b.shape() || self.names[i] != other.names[i] {
                return Err(Error::Geometry {
                    op: "ParamSet",
                    msg: format!(
                        "entry {i}: {} {:?} vs {} {:?}",
                        self.names[i],
                        a.shape(),
                        other.names[i],
                        b.shape()
                    ),
                });
            }
        }
        Ok(())
    }

    /// Flattened copy of every value in layout order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Overwrites every value from a flat slice in layout order.
    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        check_dim("ParamSet::assign_flat", "length", self.numel(), flat.len())?;
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn accumulate(&mut self, i: usize, grad: &Tensor<T>) -> Result<()> {
        self.tensors[i].add_assign(grad)
    }

    pub fn accumulate_slice(&mut self, i: usize, grad: &[T]) -> Result<()> {
        let t = &mut self.tensors[i];
        check_dim("ParamSet::accumulate_slice", "length", t.len(), grad.len())?;
        for (a, &g) in t.data_mut().iter_mut().zip(grad) {
            *a += g;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }
}
