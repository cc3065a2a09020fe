use super::conv::{conv_backward, conv_forward, ConvSpec};
use super::params::ParamSet;
use super::tensor::{Real, Tensor};
use crate::error::Result;

/// A convolution whose weights live in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: usize,
    pub bias: Option<usize>,
}

impl Conv2d {
    pub fn forward<T: Real>(&self, params: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let zeros;
        let bias = match self.bias {
            Some(b) => params.get(b).data(),
            None => {
                zeros = vec![T::zero(); self.spec.out_channels];
                &zeros
            }
        };
        conv_forward(x, params.get(self.weight), bias, &self.spec)
    }

    /// Accumulates parameter gradients into `grads`, returns the input gradient.
    pub fn backward<T: Real>(
        &self,
        params: &ParamSet<T>,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        grads: &mut ParamSet<T>,
    ) -> Result<Tensor<T>> {
        let g = conv_backward(x, params.get(self.weight), &self.spec, grad_out)?;
        grads.accumulate(self.weight, &g.weights)?;
        if let Some(b) = self.bias {
            grads.accumulate_slice(b, &g.bias)?;
        }
        Ok(g.input)
    }
}
