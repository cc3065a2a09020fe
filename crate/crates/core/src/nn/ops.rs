//! Elementwise and channel-structural kernels.

use super::tensor::{same_shape, Real, Tensor};
use crate::error::{check_dim, Error, Result};

pub fn relu_forward<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `grad_out` where `input > 0`; the subgradient at 0 is 0.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("relu_backward", input, grad_out)?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

pub fn add_elementwise<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

/// Splits along the channel axis into `parts` equal chunks.
pub fn split_channels<T: Real>(input: &Tensor<T>, parts: usize) -> Result<Vec<Tensor<T>>> {
    let [n, c, h, w] = input.shape();
    if parts == 0 || c % parts != 0 {
        return Err(Error::Geometry {
            op: "split_channels",
            msg: format!("{c} channels not divisible into {parts} parts"),
        });
    }
    let cp = c / parts;
    let plane = h * w;
    Ok((0..parts)
        .map(|p| {
            let mut data = Vec::with_capacity(n * cp * plane);
            for b in 0..n {
                let item = input.item(b);
                data.extend_from_slice(&item[p * cp * plane..(p + 1) * cp * plane]);
            }
            Tensor::from_vec([n, cp, h, w], data).expect("split sizes")
        })
        .collect())
}

pub fn concat_channels<T: Real>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::Geometry {
        op: "concat_channels",
        msg: "no inputs".into(),
    })?;
    let [n, _, h, w] = first.shape();
    for t in parts {
        check_dim("concat_channels", "batch", n, t.n())?;
        check_dim("concat_channels", "height", h, t.h())?;
        check_dim("concat_channels", "width", w, t.w())?;
    }
    let c: usize = parts.iter().map(|t| t.c()).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for t in parts {
            data.extend_from_slice(t.item(b));
        }
    }
    Tensor::from_vec([n, c, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec([1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn relu_values_and_subgradient() {
        let x = t(&[-1.0, 0.0, 2.0]);
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &t(&[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn split_concat_round_trip() {
        let x = Tensor::<f64>::from_fn([2, 6, 3, 2], |i| (i as f64).sin());
        let parts = split_channels(&x, 3).unwrap();
        assert_eq!(parts.len(), 3);
        assert!(parts.iter().all(|p| p.shape() == [2, 2, 3, 2]));
        assert_eq!(parts[1].at(1, 0, 2, 1), x.at(1, 2, 2, 1));
        assert_eq!(concat_channels(&parts).unwrap(), x);
    }

    #[test]
    fn split_rejects_indivisible() {
        let x = Tensor::<f64>::zeros([1, 7, 2, 2]);
        assert!(matches!(split_channels(&x, 3), Err(Error::Geometry { .. })));
    }

    #[test]
    fn add_identity_and_mismatch() {
        let x = Tensor::<f64>::from_fn([1, 2, 3, 3], |i| i as f64 * 0.5 - 2.0);
        let z = Tensor::zeros(x.shape());
        assert_eq!(add_elementwise(&x, &z).unwrap(), x);
        let y = Tensor::<f64>::from_fn([1, 2, 3, 3], |i| (i as f64).cos());
        assert_eq!(add_elementwise(&x, &y).unwrap(), add_elementwise(&y, &x).unwrap());
        let bad = Tensor::<f64>::zeros([1, 2, 3, 4]);
        assert!(matches!(add_elementwise(&x, &bad), Err(Error::Shape { dim: "width", .. })));
    }
}
