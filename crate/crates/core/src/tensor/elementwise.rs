use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of relu given its forward input; the subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(shape_err!(
            "relu grad_out {} does not match input {}",
            grad_out.shape(),
            input.shape()
        ));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err!("cannot add {} and {}", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Concatenates along the channel axis in argument order.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err!("concat needs at least one tensor"))?
        .shape();
    let mut channels = 0;
    for p in parts {
        let s = p.shape();
        if (s.batch, s.height, s.width) != (first.batch, first.height, first.width) {
            return Err(shape_err!("cannot concat {s} with {first} along channels"));
        }
        channels += s.channels;
    }
    let out_shape = first.with_channels(channels);
    let mut data = Vec::with_capacity(out_shape.numel());
    let plane = first.plane();
    for n in 0..first.batch {
        for p in parts {
            let len = p.shape().channels * plane;
            data.extend_from_slice(&p.data()[n * len..(n + 1) * len]);
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Inverse of [`concat_channels`]: splits into consecutive channel groups.
pub fn split_channels<T: Scalar>(input: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let total: usize = sizes.iter().sum();
    if total != input.shape().channels {
        return Err(shape_err!(
            "channel split {sizes:?} does not cover {}",
            input.shape()
        ));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let part = input.narrow_channels(start, len);
            start += len;
            part
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn relu_definition() {
        let x = Tensor::<f32>::from_vec([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = Tensor::full([1, 1, 1, 3], 5.0);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let x = Tensor::<f64>::from_fn([2, 3, 2, 2], |n, c, y, xx| (n * c) as f64 - (y + xx) as f64);
        assert_eq!(add(&x, &Tensor::zeros(x.shape())).unwrap(), x);
        assert!(matches!(add(&x, &Tensor::zeros([2, 3, 2, 1])), Err(Error::Shape(_))));
    }

    #[test]
    fn concat_then_split_recovers_parts() {
        let a = Tensor::<f32>::from_fn([1, 3, 4, 4], |_, c, y, x| (c * 16 + y * 4 + x) as f32);
        let b = Tensor::<f32>::from_fn([1, 5, 4, 4], |_, c, y, x| -((c * 16 + y * 4 + x) as f32));
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), crate::tensor::Shape::new(1, 8, 4, 4));
        let parts = split_channels(&cat, &[3, 5]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        assert!(concat_channels(&[&a, &Tensor::zeros([1, 1, 2, 4])]).is_err());
    }
}
