use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Masked mean-squared error of one stack's `N×J×H×W` prediction:
/// the mean of `(p − t)²` over the channels whose weight is nonzero, with
/// each channel scaled by its weight. `weights` holds one entry per
/// `(sample, joint)`. Returns the loss and its gradient.
pub fn masked_mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, weights: &[T]) -> Result<(T, Tensor<T>)> {
    let s = pred.shape();
    if target.shape() != s {
        return Err(shape_err!("prediction {s} does not match target {}", target.shape()));
    }
    if weights.len() != s.batch * s.channels {
        return Err(shape_err!(
            "{} joint weights for prediction {s}",
            weights.len()
        ));
    }
    let plane = s.plane();
    let denom: T = weights.iter().copied().sum::<T>() * T::of(plane as f64);
    let mut grad = Tensor::zeros(s);
    if denom == T::zero() {
        return Ok((T::zero(), grad));
    }
    let mut loss = T::zero();
    let (p, t) = (pred.data(), target.data());
    let g = grad.data_mut();
    for (k, &w) in weights.iter().enumerate() {
        if w == T::zero() {
            continue;
        }
        let mut acc = T::zero();
        for i in k * plane..(k + 1) * plane {
            let d = p[i] - t[i];
            acc += d * d;
            g[i] = T::of(2.0) * w * d / denom;
        }
        loss += w * acc;
    }
    Ok((loss / denom, grad))
}

/// Sum over stacks of [`masked_mse`]; every stack is supervised with the
/// same targets. Returns the total and one gradient per stack.
pub fn heatmap_loss<T: Scalar>(
    predictions: &[&Tensor<T>],
    targets: &Tensor<T>,
    weights: &[T],
) -> Result<(T, Vec<Tensor<T>>)> {
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(predictions.len());
    for p in predictions {
        let (l, g) = masked_mse(p, targets, weights)?;
        total += l;
        grads.push(g);
    }
    Ok((total, grads))
}
