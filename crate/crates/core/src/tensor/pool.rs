use super::{Scalar, Shape, Tensor};
use crate::error::{shape_err, Error, Result};

/// 2×2 max pooling with stride 2.
///
/// Returns the pooled tensor and, per output element, the flat input index
/// of the winner. Ties go to the first element in row-major window order.
pub fn maxpool2x2_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = input.shape();
    if !s.height.is_multiple_of(2) || !s.width.is_multiple_of(2) {
        return Err(Error::Geometry(format!(
            "2×2 max pooling needs even spatial dims, got {s}"
        )));
    }
    let (oh, ow) = (s.height / 2, s.width / 2);
    let out_shape = Shape::new(s.batch, s.channels, oh, ow);
    let x = input.data();
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut argmax = Vec::with_capacity(out_shape.numel());
    for plane in 0..s.batch * s.channels {
        let base = plane * s.height * s.width;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * s.width + 2 * ox;
                let window = [top, top + 1, top + s.width, top + s.width + 1];
                let mut best = window[0];
                for &i in &window[1..] {
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(out_shape, out)?, argmax))
}

/// Routes each output gradient to the input position that won the forward max.
pub fn maxpool2x2_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: Shape,
) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len()
        || grad_out.shape()
            != Shape::new(
                input_shape.batch,
                input_shape.channels,
                input_shape.height / 2,
                input_shape.width / 2,
            )
    {
        return Err(shape_err!(
            "max-pool grad_out {} does not match input {input_shape}",
            grad_out.shape()
        ));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    Ok(dx)
}

/// Nearest-neighbour 2× upsampling: each pixel becomes a 2×2 block.
pub fn upsample_nearest2x<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let (oh, ow) = (2 * s.height, 2 * s.width);
    let x = input.data();
    let mut out = Vec::with_capacity(s.batch * s.channels * oh * ow);
    for plane in 0..s.batch * s.channels {
        let base = plane * s.height * s.width;
        for oy in 0..oh {
            let row = &x[base + (oy / 2) * s.width..base + (oy / 2 + 1) * s.width];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    Tensor::from_vec(Shape::new(s.batch, s.channels, oh, ow), out).expect("upsampled length")
}

/// Sums each 2×2 block of the upsampled gradient.
pub fn upsample_nearest2x_backward<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let s = grad_out.shape();
    if !s.height.is_multiple_of(2) || !s.width.is_multiple_of(2) {
        return Err(shape_err!("upsample grad_out {s} has odd spatial dims"));
    }
    let (h, w) = (s.height / 2, s.width / 2);
    let g = grad_out.data();
    let mut dx = Vec::with_capacity(s.batch * s.channels * h * w);
    for plane in 0..s.batch * s.channels {
        let base = plane * s.height * s.width;
        for y in 0..h {
            for x in 0..w {
                let top = base + 2 * y * s.width + 2 * x;
                dx.push(g[top] + g[top + 1] + g[top + s.width] + g[top + s.width + 1]);
            }
        }
    }
    Tensor::from_vec(Shape::new(s.batch, s.channels, h, w), dx)
}
