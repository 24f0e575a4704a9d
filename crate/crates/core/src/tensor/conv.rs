use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{matmul, Scalar, Shape, Tensor};
use crate::error::{shape_err, Error, Result};

/// Square-kernel 2-D convolution (cross-correlation, no kernel flip).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride 1, no padding, no dilation, dense, no bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
            bias: false,
        }
    }

    /// 1×1 channel-mixing convolution.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, 1)
    }

    /// One `kernel×kernel` filter per channel, padded to preserve spatial size.
    pub fn depthwise(channels: usize, kernel: usize, dilation: usize) -> Self {
        ConvSpec {
            groups: channels,
            dilation,
            padding: dilation * (kernel - 1) / 2,
            ..Self::new(channels, channels, kernel)
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("kernel", self.kernel),
            ("stride", self.stride),
            ("dilation", self.dilation),
            ("groups", self.groups),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("conv {name} must be positive")));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "conv channels {}→{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.out_channels == self.in_channels
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_per_group(),
            self.kernel,
            self.kernel,
        )
    }

    pub fn fan_in(&self) -> usize {
        self.in_per_group() * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.fan_in() + if self.bias { self.out_channels } else { 0 }
    }

    /// Output spatial size for an `h×w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let dim = |len: usize, axis: &str| {
            let padded = len + 2 * self.padding;
            if padded < span {
                Err(Error::Geometry(format!(
                    "{axis} {len} with padding {} is smaller than the dilated kernel span {span}",
                    self.padding
                )))
            } else {
                Ok((padded - span) / self.stride + 1)
            }
        };
        Ok((dim(h, "height")?, dim(w, "width")?))
    }

    /// Multiply-accumulates for one sample of size `h×w` (bias adds excluded).
    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let (oh, ow) = self.output_hw(h, w)?;
        Ok((self.out_channels * self.fan_in()) as u64 * (oh * ow) as u64)
    }
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

#[derive(Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

fn check_args<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
) -> Result<Geometry> {
    spec.validate()?;
    let s = input.shape();
    if s.channels != spec.in_channels {
        return Err(shape_err!(
            "conv expects {} input channels, got input {s}",
            spec.in_channels
        ));
    }
    if weights.shape() != spec.weight_shape() {
        return Err(shape_err!(
            "conv weights are {}, expected {}",
            weights.shape(),
            spec.weight_shape()
        ));
    }
    let (oh, ow) = spec.output_hw(s.height, s.width)?;
    Ok(Geometry {
        h: s.height,
        w: s.width,
        oh,
        ow,
    })
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let g = check_args(input, spec, weights)?;
    if bias.is_some() != spec.bias {
        return Err(shape_err!(
            "conv bias presence ({}) disagrees with spec ({})",
            bias.is_some(),
            spec.bias
        ));
    }
    if let Some(b) = bias {
        if b.shape() != Shape::vector(spec.out_channels) {
            return Err(shape_err!(
                "conv bias is {}, expected {}",
                b.shape(),
                Shape::vector(spec.out_channels)
            ));
        }
    }
    let batch = input.shape().batch;
    let in_len = spec.in_channels * g.h * g.w;
    let out_len = spec.out_channels * g.oh * g.ow;
    let x = input.data();
    let w = weights.data();

    let per_sample: Vec<Vec<T>> = (0..batch)
        .into_par_iter()
        .map(|n| {
            let mut out = vec![T::zero(); out_len];
            forward_sample(&x[n * in_len..(n + 1) * in_len], spec, g, w, &mut out);
            if let Some(b) = bias {
                let plane = g.oh * g.ow;
                for (c, chunk) in out.chunks_mut(plane).enumerate() {
                    let bv = b.data()[c];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
            out
        })
        .collect();

    let data = per_sample.concat();
    Tensor::from_vec(Shape::new(batch, spec.out_channels, g.oh, g.ow), data)
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = check_args(input, spec, weights)?;
    let batch = input.shape().batch;
    let expected = Shape::new(batch, spec.out_channels, g.oh, g.ow);
    if grad_out.shape() != expected {
        return Err(shape_err!(
            "conv grad_out is {}, forward output was {expected}",
            grad_out.shape()
        ));
    }
    let in_len = spec.in_channels * g.h * g.w;
    let out_len = spec.out_channels * g.oh * g.ow;
    let x = input.data();
    let w = weights.data();
    let dy = grad_out.data();

    let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..batch)
        .into_par_iter()
        .map(|n| {
            let mut dx = vec![T::zero(); in_len];
            let mut dw = vec![T::zero(); w.len()];
            backward_sample(
                &x[n * in_len..(n + 1) * in_len],
                spec,
                g,
                w,
                &dy[n * out_len..(n + 1) * out_len],
                &mut dx,
                &mut dw,
            );
            (dx, dw)
        })
        .collect();

    // Fixed reduction order over the batch keeps results bit-reproducible.
    let mut grad_w = vec![T::zero(); w.len()];
    let mut grad_x = Vec::with_capacity(batch * in_len);
    for (dx, dw) in per_sample {
        grad_x.extend_from_slice(&dx);
        grad_w.iter_mut().zip(&dw).for_each(|(a, &b)| *a += b);
    }

    let grad_bias = spec.bias.then(|| {
        let plane = g.oh * g.ow;
        let mut gb = vec![T::zero(); spec.out_channels];
        for n in 0..batch {
            for (c, acc) in gb.iter_mut().enumerate() {
                let start = n * out_len + c * plane;
                *acc += dy[start..start + plane].iter().copied().sum::<T>();
            }
        }
        Tensor::from_vec(Shape::vector(spec.out_channels), gb).expect("bias length")
    });

    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape(), grad_x)?,
        weights: Tensor::from_vec(weights.shape(), grad_w)?,
        bias: grad_bias,
    })
}

fn is_plain_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel == 1 && spec.stride == 1 && spec.padding == 0
}

fn forward_sample<T: Scalar>(x: &[T], spec: &ConvSpec, g: Geometry, w: &[T], out: &mut [T]) {
    if spec.is_depthwise() {
        depthwise_forward(x, spec, g, w, out);
        return;
    }
    let cin = spec.in_per_group();
    let cout = spec.out_per_group();
    let k_len = cin * spec.kernel * spec.kernel;
    let n_len = g.oh * g.ow;
    let mut cols = if is_plain_pointwise(spec) {
        Vec::new()
    } else {
        vec![T::zero(); k_len * n_len]
    };
    for grp in 0..spec.groups {
        let xg = &x[grp * cin * g.h * g.w..(grp + 1) * cin * g.h * g.w];
        let wg = &w[grp * cout * k_len..(grp + 1) * cout * k_len];
        let og = &mut out[grp * cout * n_len..(grp + 1) * cout * n_len];
        let b: &[T] = if is_plain_pointwise(spec) {
            xg
        } else {
            im2col(xg, cin, spec, g, &mut cols);
            &cols
        };
        matmul(cout, k_len, n_len, wg, false, b, false, og, false);
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_sample<T: Scalar>(
    x: &[T],
    spec: &ConvSpec,
    g: Geometry,
    w: &[T],
    dy: &[T],
    dx: &mut [T],
    dw: &mut [T],
) {
    if spec.is_depthwise() {
        depthwise_backward(x, spec, g, w, dy, dx, dw);
        return;
    }
    let cin = spec.in_per_group();
    let cout = spec.out_per_group();
    let k_len = cin * spec.kernel * spec.kernel;
    let n_len = g.oh * g.ow;
    let plain = is_plain_pointwise(spec);
    let mut cols = if plain { Vec::new() } else { vec![T::zero(); k_len * n_len] };
    let mut dcols = if plain { Vec::new() } else { vec![T::zero(); k_len * n_len] };
    let in_group = cin * g.h * g.w;
    for grp in 0..spec.groups {
        let xg = &x[grp * in_group..(grp + 1) * in_group];
        let wg = &w[grp * cout * k_len..(grp + 1) * cout * k_len];
        let dyg = &dy[grp * cout * n_len..(grp + 1) * cout * n_len];
        let dwg = &mut dw[grp * cout * k_len..(grp + 1) * cout * k_len];
        let dxg = &mut dx[grp * in_group..(grp + 1) * in_group];
        if plain {
            matmul(cout, n_len, k_len, dyg, false, xg, true, dwg, true);
            matmul(k_len, cout, n_len, wg, true, dyg, false, dxg, false);
        } else {
            im2col(xg, cin, spec, g, &mut cols);
            matmul(cout, n_len, k_len, dyg, false, &cols, true, dwg, true);
            matmul(k_len, cout, n_len, wg, true, dyg, false, &mut dcols, false);
            col2im(&dcols, cin, spec, g, dxg);
        }
    }
}

/// Input column index for output index `o` and kernel tap `t`, if inside the image.
#[inline]
fn source_index(o: usize, t: usize, spec: &ConvSpec, len: usize) -> Option<usize> {
    let pos = o * spec.stride + t * spec.dilation;
    if pos < spec.padding || pos - spec.padding >= len {
        None
    } else {
        Some(pos - spec.padding)
    }
}

fn im2col<T: Scalar>(x: &[T], channels: usize, spec: &ConvSpec, g: Geometry, cols: &mut [T]) {
    let k = spec.kernel;
    let n_len = g.oh * g.ow;
    for c in 0..channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * n_len..(row + 1) * n_len];
                for oy in 0..g.oh {
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    match source_index(oy, ki, spec, g.h) {
                        None => drow.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                *d = match source_index(ox, kj, spec, g.w) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], channels: usize, spec: &ConvSpec, g: Geometry, dx: &mut [T]) {
    let k = spec.kernel;
    let n_len = g.oh * g.ow;
    dx.fill(T::zero());
    for c in 0..channels {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * n_len..(row + 1) * n_len];
                for oy in 0..g.oh {
                    let Some(iy) = source_index(oy, ki, spec, g.h) else {
                        continue;
                    };
                    let srow = &src[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, &v) in srow.iter().enumerate() {
                        if let Some(ix) = source_index(ox, kj, spec, g.w) {
                            plane[iy * g.w + ix] += v;
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Scalar>(x: &[T], spec: &ConvSpec, g: Geometry, w: &[T], out: &mut [T]) {
    let k = spec.kernel;
    for c in 0..spec.in_channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let o = &mut out[c * g.oh * g.ow..(c + 1) * g.oh * g.ow];
        let taps = &w[c * k * k..(c + 1) * k * k];
        for ki in 0..k {
            for kj in 0..k {
                let wv = taps[ki * k + kj];
                for oy in 0..g.oh {
                    let Some(iy) = source_index(oy, ki, spec, g.h) else {
                        continue;
                    };
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let orow = &mut o[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, ov) in orow.iter_mut().enumerate() {
                        if let Some(ix) = source_index(ox, kj, spec, g.w) {
                            *ov += wv * src[ix];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward<T: Scalar>(
    x: &[T],
    spec: &ConvSpec,
    g: Geometry,
    w: &[T],
    dy: &[T],
    dx: &mut [T],
    dw: &mut [T],
) {
    let k = spec.kernel;
    for c in 0..spec.in_channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let dplane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        let dyc = &dy[c * g.oh * g.ow..(c + 1) * g.oh * g.ow];
        for ki in 0..k {
            for kj in 0..k {
                let wv = w[c * k * k + ki * k + kj];
                let mut acc = T::zero();
                for oy in 0..g.oh {
                    let Some(iy) = source_index(oy, ki, spec, g.h) else {
                        continue;
                    };
                    for ox in 0..g.ow {
                        if let Some(ix) = source_index(ox, kj, spec, g.w) {
                            let gy = dyc[oy * g.ow + ox];
                            acc += gy * plane[iy * g.w + ix];
                            dplane[iy * g.w + ix] += gy * wv;
                        }
                    }
                }
                dw[c * k * k + ki * k + kj] += acc;
            }
        }
    }
}
