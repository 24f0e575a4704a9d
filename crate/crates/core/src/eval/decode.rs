use serde::Serialize;

use crate::error::{shape_err, Result};
use crate::pipeline::Affine2;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DecodedJoint {
    pub x: f64,
    pub y: f64,
    /// Peak heatmap value.
    pub confidence: f64,
}

/// Decodes sample `n` of an `N×J×H×W` heatmap batch. Each joint takes its
/// argmax cell (first in row-major order on ties), optionally nudged a
/// quarter cell toward the larger neighbor along each axis when both
/// neighbors exist, then `cell × stride` is mapped through `meta`.
pub fn decode_heatmaps<T: Scalar>(
    heatmaps: &Tensor<T>,
    n: usize,
    meta: &Affine2,
    stride: f64,
    quarter_offset: bool,
) -> Result<Vec<DecodedJoint>> {
    let s = heatmaps.shape();
    if n >= s.batch {
        return Err(shape_err!("sample {n} out of range for heatmaps {s}"));
    }
    let (h, w) = (s.height, s.width);
    Ok((0..s.channels)
        .map(|c| {
            let plane = heatmaps.plane(n, c);
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            let (row, col) = (best / w, best % w);
            let (mut x, mut y) = (col as f64, row as f64);
            if quarter_offset {
                if col > 0 && col + 1 < w {
                    let (l, r) = (plane[best - 1], plane[best + 1]);
                    x += 0.25 * sign(r - l);
                }
                if row > 0 && row + 1 < h {
                    let (u, d) = (plane[best - w], plane[best + w]);
                    y += 0.25 * sign(d - u);
                }
            }
            let (x, y) = meta.apply(x * stride, y * stride);
            DecodedJoint {
                x,
                y,
                confidence: plane[best].as_f64(),
            }
        })
        .collect())
}

fn sign<T: Scalar>(d: T) -> f64 {
    if d > T::zero() {
        1.0
    } else if d < T::zero() {
        -1.0
    } else {
        0.0
    }
}
