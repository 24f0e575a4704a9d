//! Gaussian heatmap targets.

use super::annotation::Joint;
use crate::tensor::{Scalar, Tensor};

/// Grid cell of a heatmap coordinate, if it lies on a `res×res` grid.
pub fn grid_cell(x: f64, y: f64, res: usize) -> Option<(usize, usize)> {
    let (cx, cy) = (x.round(), y.round());
    let ok = |v: f64| v >= 0.0 && v < res as f64;
    (ok(cx) && ok(cy)).then_some((cx as usize, cy as usize))
}

/// One unnormalized Gaussian per joint (peak 1 at the joint's rounded cell,
/// cut off `⌈3σ⌉` cells from the peak). Joints that are invisible or off the
/// grid get an all-zero channel and weight 0.
///
/// `joints` are in heatmap cells. Returns a `1×J×res×res` tensor and the weights.
pub fn make_targets<T: Scalar>(joints: &[Joint], res: usize, sigma: f64) -> (Tensor<T>, Vec<T>) {
    assert!(sigma > 0.0, "sigma must be positive");
    let radius = (3.0 * sigma).ceil() as isize;
    let mut out = Tensor::zeros([1, joints.len(), res, res]);
    let mut weights = vec![T::zero(); joints.len()];
    let data = out.data_mut();
    for (k, j) in joints.iter().enumerate() {
        let Some((cx, cy)) = grid_cell(j.x, j.y, res).filter(|_| j.visible) else {
            continue;
        };
        weights[k] = T::one();
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let (x, y) = (cx as isize + dx, cy as isize + dy);
                if x < 0 || y < 0 || x >= res as isize || y >= res as isize {
                    continue;
                }
                let d2 = (dx * dx + dy * dy) as f64;
                data[(k * res + y as usize) * res + x as usize] = T::of((-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
    }
    (out, weights)
}
