//! Affine maps between image and crop coordinates, center cropping, and
//! geometric augmentation.

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::annotation::{Annotation, Joint, FLIP_PAIRS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Nominal person height in pixels at `scale = 1`.
pub const SCALE_PIXELS: f64 = 200.0;

/// `p ↦ [a b; c d]·p + [tx; ty]`, stored row-major as `[a, b, tx, c, d, ty]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine2(pub [f64; 6]);

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn scale_translate(scale: f64, tx: f64, ty: f64) -> Self {
        Affine2([scale, 0.0, tx, 0.0, scale, ty])
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let [a, b, tx, c, d, ty] = self.0;
        (a * x + b * y + tx, c * x + d * y + ty)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Affine2) -> Affine2 {
        let [a, b, tx, c, d, ty] = self.0;
        let [e, f, ux, g, h, uy] = other.0;
        Affine2([
            a * e + b * g,
            a * f + b * h,
            a * ux + b * uy + tx,
            c * e + d * g,
            c * f + d * h,
            c * ux + d * uy + ty,
        ])
    }

    pub fn inverse(&self) -> Result<Affine2> {
        let [a, b, tx, c, d, ty] = self.0;
        let det = a * d - b * c;
        if det.abs() < 1e-12 {
            return Err(Error::Geometry(format!("affine map {:?} is singular", self.0)));
        }
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Ok(Affine2([ia, ib, -(ia * tx + ib * ty), ic, id, -(ic * tx + id * ty)]))
    }
}

/// Bilinear sample of plane `data` (`h×w`) at `(x, y)`, zero outside.
fn bilinear(data: &[f32], h: usize, w: usize, x: f64, y: f64) -> f32 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
    let at = |xi: f64, yi: f64| -> f32 {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            0.0
        } else {
            data[yi as usize * w + xi as usize]
        }
    };
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1.0, y0) * fx;
    let bottom = at(x0, y0 + 1.0) * (1.0 - fx) + at(x0 + 1.0, y0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Fills a `1×C×res×res` tensor with `planes` sampled at `map(j, i)` for each output pixel.
fn resample(planes: &[Vec<f32>], h: usize, w: usize, res: usize, map: &Affine2) -> Tensor<f32> {
    let mut out = Tensor::zeros([1, planes.len(), res, res]);
    let data = out.data_mut();
    for (c, plane) in planes.iter().enumerate() {
        for i in 0..res {
            for j in 0..res {
                let (x, y) = map.apply(j as f64, i as f64);
                data[(c * res + i) * res + j] = bilinear(plane, h, w, x, y);
            }
        }
    }
    out
}

fn image_planes(image: &RgbImage) -> Vec<Vec<f32>> {
    (0..3)
        .map(|c| image.pixels().map(|p| p.0[c] as f32 / 255.0).collect())
        .collect()
}

/// A person crop: the network input plus joints in crop pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    /// `1×3×res×res`, values in [0, 1].
    pub input: Tensor<f32>,
    pub joints: Vec<Joint>,
    /// Head box corners in crop pixels.
    pub head_box: [f64; 4],
    /// Crop pixels → original image pixels.
    pub meta: Affine2,
}

/// Crop → image map for a square crop of side `200·scale` around `center`.
pub fn crop_transform(annotation: &Annotation, res: usize) -> Result<Affine2> {
    let side = SCALE_PIXELS * annotation.scale;
    if !(side >= 2.0) {
        return Err(Error::Geometry(format!("crop side {side} px is degenerate")));
    }
    let k = side / res as f64;
    let [cx, cy] = annotation.center;
    Ok(Affine2::scale_translate(k, cx - side / 2.0, cy - side / 2.0))
}

/// Square crop of side `200·scale` around the annotated center, zero padded
/// and bilinearly resized to `res×res`.
pub fn crop_and_resize(image: &RgbImage, annotation: &Annotation, res: usize) -> Result<Crop> {
    let meta = crop_transform(annotation, res)?;
    let to_crop = meta.inverse()?;
    let (w, h) = (image.width() as usize, image.height() as usize);
    let input = resample(&image_planes(image), h, w, res, &meta);
    let joints = annotation
        .joints
        .iter()
        .map(|j| {
            let (x, y) = to_crop.apply(j.x, j.y);
            Joint::new(x, y, j.visible)
        })
        .collect();
    let [x1, y1, x2, y2] = annotation.head_box;
    let (a, b) = to_crop.apply(x1, y1);
    let (c, d) = to_crop.apply(x2, y2);
    Ok(Crop {
        input,
        joints,
        head_box: [a, b, c, d],
        meta,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub scale: f64,
    pub flip: bool,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        rotation_deg: 0.0,
        scale: 1.0,
        flip: false,
    };

    /// Rotation in [−30°, 30°], scale in [0.75, 1.25], flip with probability ½.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        AugmentParams {
            rotation_deg: rng.gen_range(-30.0..=30.0),
            scale: rng.gen_range(0.75..=1.25),
            flip: rng.gen_bool(0.5),
        }
    }

    /// Old crop pixels → augmented crop pixels, rotating and scaling about
    /// `(res/2, res/2)` and then mirroring `x ↦ res − 1 − x`.
    pub fn transform(&self, res: usize) -> Affine2 {
        let c = res as f64 / 2.0;
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let (s, cs) = (self.scale * sin, self.scale * cos);
        let rot = Affine2([cs, -s, c - cs * c + s * c, s, cs, c - s * c - cs * c]);
        if self.flip {
            Affine2([-1.0, 0.0, res as f64 - 1.0, 0.0, 1.0, 0.0]).compose(&rot)
        } else {
            rot
        }
    }
}

/// Applies `params` to a crop. Joints that leave the crop become invisible;
/// with a flip, left and right joints swap indices.
pub fn augment_crop(crop: &Crop, params: &AugmentParams) -> Result<Crop> {
    if *params == AugmentParams::IDENTITY {
        return Ok(crop.clone());
    }
    let s = crop.input.shape();
    let res = s.height;
    let forward = params.transform(res);
    let backward = forward.inverse()?;
    let planes: Vec<Vec<f32>> = (0..s.channels).map(|c| crop.input.plane(0, c).to_vec()).collect();
    let input = resample(&planes, res, s.width, res, &backward);
    let inside = |v: f64| v >= 0.0 && v < res as f64;
    let mut joints: Vec<Joint> = crop
        .joints
        .iter()
        .map(|j| {
            let (x, y) = forward.apply(j.x, j.y);
            Joint::new(x, y, j.visible && inside(x) && inside(y))
        })
        .collect();
    if params.flip {
        for (a, b) in FLIP_PAIRS {
            joints.swap(a, b);
        }
    }
    let [x1, y1, x2, y2] = crop.head_box;
    let corners = [(x1, y1), (x2, y1), (x1, y2), (x2, y2)].map(|(x, y)| forward.apply(x, y));
    let xs = corners.map(|p| p.0);
    let ys = corners.map(|p| p.1);
    let min = |v: [f64; 4]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |v: [f64; 4]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(Crop {
        input,
        joints,
        head_box: [min(xs), min(ys), max(xs), max(ys)],
        meta: crop.meta.compose(&backward),
    })
}
