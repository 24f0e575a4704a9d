//! Line-delimited JSON person annotations.
//!
//! One record per line:
//! `{"image": "img_0001.png", "center": [x, y], "scale": s, "joints": [[x, y, v], ...], "head_box": [x1, y1, x2, y2]}`
//! with 16 joints in the usual MPII order and `v` ∈ {0, 1}.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 16;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "r_ankle",
    "r_knee",
    "r_hip",
    "l_hip",
    "l_knee",
    "l_ankle",
    "pelvis",
    "thorax",
    "upper_neck",
    "head_top",
    "r_wrist",
    "r_elbow",
    "r_shoulder",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
];

/// Left/right joint pairs swapped by a horizontal flip.
pub const FLIP_PAIRS: [(usize, usize); 6] = [(0, 5), (1, 4), (2, 3), (10, 15), (11, 14), (12, 13)];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Joint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl Joint {
    pub fn new(x: f64, y: f64, visible: bool) -> Self {
        Joint { x, y, visible }
    }
}

impl From<[f64; 3]> for Joint {
    fn from([x, y, v]: [f64; 3]) -> Self {
        Joint { x, y, visible: v != 0.0 }
    }
}

impl From<Joint> for [f64; 3] {
    fn from(j: Joint) -> Self {
        [j.x, j.y, if j.visible { 1.0 } else { 0.0 }]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    /// Image path, relative to the annotation file's directory.
    pub image: String,
    pub center: [f64; 2],
    /// Person height is about `200 · scale` pixels.
    pub scale: f64,
    pub joints: Vec<Joint>,
    pub head_box: [f64; 4],
}

const FIELDS: [&str; 5] = ["image", "center", "scale", "joints", "head_box"];

impl Annotation {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Validation(format!("scale must be positive, got {}", self.scale)));
        }
        if self.joints.len() != NUM_JOINTS {
            return Err(Error::Validation(format!(
                "expected {NUM_JOINTS} joints, got {}",
                self.joints.len()
            )));
        }
        let [x1, y1, x2, y2] = self.head_box;
        if !(x2 > x1 && y2 > y1) {
            return Err(Error::Validation(format!(
                "head_box {:?} has non-positive width or height",
                self.head_box
            )));
        }
        let finite = self.center.iter().chain(&self.head_box).all(|v| v.is_finite())
            && self.joints.iter().all(|j| !j.visible || (j.x.is_finite() && j.y.is_finite()));
        if !finite {
            return Err(Error::Validation("non-finite coordinate".into()));
        }
        Ok(())
    }

    /// PCKh normalizer: 0.6 × the head box diagonal.
    pub fn head_size(&self) -> f64 {
        let [x1, y1, x2, y2] = self.head_box;
        0.6 * (x2 - x1).hypot(y2 - y1)
    }
}

fn parse_line(line: &str, number: usize) -> Result<Annotation> {
    let parse_err = |message: String| Error::Parse { line: number, message };
    let value: Value = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
    let object = value
        .as_object()
        .ok_or_else(|| parse_err("record is not an object".into()))?;
    if let Some(missing) = FIELDS.iter().find(|f| !object.contains_key(**f)) {
        return Err(parse_err(format!("missing field `{missing}`")));
    }
    for j in object["joints"].as_array().into_iter().flatten() {
        let v = j.get(2).and_then(Value::as_f64);
        if !matches!(v, Some(v) if v == 0.0 || v == 1.0) {
            return Err(parse_err(format!("joint visibility must be 0 or 1 in {j}")));
        }
    }
    let ann: Annotation = serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?;
    ann.validate().map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("line {number}: {m}")),
        other => other,
    })?;
    Ok(ann)
}

/// Parses annotation text. Strict mode stops at the first bad line; lenient
/// mode skips bad lines and returns their errors alongside the good records.
pub fn parse_annotations_str(text: &str, lenient: bool) -> Result<(Vec<Annotation>, Vec<Error>)> {
    let mut good = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line, i + 1) {
            Ok(a) => good.push(a),
            Err(e) if lenient => bad.push(e),
            Err(e) => return Err(e),
        }
    }
    Ok((good, bad))
}

pub fn parse_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_annotations_str(&text, false)?.0)
}

pub fn parse_annotations_lenient(path: &Path) -> Result<(Vec<Annotation>, Vec<Error>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations_str(&text, true)
}

pub fn annotations_to_string(annotations: &[Annotation]) -> String {
    let mut out = String::new();
    for a in annotations {
        out.push_str(&serde_json::to_string(a).expect("annotations always serialize"));
        out.push('\n');
    }
    out
}

pub fn write_annotations(path: &Path, annotations: &[Annotation]) -> Result<()> {
    fs::write(path, annotations_to_string(annotations)).map_err(|e| Error::io(path, e))
}
