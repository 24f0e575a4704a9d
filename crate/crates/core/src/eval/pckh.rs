use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{shape_err, Result};
use crate::pipeline::Annotation;

/// Report columns and the joints pooled into each (left and right together).
pub const GROUPS: [(&str, [usize; 2]); 7] = [
    ("Head", [8, 9]),
    ("Shoulder", [12, 13]),
    ("Elbow", [11, 14]),
    ("Wrist", [10, 15]),
    ("Hip", [2, 3]),
    ("Knee", [1, 4]),
    ("Ankle", [0, 5]),
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupScore {
    pub name: &'static str,
    pub correct: usize,
    pub total: usize,
}

impl GroupScore {
    /// `None` when no joint of the group was evaluated.
    pub fn percent(&self) -> Option<f64> {
        (self.total > 0).then(|| 100.0 * self.correct as f64 / self.total as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PckhReport {
    pub threshold: f64,
    pub groups: Vec<GroupScore>,
    /// Unweighted mean of the group percentages (groups with no evaluated joints left out).
    pub mean: f64,
    /// Percentage over all evaluated joints.
    pub joint_weighted_mean: f64,
    /// Images skipped because their head size is zero.
    pub skipped_images: Vec<usize>,
}

impl PckhReport {
    pub fn csv_header() -> String {
        let names: Vec<&str> = GROUPS.iter().map(|g| g.0).collect();
        format!("{},Mean", names.join(","))
    }

    pub fn csv_row(&self) -> String {
        let mut row = String::new();
        for g in &self.groups {
            if let Some(p) = g.percent() {
                let _ = write!(row, "{p:.2}");
            }
            row.push(',');
        }
        let _ = write!(row, "{:.2}", self.mean);
        row
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::csv_header(), self.csv_row())
    }
}

/// Whether a prediction lies within `threshold × head_size` of the truth.
pub fn is_correct(pred: [f64; 2], truth: [f64; 2], head_size: f64, threshold: f64) -> bool {
    (pred[0] - truth[0]).hypot(pred[1] - truth[1]) <= threshold * head_size
}

/// PCKh over images; `predictions[i][j]` is joint `j` of image `i` in
/// original-image pixels. Invisible joints are not evaluated.
pub fn pckh(predictions: &[Vec<[f64; 2]>], annotations: &[Annotation], threshold: f64) -> Result<PckhReport> {
    if predictions.len() != annotations.len() {
        return Err(shape_err!(
            "{} predictions for {} annotations",
            predictions.len(),
            annotations.len()
        ));
    }
    if let Some((i, p)) = predictions
        .iter()
        .enumerate()
        .find(|(i, p)| p.len() != annotations[*i].joints.len())
    {
        return Err(shape_err!(
            "image {i}: {} predicted joints, {} annotated",
            p.len(),
            annotations[i].joints.len()
        ));
    }
    // per image: Some([(correct, total); 7]) or None when skipped
    let per_image: Vec<Option<[(usize, usize); 7]>> = predictions
        .par_iter()
        .zip(annotations)
        .map(|(pred, ann)| {
            let head = ann.head_size();
            if !(head > 0.0) {
                return None;
            }
            let mut counts = [(0, 0); 7];
            for (g, (_, joints)) in GROUPS.iter().enumerate() {
                for &j in joints {
                    let truth = &ann.joints[j];
                    if !truth.visible {
                        continue;
                    }
                    counts[g].1 += 1;
                    if is_correct(pred[j], [truth.x, truth.y], head, threshold) {
                        counts[g].0 += 1;
                    }
                }
            }
            Some(counts)
        })
        .collect();

    let mut groups: Vec<GroupScore> = GROUPS
        .iter()
        .map(|(name, _)| GroupScore {
            name,
            correct: 0,
            total: 0,
        })
        .collect();
    let mut skipped_images = Vec::new();
    for (i, counts) in per_image.iter().enumerate() {
        match counts {
            Some(c) => {
                for (g, &(ok, n)) in groups.iter_mut().zip(c) {
                    g.correct += ok;
                    g.total += n;
                }
            }
            None => skipped_images.push(i),
        }
    }
    let scored: Vec<f64> = groups.iter().filter_map(GroupScore::percent).collect();
    let mean = if scored.is_empty() {
        f64::NAN
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    let (ok, total) = groups
        .iter()
        .fold((0, 0), |(a, b), g| (a + g.correct, b + g.total));
    let joint_weighted_mean = if total == 0 {
        f64::NAN
    } else {
        100.0 * ok as f64 / total as f64
    };
    Ok(PckhReport {
        threshold,
        groups,
        mean,
        joint_weighted_mean,
        skipped_images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{Joint, NUM_JOINTS};

    fn ann(head: f64) -> Annotation {
        Annotation {
            image: String::new(),
            center: [50.0, 50.0],
            scale: 1.0,
            joints: (0..NUM_JOINTS).map(|j| Joint::new(j as f64 * 5.0, 40.0, true)).collect(),
            head_box: [0.0, 0.0, head, head],
        }
    }

    fn truth(a: &Annotation) -> Vec<[f64; 2]> {
        a.joints.iter().map(|j| [j.x, j.y]).collect()
    }

    #[test]
    fn perfect_predictions() {
        let anns: Vec<_> = (0..4).map(|i| ann(10.0 + i as f64)).collect();
        let preds: Vec<_> = anns.iter().map(truth).collect();
        let r = pckh(&preds, &anns, 0.5).unwrap();
        assert!(r.groups.iter().all(|g| g.percent() == Some(100.0)));
        assert_eq!(r.mean, 100.0);
        assert_eq!(r.csv_row(), "100.00,100.00,100.00,100.00,100.00,100.00,100.00,100.00");
    }

    #[test]
    fn threshold_boundary() {
        assert!(is_correct([4.9, 0.0], [0.0, 0.0], 10.0, 0.5));
        assert!(!is_correct([5.1, 0.0], [0.0, 0.0], 10.0, 0.5));
    }

    #[test]
    fn zero_head_size_is_skipped() {
        let anns = vec![ann(10.0), ann(0.0)];
        let preds: Vec<_> = anns.iter().map(truth).collect();
        let r = pckh(&preds, &anns, 0.5).unwrap();
        assert_eq!(r.skipped_images, vec![1]);
        assert_eq!(r.groups[0].total, 2);
    }

    #[test]
    fn header_matches_columns() {
        assert_eq!(PckhReport::csv_header(), "Head,Shoulder,Elbow,Wrist,Hip,Knee,Ankle,Mean");
    }
}
