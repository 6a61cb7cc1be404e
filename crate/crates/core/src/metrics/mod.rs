//! Voxel-wise (DSC, PPV) and lesion-wise (LTPR, LFPR) evaluation.
//!
//! Undefined ratios (empty denominators) are `NaN` and are skipped when
//! averaging; the number of skipped values is tracked per measure.

pub mod components;
mod report;

use crate::error::{Error, Result};
use crate::volume::{Dims, Mask};

pub use components::{connected_components, neighbor_offsets};
pub use report::{
    fmt_metric, seen_unseen_table, summary_table, Aggregate, MetricsReport, SubjectMetrics,
    METRIC_NAMES, SUBJECT_HEADER, SUMMARY_HEADER,
};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_CONNECTIVITY: usize = 26;

/// `prob >= threshold`.
pub fn binarize(probs: &[f64], dims: Dims, threshold: f64) -> Result<Mask> {
    Mask::new(dims, probs.iter().map(|&p| (p >= threshold) as u8).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Voxel-wise counts over raw byte masks; both must be binary.
pub fn confusion_slices(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "confusion",
            left: vec![pred.len()],
            right: vec![gt.len()],
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => return Err(Error::invalid(format!("non-binary mask values ({p}, {g})"))),
        }
    }
    Ok(c)
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch {
            op: "confusion",
            left: pred.dims().to_vec(),
            right: gt.dims().to_vec(),
        });
    }
    confusion_slices(pred.data(), gt.data())
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

/// `2tp / (2tp + fp + fn)`.
pub fn dsc(c: &ConfusionCounts) -> f64 {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

/// `tp / (tp + fp)`.
pub fn ppv(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fp)
}

/// Lesion-wise rates `(ltpr, lfpr)`: a ground-truth lesion is detected when
/// any predicted voxel overlaps it; a predicted component is a false
/// positive when it overlaps no ground-truth voxel.
pub fn lesion_rates(pred: &Mask, gt: &Mask, connectivity: usize) -> Result<(f64, f64)> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch {
            op: "lesion_rates",
            left: pred.dims().to_vec(),
            right: gt.dims().to_vec(),
        });
    }
    let (gt_labels, n_gt) = connected_components(gt, connectivity)?;
    let (pred_labels, n_pred) = connected_components(pred, connectivity)?;
    let mut gt_hit = vec![false; n_gt + 1];
    let mut pred_hit = vec![false; n_pred + 1];
    for i in 0..gt.len() {
        if pred.data()[i] != 0 && gt.data()[i] != 0 {
            gt_hit[gt_labels[i] as usize] = true;
            pred_hit[pred_labels[i] as usize] = true;
        }
    }
    let detected = gt_hit[1..].iter().filter(|&&h| h).count() as u64;
    let false_pos = pred_hit[1..].iter().filter(|&&h| !h).count() as u64;
    Ok((ratio(detected, n_gt as u64), ratio(false_pos, n_pred as u64)))
}

/// All four measures for one binary prediction.
pub fn evaluate_masks(pred: &Mask, gt: &Mask, connectivity: usize) -> Result<[f64; 4]> {
    let c = confusion(pred, gt)?;
    let (ltpr, lfpr) = lesion_rates(pred, gt, connectivity)?;
    Ok([dsc(&c), ltpr, lfpr, ppv(&c)])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(data: &[u8]) -> Mask {
        Mask::new([1, 1, data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn binarize_rules() {
        let m = binarize(&[0.7; 4], [1, 2, 2], 0.5).unwrap();
        assert_eq!(m.count(), 4);
        let m = binarize(&[1.0, 0.999, 0.5], [1, 1, 3], 1.0).unwrap();
        assert_eq!(m.data(), &[1, 0, 0]);
        let m = binarize(&[0.5, 0.4999], [1, 1, 2], 0.5).unwrap();
        assert_eq!(m.data(), &[1, 0]);
    }

    #[test]
    fn confusion_cases() {
        let gt = mask(&[1, 0, 1, 0]);
        let c = confusion(&gt, &gt).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let inv = mask(&[0, 1, 0, 1]);
        let c = confusion(&inv, &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        let c = confusion(&mask(&[1, 1, 1, 0]), &mask(&[1, 1, 0, 1])).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 2, fp: 1, fn_: 1, tn: 0 });
        assert!((dsc(&c) - 2.0 / 3.0).abs() < 1e-12);
        assert!((ppv(&c) - 2.0 / 3.0).abs() < 1e-12);
        assert!(confusion_slices(&[2, 0], &[1, 0]).is_err());
        assert!(confusion(&mask(&[1]), &mask(&[1, 0])).is_err());
    }

    #[test]
    fn perfect_and_empty() {
        let gt = mask(&[1, 1, 0]);
        let c = confusion(&gt, &gt).unwrap();
        assert_eq!((dsc(&c), ppv(&c)), (1.0, 1.0));
        let z = mask(&[0, 0, 0]);
        let c = confusion(&z, &z).unwrap();
        assert!(dsc(&c).is_nan() && ppv(&c).is_nan());
    }

    fn cube(m: &mut Mask, at: [usize; 3], side: usize) {
        for z in at[0]..at[0] + side {
            for y in at[1]..at[1] + side {
                for x in at[2]..at[2] + side {
                    m.set(z, y, x, true);
                }
            }
        }
    }

    #[test]
    fn lesion_rate_cases() {
        let mut gt = Mask::zeros([16; 3]);
        cube(&mut gt, [1, 1, 1], 3);
        cube(&mut gt, [8, 8, 8], 2);
        cube(&mut gt, [12, 1, 12], 2);
        let (ltpr, lfpr) = lesion_rates(&gt, &gt, 26).unwrap();
        assert_eq!((ltpr, lfpr), (1.0, 0.0));

        let mut gt2 = Mask::zeros([16; 3]);
        cube(&mut gt2, [1, 1, 1], 3);
        cube(&mut gt2, [8, 8, 8], 2);
        let mut pred = Mask::zeros([16; 3]);
        cube(&mut pred, [2, 2, 2], 1);
        cube(&mut pred, [12, 12, 12], 2);
        cube(&mut pred, [1, 12, 1], 2);
        let (ltpr, lfpr) = lesion_rates(&pred, &gt2, 26).unwrap();
        assert_eq!(ltpr, 0.5);
        assert!((lfpr - 2.0 / 3.0).abs() < 1e-12);

        let (ltpr, lfpr) = lesion_rates(&Mask::zeros([16; 3]), &gt2, 26).unwrap();
        assert_eq!(ltpr, 0.0);
        assert!(lfpr.is_nan());
    }
}
