use std::collections::BTreeSet;

use super::TrainConfig;
use crate::autodiff::Tensor;
use crate::error::Result;
use crate::metrics::{binarize, evaluate_masks, MetricsReport, SubjectMetrics};
use crate::networks::{predict_lesion, ModelBundle};
use crate::patchflow::{crop_volume, extract_grid, fuse, Fused};
use crate::synthdata::VolumeSample;
use crate::volume::Dims;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub extent: usize,
    pub overlap: f64,
    pub threshold: f64,
    pub connectivity: usize,
}

impl From<&TrainConfig> for EvalSettings {
    fn from(c: &TrainConfig) -> Self {
        EvalSettings {
            extent: c.patch_extent,
            overlap: c.overlap,
            threshold: c.threshold,
            connectivity: c.connectivity,
        }
    }
}

/// Anything that maps a patch to a lesion probability cube `[e, e, e]`.
pub trait Segmenter {
    fn predict(&self, sample: &VolumeSample, origin: Dims, patch: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Segmenter for ModelBundle<f32> {
    fn predict(&self, _: &VolumeSample, _: Dims, patch: &Tensor<f32>) -> Result<Tensor<f32>> {
        predict_lesion(self, patch)
    }
}

/// Full-volume probabilities from every grid patch.
pub fn predict_volume(seg: &dyn Segmenter, sample: &VolumeSample, s: &EvalSettings) -> Result<Fused> {
    let dims = sample.dims();
    let grid = extract_grid(dims, s.extent, s.overlap)?;
    let mut preds = Vec::with_capacity(grid.len());
    for origin in grid {
        let patch = crop_volume(&sample.volume, origin, s.extent)?;
        preds.push((origin, seg.predict(sample, origin, &patch)?));
    }
    fuse(&preds, dims)
}

pub fn evaluate_subject(seg: &dyn Segmenter, sample: &VolumeSample, s: &EvalSettings) -> Result<[f64; 4]> {
    let fused = predict_volume(seg, sample, s)?;
    let pred = binarize(&fused.probs, fused.dims, s.threshold)?;
    evaluate_masks(&pred, &sample.mask, s.connectivity)
}

/// Per-subject metrics; `seen` marks subjects whose site was trained on.
pub fn evaluate(
    seg: &dyn Segmenter,
    subjects: &[&VolumeSample],
    seen_sites: &BTreeSet<u32>,
    s: &EvalSettings,
) -> Result<MetricsReport> {
    let rows = subjects
        .iter()
        .map(|sample| {
            let v = evaluate_subject(seg, sample, s)?;
            Ok(SubjectMetrics::new(
                sample.subject_id,
                sample.site_id,
                seen_sites.contains(&sample.site_id),
                v,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::new(rows))
}

/// Mean DSC over subjects (NaN when none is defined).
pub fn mean_dsc(seg: &dyn Segmenter, subjects: &[&VolumeSample], s: &EvalSettings) -> Result<f64> {
    let report = evaluate(seg, subjects, &BTreeSet::new(), s)?;
    Ok(report.overall.dsc())
}
