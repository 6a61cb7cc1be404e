//! Overlapping cubic patch grid, lesion-patch filtering and prediction fusion.

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::synthdata::VolumeSample;
use crate::volume::{voxel_count, Dims, Mask};

pub const DEFAULT_OVERLAP: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub origin: Dims,
    pub extent: usize,
    /// `[C, e, e, e]`.
    pub data: Tensor<f32>,
    pub mask_patch: Mask,
}

impl PatchRecord {
    pub fn lesion_voxels(&self) -> usize {
        self.mask_patch.count()
    }
}

/// Grid stride for a given overlap fraction (at least one voxel).
pub fn stride_for(extent: usize, overlap: f64) -> usize {
    ((extent as f64 * (1.0 - overlap)).floor() as usize).max(1)
}

fn axis_origins(axis: usize, extent: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + extent <= axis).collect();
    let flush = axis - extent;
    if out.last() != Some(&flush) {
        out.push(flush);
    }
    out
}

/// Patch origins covering `shape` with cubes of side `extent`.
///
/// Origins sit on multiples of the stride; a final origin is shifted flush
/// to the far boundary when the grid would otherwise leave voxels uncovered.
/// The result is sorted lexicographically and free of duplicates.
pub fn extract_grid(shape: Dims, extent: usize, overlap: f64) -> Result<Vec<Dims>> {
    if extent == 0 {
        return Err(Error::invalid("patch extent must be positive"));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::invalid(format!("overlap must lie in [0, 1), got {overlap}")));
    }
    if let Some(axis) = shape.iter().find(|&&a| a < extent) {
        return Err(Error::invalid(format!(
            "patch extent {extent} exceeds volume axis {axis} of {shape:?}"
        )));
    }
    let stride = stride_for(extent, overlap);
    let per_axis: Vec<Vec<usize>> = shape.iter().map(|&a| axis_origins(a, extent, stride)).collect();
    let mut out = Vec::with_capacity(per_axis.iter().map(Vec::len).product());
    for &z in &per_axis[0] {
        for &y in &per_axis[1] {
            for &x in &per_axis[2] {
                out.push([z, y, x]);
            }
        }
    }
    Ok(out)
}

/// Patch extent must survive `stages` halvings.
pub fn check_extent(extent: usize, stages: usize) -> Result<()> {
    let div = 1usize << stages;
    if extent == 0 || extent % div != 0 {
        return Err(Error::invalid(format!(
            "patch extent {extent} is not divisible by 2^{stages} = {div}"
        )));
    }
    Ok(())
}

/// Channel-major crop of a `[C, D, H, W]` volume.
pub fn crop_volume<T: Real>(volume: &Tensor<T>, origin: Dims, extent: usize) -> Result<Tensor<T>> {
    let shape = volume.shape();
    if shape.len() != 4 {
        return Err(Error::shape("crop_volume", format!("expected [C, D, H, W], got {shape:?}")));
    }
    let (c, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if origin[0] + extent > d || origin[1] + extent > h || origin[2] + extent > w {
        return Err(Error::invalid(format!(
            "patch at {origin:?} with extent {extent} overruns {:?}",
            [d, h, w]
        )));
    }
    let src = volume.data();
    let mut out = Vec::with_capacity(c * extent.pow(3));
    for ch in 0..c {
        for z in origin[0]..origin[0] + extent {
            for y in origin[1]..origin[1] + extent {
                let row = ((ch * d + z) * h + y) * w + origin[2];
                out.extend_from_slice(&src[row..row + extent]);
            }
        }
    }
    Tensor::new(vec![c, extent, extent, extent], out)
}

pub fn extract_patches(sample: &VolumeSample, origins: &[Dims], extent: usize) -> Result<Vec<PatchRecord>> {
    origins
        .iter()
        .map(|&origin| {
            Ok(PatchRecord {
                origin,
                extent,
                data: crop_volume(&sample.volume, origin, extent)?,
                mask_patch: sample.mask.crop(origin, extent),
            })
        })
        .collect()
}

/// Keeps patches with at least one lesion voxel.
pub fn filter_lesion_patches(records: Vec<PatchRecord>) -> Vec<PatchRecord> {
    records.into_iter().filter(|r| r.lesion_voxels() >= 1).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fused {
    pub dims: Dims,
    pub probs: Vec<f64>,
    pub coverage: Vec<u32>,
}

/// Per-voxel mean of all covering patch predictions (each `[e, e, e]`).
///
/// The mean is accumulated incrementally so equal inputs fuse exactly.
pub fn fuse<T: Real>(predictions: &[(Dims, Tensor<T>)], shape: Dims) -> Result<Fused> {
    let n = voxel_count(shape);
    let mut mean = vec![0.0f64; n];
    let mut coverage = vec![0u32; n];
    for (origin, p) in predictions {
        let ps = p.shape();
        if ps.len() != 3 || ps[0] != ps[1] || ps[1] != ps[2] {
            return Err(Error::shape("fuse", format!("prediction must be a cube, got {ps:?}")));
        }
        let e = ps[0];
        if (0..3).any(|k| origin[k] + e > shape[k]) {
            return Err(Error::invalid(format!(
                "prediction at {origin:?} with extent {e} overruns {shape:?}"
            )));
        }
        let data = p.data();
        for dz in 0..e {
            for dy in 0..e {
                let dst = ((origin[0] + dz) * shape[1] + origin[1] + dy) * shape[2] + origin[2];
                let src = (dz * e + dy) * e;
                for dx in 0..e {
                    let k = dst + dx;
                    coverage[k] += 1;
                    mean[k] += (data[src + dx].as_f64() - mean[k]) / coverage[k] as f64;
                }
            }
        }
    }
    if let Some(i) = coverage.iter().position(|&c| c == 0) {
        let z = i / (shape[1] * shape[2]);
        let y = (i / shape[2]) % shape[1];
        let x = i % shape[2];
        return Err(Error::invalid(format!("voxel ({z}, {y}, {x}) is not covered by any patch")));
    }
    Ok(Fused {
        dims: shape,
        probs: mean,
        coverage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{gen_sites, gen_subject};

    #[test]
    fn grid_examples() {
        assert_eq!(extract_grid([64; 3], 64, 0.5).unwrap(), vec![[0, 0, 0]]);
        let g = extract_grid([96; 3], 64, 0.5).unwrap();
        assert_eq!(g.len(), 8);
        assert!(g.iter().all(|o| o.iter().all(|&v| v == 0 || v == 32)));
        let g = extract_grid([70; 3], 64, 0.5).unwrap();
        assert_eq!(g.len(), 8);
        assert!(g.iter().all(|o| o.iter().all(|&v| v == 0 || v == 6)));
        assert!(extract_grid([63, 64, 64], 64, 0.5).is_err());
        assert!(extract_grid([64; 3], 32, 1.0).is_err());
    }

    #[test]
    fn grid_is_sorted_and_anisotropic() {
        let g = extract_grid([32, 48, 40], 32, 0.5).unwrap();
        assert_eq!(g.len(), 1 * 2 * 2);
        let mut sorted = g.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(g, sorted);
    }

    #[test]
    fn extent_check() {
        assert!(check_extent(64, 4).is_ok());
        assert!(check_extent(32, 4).is_ok());
        assert!(check_extent(24, 4).is_err());
    }

    #[test]
    fn lesion_filter_cases() {
        let mut sample = gen_subject(&gen_sites(2, 1).unwrap()[0], 9, [32; 3]).unwrap();
        sample.mask = Mask::zeros([32; 3]);
        let grid = extract_grid([32; 3], 16, 0.5).unwrap();
        let recs = extract_patches(&sample, &grid, 16).unwrap();
        assert_eq!(recs.len(), 27);
        assert!(filter_lesion_patches(recs).is_empty());

        // Voxel inside only the first patch.
        sample.mask.set(1, 1, 1, true);
        let kept = filter_lesion_patches(extract_patches(&sample, &grid, 16).unwrap());
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].origin, [0, 0, 0]);

        // Voxel in the overlap band of the first two x-patches.
        sample.mask = Mask::zeros([32; 3]);
        sample.mask.set(1, 1, 10, true);
        let kept = filter_lesion_patches(extract_patches(&sample, &grid, 16).unwrap());
        let origins: Vec<Dims> = kept.iter().map(|r| r.origin).collect();
        assert_eq!(origins, vec![[0, 0, 0], [0, 0, 8]]);
    }

    #[test]
    fn crop_matches_indexing() {
        let sample = gen_subject(&gen_sites(2, 1).unwrap()[1], 4, [16, 20, 24]).unwrap();
        let p = crop_volume(&sample.volume, [0, 4, 8], 16).unwrap();
        let v = sample.volume.data();
        let at = |c: usize, z: usize, y: usize, x: usize| v[((c * 16 + z) * 20 + y) * 24 + x];
        assert_eq!(p.data()[((2 * 16 + 3) * 16 + 5) * 16 + 7], at(2, 3, 9, 15));
    }

    #[test]
    fn fusion_examples() {
        let shape = [96; 3];
        let grid = extract_grid(shape, 64, 0.5).unwrap();
        let preds: Vec<(Dims, Tensor<f64>)> =
            grid.iter().map(|&o| (o, Tensor::full(vec![64; 3], 0.7))).collect();
        let f = fuse(&preds, shape).unwrap();
        assert!(f.probs.iter().all(|&p| p == 0.7));

        let single = Tensor::from_f64(vec![2, 2, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap();
        let f = fuse(&[([0, 0, 0], single.clone())], [2, 2, 2]).unwrap();
        assert_eq!(f.probs, single.data());

        let a = Tensor::full(vec![2; 3], 0.2);
        let b = Tensor::full(vec![2; 3], 0.6);
        let f = fuse(&[([0, 0, 0], a), ([0, 0, 1], b)], [2, 2, 3]).unwrap();
        assert!((f.probs[1] - 0.4).abs() < 1e-12);
        assert_eq!(f.probs[0], 0.2);
        assert_eq!(f.coverage[1], 2);

        let gap = fuse(&[([0, 0, 0], Tensor::full(vec![2; 3], 0.5))], [2, 2, 3]);
        assert!(gap.is_err());
    }
}
