//! Seeded multi-site phantoms.
//!
//! A subject's anatomy and lesions depend only on its seed; its site
//! contributes an intensity transform `gain·v + offset + bias(x) + noise`
//! and the lesion contrast. Intensities are clamped to `[-1, 3]`.

mod store;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{derive, seeded};
use crate::volume::{voxel_count, Dims, Mask};

pub use store::{read_manifest, read_store, store_path_for, write_manifest, write_store, Dataset, VOLUME_MAGIC};

pub const MODALITIES: usize = 4;
pub const MODALITY_NAMES: [&str; MODALITIES] = ["T1w", "T2w", "PDw", "FLAIR"];

pub const GAIN_RANGE: (f64, f64) = (0.6, 1.4);
pub const OFFSET_RANGE: (f64, f64) = (-0.2, 0.2);
pub const NOISE_RANGE: (f64, f64) = (0.01, 0.08);
pub const BIAS_RANGE: (f64, f64) = (-0.1, 0.1);
pub const CLAMP_RANGE: (f32, f32) = (-1.0, 3.0);
pub const MAX_LESIONS: usize = 8;

/// Lesion contrast per modality before site scaling: dark on T1w, bright elsewhere.
const LESION_CONTRAST: [f64; MODALITIES] = [-0.35, 0.55, 0.4, 0.7];
const TISSUE_BASE: [f64; MODALITIES] = [0.7, 0.35, 0.55, 0.45];
const TISSUE_SPAN: [f64; MODALITIES] = [0.35, 0.25, 0.2, 0.15];

const TAG_SITE: u64 = 0x5173;
const TAG_ANATOMY: u64 = 0xA7;
const TAG_NOISE: u64 = 0x4E;

#[derive(Clone, Debug, PartialEq)]
pub struct SiteProfile {
    pub site_id: u32,
    pub gain: [f64; MODALITIES],
    pub offset: [f64; MODALITIES],
    /// Coefficients of `x, y, z, x², y², z², xy, xz, yz` over coordinates in `[-1, 1]`.
    pub bias_field: [f64; 9],
    pub noise_sigma: f64,
    pub lesion_contrast: [f64; MODALITIES],
}

impl SiteProfile {
    /// Identity transform: unit gain, no offset, bias or noise.
    pub fn neutral(site_id: u32) -> Self {
        SiteProfile {
            site_id,
            gain: [1.0; MODALITIES],
            offset: [0.0; MODALITIES],
            bias_field: [0.0; 9],
            noise_sigma: 0.0,
            lesion_contrast: LESION_CONTRAST,
        }
    }

    pub fn bias_at(&self, z: f64, y: f64, x: f64) -> f64 {
        let basis = [x, y, z, x * x, y * y, z * z, x * y, x * z, y * z];
        self.bias_field.iter().zip(basis).map(|(c, b)| c * b).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    pub subject_id: u32,
    pub site_id: u32,
    pub seed: u64,
    /// `[4, D, H, W]`, modalities in [`MODALITY_NAMES`] order.
    pub volume: Tensor<f32>,
    pub mask: Mask,
    pub split: Option<Split>,
}

impl VolumeSample {
    pub fn dims(&self) -> Dims {
        self.mask.dims()
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..=hi)
}

pub fn gen_sites(n_sites: usize, master_seed: u64) -> Result<Vec<SiteProfile>> {
    if n_sites < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 sites for domain classification, got {n_sites}"
        )));
    }
    Ok((0..n_sites as u32)
        .map(|site_id| {
            let mut rng = seeded(master_seed, &[TAG_SITE, site_id as u64]);
            let gain = std::array::from_fn(|_| uniform(&mut rng, GAIN_RANGE));
            let offset = std::array::from_fn(|_| uniform(&mut rng, OFFSET_RANGE));
            let bias_field = std::array::from_fn(|_| uniform(&mut rng, BIAS_RANGE));
            let noise_sigma = uniform(&mut rng, NOISE_RANGE);
            let lesion_contrast =
                std::array::from_fn(|m| LESION_CONTRAST[m] * uniform(&mut rng, (0.8, 1.2)));
            SiteProfile {
                site_id,
                gain,
                offset,
                bias_field,
                noise_sigma,
                lesion_contrast,
            }
        })
        .collect())
}

/// Seed of subject `index` at `site_id` for a cohort built from `master_seed`.
pub fn subject_seed(master_seed: u64, site_id: u32, index: u32) -> u64 {
    derive(master_seed, &[site_id as u64, index as u64])
}

struct Bump {
    center: [f64; 3],
    inv_two_var: f64,
    amp: f64,
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

/// Site-independent anatomy in `[0, 1]` and the lesion mask.
fn anatomy(subject_seed: u64, dims: Dims) -> (Vec<f64>, Mask) {
    let mut rng = seeded(subject_seed, &[TAG_ANATOMY]);
    let ext = dims.map(|e| e as f64);
    let min_ext = ext.iter().copied().fold(f64::INFINITY, f64::min);

    let bumps: Vec<Bump> = (0..6)
        .map(|_| {
            let sigma = uniform(&mut rng, (0.15, 0.35)) * min_ext;
            Bump {
                center: std::array::from_fn(|a| rng.random_range(0.0..ext[a])),
                inv_two_var: 1.0 / (2.0 * sigma * sigma),
                amp: uniform(&mut rng, (0.3, 1.0)),
            }
        })
        .collect();

    let n_lesions = rng.random_range(1..=MAX_LESIONS);
    let r_max = (0.08 * min_ext).max(2.5);
    let lesions: Vec<Ellipsoid> = (0..n_lesions)
        .map(|_| {
            let radii: [f64; 3] = std::array::from_fn(|_| uniform(&mut rng, (1.5, r_max)));
            let center = std::array::from_fn(|a| {
                let margin = radii[a].ceil() + 1.0;
                rng.random_range(margin..(ext[a] - margin).max(margin + 1.0))
            });
            Ellipsoid { center, radii }
        })
        .collect();

    let mut field = Vec::with_capacity(voxel_count(dims));
    let mut mask = Mask::zeros(dims);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z as f64, y as f64, x as f64];
                let v: f64 = bumps
                    .iter()
                    .map(|b| {
                        let d2: f64 = (0..3).map(|a| (p[a] - b.center[a]).powi(2)).sum();
                        b.amp * (-d2 * b.inv_two_var).exp()
                    })
                    .sum();
                field.push(v);
                let inside = lesions.iter().any(|l| {
                    (0..3)
                        .map(|a| ((p[a] - l.center[a]) / l.radii[a]).powi(2))
                        .sum::<f64>()
                        <= 1.0
                });
                if inside {
                    mask.set(z, y, x, true);
                }
            }
        }
    }
    let peak = field.iter().copied().fold(0.0, f64::max).max(1e-12);
    for v in &mut field {
        *v /= peak;
    }
    // a lesion always covers its own center voxel
    if mask.count() == 0 {
        let c = lesions[0].center.map(|v| v as usize);
        mask.set(c[0], c[1], c[2], true);
    }
    (field, mask)
}

/// Renders one subject as seen by the scanner at `profile`.
pub fn gen_subject(profile: &SiteProfile, subject_seed: u64, dims: Dims) -> Result<VolumeSample> {
    if dims.iter().any(|&e| e < 16) {
        return Err(Error::invalid(format!("volume extents {dims:?} must each be >= 16")));
    }
    let (field, mask) = anatomy(subject_seed, dims);
    let mut noise_rng = seeded(subject_seed, &[TAG_NOISE, profile.site_id as u64]);
    let noise = if profile.noise_sigma > 0.0 {
        Some(Normal::new(0.0, profile.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?)
    } else {
        None
    };
    let norm = |i: usize, n: usize| if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
    let mut bias = Vec::with_capacity(field.len());
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                bias.push(profile.bias_at(norm(z, dims[0]), norm(y, dims[1]), norm(x, dims[2])));
            }
        }
    }

    let n = field.len();
    let mut data = Vec::with_capacity(MODALITIES * n);
    for m in 0..MODALITIES {
        for i in 0..n {
            let mut v = TISSUE_BASE[m] + TISSUE_SPAN[m] * field[i];
            if mask.data()[i] != 0 {
                v += profile.lesion_contrast[m];
            }
            v = profile.gain[m] * v + profile.offset[m] + bias[i];
            if let Some(nd) = &noise {
                v += nd.sample(&mut noise_rng);
            }
            data.push((v as f32).clamp(CLAMP_RANGE.0, CLAMP_RANGE.1));
        }
    }
    Ok(VolumeSample {
        subject_id: 0,
        site_id: profile.site_id,
        seed: subject_seed,
        volume: Tensor::new(vec![MODALITIES, dims[0], dims[1], dims[2]], data)?,
        mask,
        split: None,
    })
}

/// `subjects_per_site` subjects at each of `n_sites` sites; subject ids are
/// `site * subjects_per_site + k`.
pub fn gen_cohort(
    n_sites: usize,
    subjects_per_site: usize,
    master_seed: u64,
    dims: Dims,
) -> Result<(Vec<SiteProfile>, Vec<VolumeSample>)> {
    if subjects_per_site == 0 {
        return Err(Error::invalid("subjects_per_site must be >= 1"));
    }
    let sites = gen_sites(n_sites, master_seed)?;
    let mut samples = Vec::with_capacity(n_sites * subjects_per_site);
    for p in &sites {
        for k in 0..subjects_per_site as u32 {
            let seed = subject_seed(master_seed, p.site_id, k);
            let mut s = gen_subject(p, seed, dims)?;
            s.subject_id = p.site_id * subjects_per_site as u32 + k;
            samples.push(s);
        }
    }
    Ok((sites, samples))
}

/// Per-modality mean intensity of a sample.
pub fn modality_means(s: &VolumeSample) -> [f64; MODALITIES] {
    let n = voxel_count(s.dims());
    std::array::from_fn(|m| {
        s.volume.data()[m * n..(m + 1) * n].iter().map(|&v| v as f64).sum::<f64>() / n as f64
    })
}
