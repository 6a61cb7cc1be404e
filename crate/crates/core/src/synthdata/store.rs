//! Binary volume store and its text manifest.
//!
//! Store: `DSVOL1`, then little-endian `u32` header fields
//! `n_samples, D, H, W, channels`, then per sample `u32 subject_id`,
//! `u32 site_id`, `C·D·H·W` raw `f32` voxels (channel-major) and `D·H·W`
//! mask bytes.
//!
//! Manifest: one tab-separated line per sample:
//! `subject_id, site_id, seed, offset` where `offset` is the byte offset of
//! the sample record inside the store.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{VolumeSample, MODALITIES};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::volume::{voxel_count, Dims, Mask};

pub const VOLUME_MAGIC: &[u8; 6] = b"DSVOL1";
const HEADER_LEN: u64 = 6 + 5 * 4;

/// In-memory cohort.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: Dims,
    pub samples: Vec<VolumeSample>,
}

impl Dataset {
    pub fn new(samples: Vec<VolumeSample>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::invalid("dataset has no samples"))?;
        let dims = first.dims();
        if let Some(bad) = samples.iter().find(|s| s.dims() != dims) {
            return Err(Error::invalid(format!(
                "subject {} has dims {:?}, expected {dims:?}",
                bad.subject_id,
                bad.dims()
            )));
        }
        Ok(Dataset { dims, samples })
    }

    pub fn get(&self, subject_id: u32) -> Option<&VolumeSample> {
        self.samples.iter().find(|s| s.subject_id == subject_id)
    }

    pub fn subject_ids(&self) -> Vec<u32> {
        self.samples.iter().map(|s| s.subject_id).collect()
    }
}

fn record_len(dims: Dims) -> u64 {
    let v = voxel_count(dims) as u64;
    8 + 4 * MODALITIES as u64 * v + v
}

/// Writes the store; returns each record's byte offset.
pub fn write_store(samples: &[VolumeSample], path: &Path) -> Result<Vec<u64>> {
    let ds = Dataset::new(samples.to_vec())?;
    let dims = ds.dims;
    let mut buf = Vec::with_capacity((HEADER_LEN + record_len(dims) * samples.len() as u64) as usize);
    buf.extend_from_slice(VOLUME_MAGIC);
    for v in [samples.len(), dims[0], dims[1], dims[2], MODALITIES] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let mut offsets = Vec::with_capacity(samples.len());
    for s in samples {
        offsets.push(buf.len() as u64);
        buf.extend_from_slice(&s.subject_id.to_le_bytes());
        buf.extend_from_slice(&s.site_id.to_le_bytes());
        for v in s.volume.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(s.mask.data());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(offsets)
}

fn u32_at(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([buf[at], buf[at + 1], buf[at + 2], buf[at + 3]])
}

/// Reads every record of a store. Seeds are unknown here (set to 0).
pub fn read_store(path: &Path) -> Result<(Vec<VolumeSample>, Vec<u64>)> {
    let buf = fs::read(path)?;
    if buf.len() < HEADER_LEN as usize {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            actual: buf.len() as u64,
        });
    }
    if &buf[..6] != VOLUME_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad magic, expected DSVOL1".into(),
        });
    }
    let n = u32_at(&buf, 6) as usize;
    let dims = [u32_at(&buf, 10) as usize, u32_at(&buf, 14) as usize, u32_at(&buf, 18) as usize];
    let channels = u32_at(&buf, 22) as usize;
    if channels != MODALITIES {
        return Err(Error::Format {
            offset: 22,
            detail: format!("expected {MODALITIES} channels, header says {channels}"),
        });
    }
    if dims.contains(&0) {
        return Err(Error::Format {
            offset: 10,
            detail: format!("zero extent in {dims:?}"),
        });
    }
    let expected = HEADER_LEN + record_len(dims) * n as u64;
    if (buf.len() as u64) != expected {
        return Err(Error::Truncated {
            expected,
            actual: buf.len() as u64,
        });
    }
    let v = voxel_count(dims);
    let mut at = HEADER_LEN as usize;
    let mut samples = Vec::with_capacity(n);
    let mut offsets = Vec::with_capacity(n);
    for _ in 0..n {
        offsets.push(at as u64);
        let subject_id = u32_at(&buf, at);
        let site_id = u32_at(&buf, at + 4);
        at += 8;
        let data: Vec<f32> = buf[at..at + 4 * MODALITIES * v]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        at += 4 * MODALITIES * v;
        let mask = Mask::new(dims, buf[at..at + v].to_vec()).map_err(|e| Error::Format {
            offset: at as u64,
            detail: e.to_string(),
        })?;
        at += v;
        samples.push(VolumeSample {
            subject_id,
            site_id,
            seed: 0,
            volume: Tensor::new(vec![MODALITIES, dims[0], dims[1], dims[2]], data)?,
            mask,
            split: None,
        });
    }
    Ok((samples, offsets))
}

/// Store file that accompanies a manifest.
pub fn store_path_for(manifest: &Path) -> PathBuf {
    manifest.with_extension("vol")
}

/// Writes the manifest at `path` and the store next to it.
pub fn write_manifest(samples: &[VolumeSample], path: &Path) -> Result<()> {
    let offsets = write_store(samples, &store_path_for(path))?;
    let mut text = String::new();
    for (s, off) in samples.iter().zip(offsets) {
        text.push_str(&format!("{}\t{}\t{}\t{}\n", s.subject_id, s.site_id, s.seed, off));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Reads a manifest and its store, checking that both agree.
pub fn read_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let (mut samples, offsets) = read_store(&store_path_for(path))?;
    let mut lines = 0;
    let mut byte = 0u64;
    for (lineno, line) in text.lines().enumerate() {
        let line_start = byte;
        byte += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| Error::Format {
            offset: line_start,
            detail: format!("manifest line {}: {detail}", lineno + 1),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {}", fields.len())));
        }
        let subject: u32 = fields[0].parse().map_err(|_| bad("bad subject_id".into()))?;
        let site: u32 = fields[1].parse().map_err(|_| bad("bad site_id".into()))?;
        let seed: u64 = fields[2].parse().map_err(|_| bad("bad seed".into()))?;
        let offset: u64 = fields[3].parse().map_err(|_| bad("bad offset".into()))?;
        let Some(i) = offsets.iter().position(|&o| o == offset) else {
            return Err(bad(format!("no store record at offset {offset}")));
        };
        let s = &mut samples[i];
        if s.subject_id != subject || s.site_id != site {
            return Err(bad(format!(
                "store record at {offset} is subject {} site {}",
                s.subject_id, s.site_id
            )));
        }
        s.seed = seed;
        lines += 1;
    }
    if lines != samples.len() {
        return Err(Error::invalid(format!(
            "manifest lists {lines} samples, store holds {}",
            samples.len()
        )));
    }
    Dataset::new(samples)
}
