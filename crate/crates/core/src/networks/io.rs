//! Flat binary parameter files.
//!
//! Layout: the magic `DSSEG1`, then one record per parameter until EOF:
//! `u32` name length, UTF-8 name (`E.`, `D.` or `R.` prefixed), `u32` rank,
//! `rank` × `u32` extents, and the values as little-endian `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::ModelBundle;
use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 6] = b"DSSEG1";

pub fn write_params<T: Real>(model: &ModelBundle<T>, mut out: impl Write) -> Result<()> {
    out.write_all(MODEL_MAGIC)?;
    for (tag, set) in model.components() {
        for p in &set.params {
            let name = format!("{tag}.{}", p.name);
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
            for &e in p.value.shape() {
                out.write_all(&(e as u32).to_le_bytes())?;
            }
            for v in p.value.data() {
                out.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    /// Fills `buf`; returns `false` on a clean EOF before the first byte.
    fn fill(&mut self, buf: &mut [u8], allow_eof: bool) -> Result<bool> {
        let mut got = 0;
        while got < buf.len() {
            let n = self.inner.read(&mut buf[got..])?;
            if n == 0 {
                if got == 0 && allow_eof {
                    return Ok(false);
                }
                return Err(Error::Format {
                    offset: self.offset + got as u64,
                    detail: format!("unexpected end of file ({} of {} bytes)", got, buf.len()),
                });
            }
            got += n;
        }
        self.offset += got as u64;
        Ok(true)
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, false)?;
        Ok(u32::from_le_bytes(b))
    }
}

/// Reads every record of a parameter stream.
pub fn read_params(input: impl Read) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { inner: input, offset: 0 };
    let mut magic = [0u8; 6];
    r.fill(&mut magic, false)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad magic, expected DSSEG1".into(),
        });
    }
    let mut out = Vec::new();
    loop {
        let at = r.offset;
        let mut len = [0u8; 4];
        if !r.fill(&mut len, true)? {
            break;
        }
        let len = u32::from_le_bytes(len) as usize;
        if len > 4096 {
            return Err(Error::Format {
                offset: at,
                detail: format!("implausible name length {len}"),
            });
        }
        let mut name = vec![0u8; len];
        r.fill(&mut name, false)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format {
            offset: at + 4,
            detail: "parameter name is not UTF-8".into(),
        })?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format {
                offset: r.offset - 4,
                detail: format!("implausible rank {rank}"),
            });
        }
        let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.fill(&mut raw, false)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format {
            offset: at,
            detail: e.to_string(),
        })?;
        out.push((name, t));
    }
    Ok(out)
}

impl<T: Real> ModelBundle<T> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_params(self, &mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Overwrites every parameter from `records`; names and shapes must match exactly.
    pub fn assign(&mut self, records: Vec<(String, Tensor<f32>)>) -> Result<()> {
        let expected: usize = self.components().iter().map(|(_, s)| s.len()).sum();
        if records.len() != expected {
            return Err(Error::invalid(format!(
                "parameter file has {} records, model expects {expected}",
                records.len()
            )));
        }
        let mut it = records.into_iter();
        let tags: Vec<&str> = self.components().iter().map(|(t, _)| *t).collect();
        for (tag, set) in tags.into_iter().zip(self.components_mut()) {
            for p in &mut set.params {
                let (name, t) = it.next().expect("count checked");
                let want = format!("{tag}.{}", p.name);
                if name != want || t.shape() != p.value.shape() {
                    return Err(Error::invalid(format!(
                        "record `{name}` {:?} does not match `{want}` {:?}",
                        t.shape(),
                        p.value.shape()
                    )));
                }
                p.value = t.cast();
            }
        }
        Ok(())
    }

    pub fn load_into(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let records = read_params(BufReader::new(File::open(path)?))?;
        self.assign(records)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{build_model, ArchSpec, Variant};
    use super::*;

    fn model() -> ModelBundle<f32> {
        let spec = ArchSpec {
            base_channels: 2,
            stages: 2,
            patch_extent: 8,
            reg_hidden: (4, 3),
            ..ArchSpec::default()
        };
        build_model(&spec, Variant::Du, 5, 0.1).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let mut buf = Vec::new();
        write_params(&m, &mut buf).unwrap();
        assert_eq!(&buf[..6], MODEL_MAGIC);
        let mut blank = build_model::<f32>(&m.spec, Variant::Du, 99, 0.1).unwrap();
        blank.assign(read_params(&buf[..]).unwrap()).unwrap();
        assert_eq!(blank, m);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = model();
        let mut buf = Vec::new();
        write_params(&m, &mut buf).unwrap();
        let err = read_params(&buf[..buf.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_params(&bad[..]).is_err());

        let recs = read_params(&buf[..]).unwrap();
        let mut other = build_model::<f32>(&m.spec, Variant::Bm, 0, 0.1).unwrap();
        assert!(other.assign(recs).is_err());
    }
}
