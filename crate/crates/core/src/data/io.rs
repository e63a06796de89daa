//! The `MICO` dataset container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        4 bytes  "MICO"
//! version      u32      1
//! id length    u8, then that many UTF-8 bytes
//! records      u32
//! per record:  category u32, sample count u8
//! per sample:  tag u8, ndims u8, dims u32 × ndims,
//!              payload f32 × prod(dims),
//!              caption length u32, tokens u32 × length
//! ```

use std::io::Write;
use std::path::Path;

use super::{PairDataset, Record};
use crate::error::{Error, Result};
use crate::modality::{ModalitySample, ModalityTag};

pub const DATASET_MAGIC: &[u8; 4] = b"MICO";
pub const DATASET_VERSION: u32 = 1;

pub fn encode_dataset(ds: &PairDataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    let id = ds.id.as_bytes();
    let id_len = u8::try_from(id.len()).map_err(|_| Error::Invalid("dataset id longer than 255 bytes".into()))?;
    out.push(id_len);
    out.extend_from_slice(id);
    out.extend_from_slice(&(ds.records.len() as u32).to_le_bytes());
    for r in &ds.records {
        out.extend_from_slice(&r.category.to_le_bytes());
        let n = u8::try_from(r.samples.len()).map_err(|_| Error::Invalid("more than 255 samples in a record".into()))?;
        out.push(n);
        for s in &r.samples {
            if s.shape.iter().product::<usize>() != s.payload.len() || s.shape.len() > 255 {
                return Err(Error::PayloadShape {
                    tag: s.tag,
                    expected: vec![s.payload.len()],
                    got: s.shape.clone(),
                });
            }
            out.push(s.tag.to_byte());
            out.push(s.shape.len() as u8);
            for &d in &s.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &s.payload {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(s.caption.len() as u32).to_le_bytes());
            for t in &s.caption {
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Byte cursor that reports the offset of every failure.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if n > left {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n - left,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or(Error::Truncated {
            offset: self.pos,
            needed: usize::MAX,
        })?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn magic(&mut self, expected: &'static [u8; 4], name: &'static str) -> Result<()> {
        let at = self.pos;
        let got = self.take(4).map_err(|_| Error::BadMagic {
            offset: at,
            expected: name,
        })?;
        if got != expected {
            return Err(Error::BadMagic {
                offset: at,
                expected: name,
            });
        }
        Ok(())
    }

    pub(crate) fn version(&mut self, expected: u32) -> Result<()> {
        let at = self.pos;
        let found = self.u32()?;
        if found != expected {
            return Err(Error::Version {
                offset: at,
                found,
                expected,
            });
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Malformed {
                offset: self.pos,
                reason: format!("{} trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<PairDataset> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC, "MICO")?;
    r.version(DATASET_VERSION)?;
    let id_len = r.u8()? as usize;
    let at = r.offset();
    let id = std::str::from_utf8(r.take(id_len)?)
        .map_err(|_| Error::Malformed {
            offset: at,
            reason: "dataset id is not UTF-8".into(),
        })?
        .to_string();
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let category = r.u32()?;
        let n = r.u8()? as usize;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.offset();
            let tag = ModalityTag::from_byte(r.u8()?).ok_or_else(|| Error::Malformed {
                offset: at,
                reason: "unknown modality tag".into(),
            })?;
            let ndims = r.u8()? as usize;
            let shape = (0..ndims)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Malformed {
                offset: at,
                reason: "payload size overflows".into(),
            })?;
            let payload = r.f32s(numel)?;
            let len = r.u32()? as usize;
            let caption = (0..len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            samples.push(ModalitySample {
                tag,
                shape,
                payload,
                caption,
            });
        }
        records.push(Record { category, samples });
    }
    r.finish()?;
    Ok(PairDataset { id, records })
}

pub fn save_dataset(ds: &PairDataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<PairDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

/// One JSON object per record: index, category and modality tags present.
pub fn manifest_lines(ds: &PairDataset) -> Vec<String> {
    ds.records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let tags: Vec<&str> = r.samples.iter().map(|s| s.tag.short()).collect();
            serde_json::json!({ "index": i, "category": r.category, "modalities": tags }).to_string()
        })
        .collect()
}

pub fn write_manifest(ds: &PairDataset, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for line in manifest_lines(ds) {
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PairDataset {
        PairDataset {
            id: "T-A".into(),
            records: vec![Record {
                category: 3,
                samples: vec![ModalitySample {
                    tag: ModalityTag::Audio,
                    shape: vec![2, 2],
                    payload: vec![1.0, -0.5, f32::MIN_POSITIVE, 3.25],
                    caption: vec![2, 5, 3],
                }],
            }],
        }
    }

    #[test]
    fn round_trip_and_offsets() {
        let ds = tiny();
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(decode_dataset(&bytes).unwrap(), ds);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::BadMagic { offset: 0, .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_dataset(&bad), Err(Error::Version { offset: 4, found: 9, .. })));

        let cut = &bytes[..bytes.len() - 2];
        assert!(matches!(decode_dataset(cut), Err(Error::Truncated { needed: 2, .. })));
    }

    #[test]
    fn empty_dataset() {
        let ds = PairDataset {
            id: "joint".into(),
            records: vec![],
        };
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 1 + 5 + 4);
        assert_eq!(decode_dataset(&bytes).unwrap(), ds);
    }

    #[test]
    fn manifest_format() {
        let lines = manifest_lines(&tiny());
        assert_eq!(lines, vec![r#"{"category":3,"index":0,"modalities":["A"]}"#]);
    }
}
