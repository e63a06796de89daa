//! The `MICK` checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        4 bytes  "MICK"
//! version      u32      1
//! step         u64
//! config       u32 length, then that many UTF-8 bytes (the run config text)
//! ema          u8 flag (0 or 1), then f64 when the flag is 1
//! params       u32 count
//! per param:   name u16 length + UTF-8, ndims u8, dims u32 × ndims,
//!              values f32 × prod(dims)
//! optimizer:   t u64, beta1 f64, beta2 f64, eps f64, weight_decay f64,
//!              first moments f32 per param, then second moments f32 per param
//! ```
//!
//! Moment tensors take the shapes of the parameter table.

use std::path::Path;

use mico_autodiff::Tensor;

use super::optim::AdamW;
use crate::data::io::Reader;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MICK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Complete training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    /// Serialized run config the state was produced under.
    pub config: String,
    pub ema: Option<f64>,
    pub params: ParamStore<f32>,
    pub optimizer: AdamW,
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        self.optimizer.check_shapes(&self.params)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        match self.ema {
            Some(e) => {
                out.push(1);
                out.extend_from_slice(&e.to_le_bytes());
            }
            None => out.push(0),
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, value) in self.params.iter() {
            let len = u16::try_from(name.len()).map_err(|_| Error::Invalid(format!("parameter name `{name}` too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let shape = value.shape();
            if shape.len() > 255 {
                return Err(Error::Invalid(format!("`{name}` has more than 255 dimensions")));
            }
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_f32s(&mut out, value.data());
        }
        let o = &self.optimizer;
        out.extend_from_slice(&o.t.to_le_bytes());
        for h in [o.beta1, o.beta2, o.eps, o.weight_decay] {
            out.extend_from_slice(&h.to_le_bytes());
        }
        for m in &o.m {
            put_f32s(&mut out, m.data());
        }
        for v in &o.v {
            put_f32s(&mut out, v.data());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC, "MICK")?;
        r.version(CHECKPOINT_VERSION)?;
        let step = r.u64()?;
        let config_len = r.u32()? as usize;
        let at = r.offset();
        let config = std::str::from_utf8(r.take(config_len)?)
            .map_err(|_| Error::Malformed {
                offset: at,
                reason: "config text is not UTF-8".into(),
            })?
            .to_string();
        let at = r.offset();
        let ema = match r.u8()? {
            0 => None,
            1 => Some(r.f64()?),
            flag => {
                return Err(Error::Malformed {
                    offset: at,
                    reason: format!("ema flag {flag}"),
                })
            }
        };
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut shapes = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.offset();
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Malformed {
                    offset: at,
                    reason: "parameter name is not UTF-8".into(),
                })?
                .to_string();
            if params.id(&name).is_some() {
                return Err(Error::Malformed {
                    offset: at,
                    reason: format!("duplicate parameter `{name}`"),
                });
            }
            let ndims = r.u8()? as usize;
            let shape = (0..ndims).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().product();
            let data = r.f32s(n)?;
            params.add(name, Tensor::new(shape.clone(), data)?);
            shapes.push(shape);
        }
        let t = r.u64()?;
        let (beta1, beta2, eps, weight_decay) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let moments = |r: &mut Reader| -> Result<Vec<Tensor<f32>>> {
            shapes
                .iter()
                .map(|s| Ok(Tensor::new(s.clone(), r.f32s(s.iter().product())?)?))
                .collect()
        };
        let m = moments(&mut r)?;
        let v = moments(&mut r)?;
        r.finish()?;
        Ok(Self {
            step,
            config,
            ema,
            params,
            optimizer: AdamW {
                t,
                beta1,
                beta2,
                eps,
                weight_decay,
                m,
                v,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
