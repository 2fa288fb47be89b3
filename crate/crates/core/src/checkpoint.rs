//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    "HOFR"
//! version  u16 (= 1)
//! header   u32 byte length, then UTF-8 text (the rendered run config)
//! count    u32 number of arrays
//! manifest per array: u16 name length, name, u8 rank, rank x u32 dims,
//!          u64 byte offset into the payload
//! payload  u64 byte length, then every array as f32 values in row-major
//!          order, concatenated in manifest order
//! ```
//!
//! Values are stored at 32-bit precision. Training math is 64-bit, so a
//! loaded checkpoint holds each parameter rounded to the nearest `f32`.
//! Saving a loaded checkpoint reproduces the file byte for byte.
//!
//! Raw sampled latents use the same container with a single `latent` array
//! of dims `[h, w, c]`.

use std::path::Path;

use crate::config;
use crate::error::{Error, Result};
use crate::model::{Model, ModelParams};
use crate::tensor::{Matrix, Tensor};
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"HOFR";
pub const VERSION: u16 = 1;

/// One named array with its dims.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

/// Decoded container.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: String,
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(self.header.len(), "header")?.to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&len_u32(self.entries.len(), "array count")?.to_le_bytes());
        let mut offset = 0u64;
        for e in &self.entries {
            let count: usize = e.dims.iter().product();
            if count != e.values.len() {
                return Err(Error::Checkpoint(format!(
                    "{}: dims {:?} do not match {} values",
                    e.name,
                    e.dims,
                    e.values.len()
                )));
            }
            let name_len = u16::try_from(e.name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {}", e.name)))?;
            let rank = u8::try_from(e.dims.len()).map_err(|_| Error::Checkpoint(format!("{}: rank too large", e.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(rank);
            for &d in &e.dims {
                out.extend_from_slice(&len_u32(d, "dim")?.to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * count as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for e in &self.entries {
            for &v in &e.values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| corrupt("header is not UTF-8"))?
            .to_string();
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| corrupt("array name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            manifest.push((name, dims, offset));
        }
        let payload_len = r.u64()?;
        let payload = r.take(usize::try_from(payload_len).map_err(|_| corrupt("payload too large"))?)?;
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes after payload"));
        }
        let mut entries = Vec::with_capacity(manifest.len());
        let mut expected = 0u64;
        for (name, dims, offset) in manifest {
            if offset != expected {
                return Err(corrupt(&format!("{name}: offset {offset}, expected {expected}")));
            }
            let count = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| corrupt(&format!("{name}: dims overflow")))?;
            let end = offset
                .checked_add(4 * count)
                .filter(|&e| e <= payload_len)
                .ok_or_else(|| corrupt(&format!("{name}: extends past the payload")))?;
            let values: Vec<f64> = payload[offset as usize..end as usize]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(corrupt(&format!("{name}: non-finite value")));
            }
            expected = end;
            entries.push(Entry { name, dims, values });
        }
        if expected != payload_len {
            return Err(corrupt("payload length does not match the manifest"));
        }
        Ok(Self { header, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn corrupt(msg: &str) -> Error {
    Error::Checkpoint(msg.to_string())
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} too large: {n}")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Trained parameters plus the config that produced them.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        Container {
            header: config::render(&self.config),
            entries: self
                .params
                .iter()
                .map(|(name, m)| Entry {
                    name: name.clone(),
                    dims: vec![m.rows(), m.cols()],
                    values: m.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Decode and check the parameters against the model the echoed config
    /// describes.
    pub fn from_container(c: Container) -> Result<Self> {
        let config = config::parse(&c.header).map_err(|e| corrupt(&format!("config echo: {e}")))?;
        let mut params = ModelParams::new();
        for e in c.entries {
            let [rows, cols] = e.dims[..] else {
                return Err(corrupt(&format!("{}: expected 2 dims, found {:?}", e.name, e.dims)));
            };
            if params.get(&e.name).is_some() {
                return Err(corrupt(&format!("duplicate array {}", e.name)));
            }
            let m = Matrix::new(rows, cols, e.values).map_err(|err| corrupt(&err.to_string()))?;
            params.insert(e.name, m);
        }
        let model = Model::new(config.model_config()?).map_err(|err| corrupt(&err.to_string()))?;
        model.validate(&params).map_err(|err| corrupt(&err.to_string()))?;
        Ok(Self { config, params })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(Container::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Container holding one `[h, w, c]` latent with a free-text header.
pub fn latent_container(header: &str, latent: &Tensor) -> Container {
    let (h, w, c) = latent.shape();
    Container {
        header: header.to_string(),
        entries: vec![Entry {
            name: "latent".into(),
            dims: vec![h, w, c],
            values: latent.data().to_vec(),
        }],
    }
}
