//! On-disk formats: the CVOL volume container, model checkpoints and the
//! config hash stamped into every artifact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kspace::{ComplexVolume, Domain, Timepoint};
use crate::models::{build_model, Model, ModelConfig};
use crate::nn::{Param, ParamStore};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Hex SHA-256 of a serialized config.
pub fn config_hash(serialized: &str) -> String {
    hex::encode(Sha256::digest(serialized.as_bytes()))
}

/// Provenance stamped into every artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub tool_version: String,
}

impl Stamp {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Self {
            config_hash: config_hash.into(),
            tool_version: TOOL_VERSION.to_string(),
        }
    }

    /// Errors unless `other` carries the same config hash.
    pub fn check(&self, other: &Stamp, what: &str) -> Result<()> {
        if self.config_hash != other.config_hash {
            return Err(Error::validation(format!(
                "{what} was produced with config hash {} but the current config hashes to {}; \
                 rerun with the original config or start a fresh output directory",
                other.config_hash, self.config_hash
            )));
        }
        Ok(())
    }
}

pub const CVOL_MAGIC: &[u8; 6] = b"CVOL1\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    Complex64 = 1,
    Uint8 = 2,
}

impl DType {
    pub fn element_size(self) -> usize {
        match self {
            DType::Complex64 => 8,
            DType::Uint8 => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(DType::Complex64),
            2 => Some(DType::Uint8),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CvolMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timepoint: Option<Timepoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stamp: Option<Stamp>,
}

/// Payload of a CVOL file.
#[derive(Clone, Debug, PartialEq)]
pub enum CvolData {
    Complex(ComplexVolume),
    Mask { dims: (usize, usize, usize), data: Vec<u8> },
}

impl CvolData {
    pub fn dims(&self) -> (usize, usize, usize) {
        match self {
            CvolData::Complex(v) => v.shape(),
            CvolData::Mask { dims, .. } => *dims,
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            CvolData::Complex(_) => DType::Complex64,
            CvolData::Mask { .. } => DType::Uint8,
        }
    }
}

/// Layout: magic, dtype code (u8), dims (3 x u64), metadata length (u32)
/// and JSON metadata, then the little-endian row-major payload.
pub fn write_cvol<W: Write>(mut w: W, data: &CvolData, meta: &CvolMeta) -> std::io::Result<()> {
    let (d, h, wd) = data.dims();
    w.write_all(CVOL_MAGIC)?;
    w.write_all(&[data.dtype() as u8])?;
    for n in [d, h, wd] {
        w.write_all(&(n as u64).to_le_bytes())?;
    }
    let meta = serde_json::to_vec(meta).map_err(std::io::Error::other)?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(&meta)?;
    match data {
        CvolData::Complex(v) => {
            let mut buf = Vec::with_capacity(v.len() * 8);
            for c in v.data() {
                buf.extend_from_slice(&c.re.to_le_bytes());
                buf.extend_from_slice(&c.im.to_le_bytes());
            }
            w.write_all(&buf)
        }
        CvolData::Mask { data, .. } => w.write_all(data),
    }
}

fn format_err(what: impl Into<String>) -> Error {
    Error::Format(what.into())
}

pub fn read_cvol<R: Read>(mut r: R) -> Result<(CvolData, CvolMeta)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| format_err(format!("reading CVOL: {e}")))?;
    parse_cvol(&bytes)
}

pub fn parse_cvol(bytes: &[u8]) -> Result<(CvolData, CvolMeta)> {
    const HEAD: usize = 6 + 1 + 24 + 4;
    if bytes.len() < HEAD || &bytes[..6] != CVOL_MAGIC {
        return Err(format_err("not a CVOL file (bad magic or truncated header)"));
    }
    let dtype = DType::from_code(bytes[6]).ok_or_else(|| format_err(format!("unknown CVOL dtype code {}", bytes[6])))?;
    let dim = |i: usize| u64::from_le_bytes(bytes[7 + 8 * i..15 + 8 * i].try_into().unwrap()) as usize;
    let dims = (dim(0), dim(1), dim(2));
    let meta_len = u32::from_le_bytes(bytes[31..35].try_into().unwrap()) as usize;
    let meta_end = HEAD + meta_len;
    if bytes.len() < meta_end {
        return Err(format_err("CVOL metadata block is truncated"));
    }
    let meta: CvolMeta = serde_json::from_slice(&bytes[HEAD..meta_end]).map_err(|e| format_err(format!("CVOL metadata: {e}")))?;
    let n = dims
        .0
        .checked_mul(dims.1)
        .and_then(|x| x.checked_mul(dims.2))
        .ok_or_else(|| format_err("CVOL dims overflow"))?;
    let payload = &bytes[meta_end..];
    if payload.len() != n * dtype.element_size() {
        return Err(format_err(format!(
            "CVOL payload is {} bytes, expected {} for dims {:?}",
            payload.len(),
            n * dtype.element_size(),
            dims
        )));
    }
    let data = match dtype {
        DType::Uint8 => CvolData::Mask {
            dims,
            data: payload.to_vec(),
        },
        DType::Complex64 => {
            let vals = payload
                .chunks_exact(8)
                .map(|c| {
                    num_complex::Complex32::new(
                        f32::from_le_bytes(c[..4].try_into().unwrap()),
                        f32::from_le_bytes(c[4..].try_into().unwrap()),
                    )
                })
                .collect();
            let domain = meta
                .domain_tag
                .as_deref()
                .map(|t| Domain::parse(t).ok_or_else(|| format_err(format!("unknown domain tag {t:?}"))))
                .transpose()?
                .unwrap_or(Domain::KSpace);
            CvolData::Complex(ComplexVolume::from_vec(dims, domain, vals)?)
        }
    };
    Ok((data, meta))
}

pub fn save_cvol(path: &Path, data: &CvolData, meta: &CvolMeta) -> Result<()> {
    let mut buf = Vec::new();
    write_cvol(&mut buf, data, meta).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_cvol(path: &Path) -> Result<(CvolData, CvolMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cvol(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Serialized model: config, provenance and f32 parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub stamp: Stamp,
    pub seed: u64,
    pub params: Vec<Param<f32>>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, stamp: Stamp, seed: u64) -> Self {
        Self {
            model: model.config.clone(),
            stamp,
            seed,
            params: model.params.params.clone(),
        }
    }

    pub fn into_model(self) -> Result<Model<f32>> {
        let mut model = build_model::<f32>(&self.model, self.seed)?;
        model.load_params(ParamStore { params: self.params })?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self).map_err(|e| format_err(e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| format_err(format!("{}: invalid checkpoint: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex32;

    #[test]
    fn cvol_round_trips_both_dtypes() {
        let v = ComplexVolume::from_fn((2, 3, 4), Domain::Image, |z, y, x| Complex32::new(z as f32 - 0.5, (y * x) as f32 * 1e-3));
        let meta = CvolMeta {
            patient_index: Some(3),
            domain_tag: Some("image".into()),
            timepoint: Some(Timepoint::Post2),
            stamp: Some(Stamp::new("abc")),
        };
        let mut buf = Vec::new();
        write_cvol(&mut buf, &CvolData::Complex(v.clone()), &meta).unwrap();
        let (back, m) = parse_cvol(&buf).unwrap();
        assert_eq!(back, CvolData::Complex(v));
        assert_eq!(m, meta);
        let mask = CvolData::Mask {
            dims: (1, 2, 3),
            data: vec![0, 1, 0, 1, 1, 0],
        };
        let mut buf = Vec::new();
        write_cvol(&mut buf, &mask, &CvolMeta::default()).unwrap();
        assert_eq!(parse_cvol(&buf).unwrap().0, mask);
        buf.pop();
        assert!(matches!(parse_cvol(&buf), Err(Error::Format(_))));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        assert_eq!(config_hash("a=1"), config_hash("a=1"));
        assert_ne!(config_hash("a=1"), config_hash("a=2"));
        assert_eq!(config_hash("").len(), 64);
    }
}
