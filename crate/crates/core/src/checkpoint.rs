//! Versioned binary container for a model spec, its parameters and
//! training metadata.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "SCNET001"
//! spec_len     u32       followed by the canonical spec text (UTF-8)
//! meta_len     u32       followed by `key=value` lines (UTF-8)
//! step_count   u64
//! param_count  u32
//! per parameter, in name order:
//!   name_len   u16       followed by the name (UTF-8)
//!   elem       u8        0 = f32, 1 = f64
//!   ndim       u8        followed by ndim x u64 dimensions
//!   payload    product(dims) x elem size bytes, little-endian scalars
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::model::{ModelError, ModelSpec, ModelState};
use crate::tensor::{ElemType, Scalar, Tensor, TensorError};

pub const MAGIC: &[u8; 8] = b"SCNET001";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint or unsupported version: magic is {found:?}, expected \"SCNET001\"")]
    Version { found: String },
    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: String },
    #[error("parameter `{name}` has unknown element type tag {tag}")]
    ElemType { name: String, tag: u8 },
    #[error("parameter `{name}` is {found} but earlier parameters are {expected}")]
    MixedPrecision {
        name: String,
        expected: ElemType,
        found: ElemType,
    },
    #[error("{what} is not valid UTF-8")]
    Utf8 { what: String },
    #[error("{0} trailing bytes after the last parameter")]
    Trailing(usize),
    #[error("parameter `{name}`: {source}")]
    Param {
        name: String,
        #[source]
        source: TensorError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// Parameters at whichever precision they were saved in.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyState {
    F32(ModelState<f32>),
    F64(ModelState<f64>),
}

impl AnyState {
    pub fn wrap<T: Scalar>(state: &ModelState<T>) -> AnyState {
        match T::ELEM {
            ElemType::F32 => AnyState::F32(state.cast()),
            ElemType::F64 => AnyState::F64(state.cast()),
        }
    }

    pub fn elem_type(&self) -> ElemType {
        match self {
            AnyState::F32(_) => ElemType::F32,
            AnyState::F64(_) => ElemType::F64,
        }
    }

    /// Converts to `T`, exact when widening or when `T` matches.
    pub fn to_precision<T: Scalar>(&self) -> ModelState<T> {
        match self {
            AnyState::F32(s) => s.cast(),
            AnyState::F64(s) => s.cast(),
        }
    }

    pub fn step_count(&self) -> u64 {
        match self {
            AnyState::F32(s) => s.step_count,
            AnyState::F64(s) => s.step_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub state: AnyState,
    pub meta: BTreeMap<String, String>,
}

fn put_len(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

pub fn encode<T: Scalar>(
    spec: &ModelSpec,
    state: &ModelState<T>,
    meta: &BTreeMap<String, String>,
) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + state.num_scalars() * T::ELEM.size());
    out.extend_from_slice(MAGIC);
    put_len(&mut out, spec.to_text().as_bytes());
    let meta_text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    put_len(&mut out, meta_text.as_bytes());
    out.extend_from_slice(&state.step_count.to_le_bytes());
    out.extend_from_slice(&(state.params.len() as u32).to_le_bytes());
    for (name, t) in &state.params {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::ELEM.tag());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: impl FnOnce() -> String) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated { what: what() }),
        }
    }

    fn u8(&mut self, what: impl FnOnce() -> String) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: impl FnOnce() -> String) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: impl FnOnce() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: impl FnOnce() -> String) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn text(&mut self, what: &str) -> Result<&'a str> {
        let len = self.u32(|| format!("{what} length"))? as usize;
        let raw = self.take(len, || what.to_string())?;
        std::str::from_utf8(raw).map_err(|_| CheckpointError::Utf8 {
            what: what.to_string(),
        })
    }
}

fn read_params<T: Scalar>(
    r: &mut Reader<'_>,
    first: (String, Vec<usize>),
    count: usize,
) -> Result<BTreeMap<String, Tensor<T>>> {
    let mut params = BTreeMap::new();
    let mut header = Some(first);
    for i in 0..count {
        let (name, shape) = match header.take() {
            Some(h) => h,
            None => {
                let (name, elem, shape) = read_header(r, i)?;
                if elem != T::ELEM {
                    return Err(CheckpointError::MixedPrecision {
                        name,
                        expected: T::ELEM,
                        found: elem,
                    });
                }
                (name, shape)
            }
        };
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = numel
            .and_then(|n| n.checked_mul(T::ELEM.size()))
            .ok_or_else(|| CheckpointError::Truncated {
                what: format!("payload of parameter `{name}`"),
            })?;
        let raw = r.take(bytes, || format!("payload of parameter `{name}`"))?;
        let data = raw.chunks_exact(T::ELEM.size()).map(T::read_le).collect();
        let t = Tensor::new(shape, data).map_err(|source| CheckpointError::Param {
            name: name.clone(),
            source,
        })?;
        params.insert(name, t);
    }
    Ok(params)
}

fn read_header(r: &mut Reader<'_>, index: usize) -> Result<(String, ElemType, Vec<usize>)> {
    let len = r.u16(|| format!("name length of parameter #{index}"))? as usize;
    let raw = r.take(len, || format!("name of parameter #{index}"))?;
    let name = std::str::from_utf8(raw)
        .map_err(|_| CheckpointError::Utf8 {
            what: format!("name of parameter #{index}"),
        })?
        .to_string();
    let tag = r.u8(|| format!("element type of parameter `{name}`"))?;
    let elem = ElemType::from_tag(tag).ok_or_else(|| CheckpointError::ElemType {
        name: name.clone(),
        tag,
    })?;
    let ndim = r.u8(|| format!("rank of parameter `{name}`"))? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u64(|| format!("shape of parameter `{name}`"))? as usize);
    }
    Ok((name, elem, shape))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r
        .take(8, || "magic".into())
        .map_err(|_| CheckpointError::Version {
            found: String::from_utf8_lossy(bytes).into_owned(),
        })?;
    if magic != MAGIC {
        return Err(CheckpointError::Version {
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let spec = ModelSpec::parse(r.text("model spec")?)?;
    let meta = r
        .text("metadata")?
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let step_count = r.u64(|| "step count".into())?;
    let count = r.u32(|| "parameter count".into())? as usize;

    let state = if count == 0 {
        AnyState::F32(ModelState {
            params: BTreeMap::new(),
            step_count,
        })
    } else {
        let (name, elem, shape) = read_header(&mut r, 0)?;
        match elem {
            ElemType::F32 => AnyState::F32(ModelState {
                params: read_params(&mut r, (name, shape), count)?,
                step_count,
            }),
            ElemType::F64 => AnyState::F64(ModelState {
                params: read_params(&mut r, (name, shape), count)?,
                step_count,
            }),
        }
    };
    if r.pos != bytes.len() {
        return Err(CheckpointError::Trailing(bytes.len() - r.pos));
    }
    match &state {
        AnyState::F32(s) => s.check_against(&spec)?,
        AnyState::F64(s) => s.check_against(&spec)?,
    }
    Ok(Checkpoint { spec, state, meta })
}

pub fn save<T: Scalar>(
    path: &Path,
    spec: &ModelSpec,
    state: &ModelState<T>,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    std::fs::write(path, encode(spec, state, meta)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}
