//! UVOL container: one JSON header line terminated by `\n`, then the raw
//! little-endian payload in linear index order. No trailing bytes.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BinaryMask, Dims, Grid, ProbMap, Spacing, UncertaintyMap, Volume, VolumeError};
use crate::Scalar;

pub const MAGIC: &str = "UVOL1";

#[derive(Debug, Error)]
pub enum UvolError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unknown dtype {0:?}")]
    UnknownDtype(String),
    #[error("payload length mismatch: expected {expected} bytes, found {actual}")]
    PayloadLength { expected: usize, actual: usize },
    #[error("invalid grid: {0}")]
    Grid(#[from] VolumeError),
    #[error("expected a {expected} payload, file has dtype {found}")]
    WrongKind { expected: &'static str, found: &'static str },
}

#[derive(Serialize, Deserialize)]
struct Header {
    magic: String,
    dtype: String,
    dims: [usize; 3],
    spacing: [f64; 3],
}

/// Payload as read from disk. `f32` files may hold intensities, probabilities
/// or uncertainties; the caller picks the interpretation.
#[derive(Clone, Debug, PartialEq)]
pub enum UvolGrid {
    F32(Grid<f32>),
    Mask(BinaryMask),
}

impl UvolGrid {
    fn kind(&self) -> &'static str {
        match self {
            UvolGrid::F32(_) => "f32",
            UvolGrid::Mask(_) => "u8",
        }
    }

    pub fn dims(&self) -> Dims {
        match self {
            UvolGrid::F32(g) => g.dims(),
            UvolGrid::Mask(m) => m.dims(),
        }
    }

    pub fn into_f32(self) -> Result<Grid<f32>, UvolError> {
        match self {
            UvolGrid::F32(g) => Ok(g),
            other => Err(UvolError::WrongKind {
                expected: "f32",
                found: other.kind(),
            }),
        }
    }

    pub fn into_volume<T: Scalar>(self) -> Result<Volume<T>, UvolError> {
        Ok(Volume::from_grid(self.into_f32()?)?.cast())
    }

    pub fn into_prob_map<T: Scalar>(self) -> Result<ProbMap<T>, UvolError> {
        Ok(ProbMap::from_grid(self.into_f32()?)?.cast())
    }

    pub fn into_uncertainty<T: Scalar>(self) -> Result<UncertaintyMap<T>, UvolError> {
        Ok(UncertaintyMap::from_grid(self.into_f32()?)?.cast())
    }

    pub fn into_mask(self) -> Result<BinaryMask, UvolError> {
        match self {
            UvolGrid::Mask(m) => Ok(m),
            other => Err(UvolError::WrongKind {
                expected: "u8",
                found: other.kind(),
            }),
        }
    }
}

/// Payload encodings a grid can be written as.
pub enum Payload<'a> {
    F32(Vec<f32>),
    U8(&'a [u8]),
}

/// Grids that can be serialized to UVOL.
pub trait UvolWrite {
    fn uvol_dims(&self) -> Dims;
    fn uvol_spacing(&self) -> Spacing;
    fn uvol_payload(&self) -> Result<Payload<'_>, UvolError>;
}

macro_rules! float_uvol {
    ($name:ident) => {
        impl<T: Scalar> UvolWrite for $name<T> {
            fn uvol_dims(&self) -> Dims {
                self.dims()
            }
            fn uvol_spacing(&self) -> Spacing {
                self.spacing()
            }
            fn uvol_payload(&self) -> Result<Payload<'_>, UvolError> {
                Ok(Payload::F32(self.data().iter().map(|v| v.to_f32_lossy()).collect()))
            }
        }
    };
}

float_uvol!(Volume);
float_uvol!(ProbMap);
float_uvol!(UncertaintyMap);

impl UvolWrite for BinaryMask {
    fn uvol_dims(&self) -> Dims {
        self.dims()
    }
    fn uvol_spacing(&self) -> Spacing {
        self.spacing()
    }
    fn uvol_payload(&self) -> Result<Payload<'_>, UvolError> {
        Ok(Payload::U8(self.data()))
    }
}

/// Raw byte grids are written as masks and must already be binary.
impl UvolWrite for Grid<u8> {
    fn uvol_dims(&self) -> Dims {
        self.dims()
    }
    fn uvol_spacing(&self) -> Spacing {
        self.spacing()
    }
    fn uvol_payload(&self) -> Result<Payload<'_>, UvolError> {
        if let Some(index) = self.data().iter().position(|&v| v > 1) {
            return Err(VolumeError::NonBinary {
                index,
                value: self.data()[index],
            }
            .into());
        }
        Ok(Payload::U8(self.data()))
    }
}

impl UvolWrite for Grid<f32> {
    fn uvol_dims(&self) -> Dims {
        self.dims()
    }
    fn uvol_spacing(&self) -> Spacing {
        self.spacing()
    }
    fn uvol_payload(&self) -> Result<Payload<'_>, UvolError> {
        Ok(Payload::F32(self.data().to_vec()))
    }
}

/// Serializes a grid to UVOL bytes.
pub fn encode_uvol<G: UvolWrite + ?Sized>(grid: &G) -> Result<Vec<u8>, UvolError> {
    let payload = grid.uvol_payload()?;
    let header = Header {
        magic: MAGIC.to_string(),
        dtype: match payload {
            Payload::F32(_) => "f32".into(),
            Payload::U8(_) => "u8".into(),
        },
        dims: grid.uvol_dims().as_array(),
        spacing: grid.uvol_spacing().as_array(),
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| UvolError::Header(e.to_string()))?;
    out.push(b'\n');
    match payload {
        Payload::F32(values) => {
            out.reserve(values.len() * 4);
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Payload::U8(bytes) => out.extend_from_slice(bytes),
    }
    Ok(out)
}

pub fn decode_uvol(bytes: &[u8]) -> Result<UvolGrid, UvolError> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| UvolError::Header("missing header terminator".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| UvolError::Header(e.to_string()))?;
    if header.magic != MAGIC {
        return Err(UvolError::Header(format!("bad magic {:?}", header.magic)));
    }
    let [d, h, w] = header.dims;
    let dims = Dims::new(d, h, w)?;
    let spacing = Spacing::new(header.spacing[0], header.spacing[1], header.spacing[2])?;
    let payload = &bytes[newline + 1..];
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "u8" => 1,
        other => return Err(UvolError::UnknownDtype(other.to_string())),
    };
    let expected = dims.len() * width;
    if payload.len() != expected {
        return Err(UvolError::PayloadLength {
            expected,
            actual: payload.len(),
        });
    }
    if width == 1 {
        return Ok(UvolGrid::Mask(BinaryMask::new(dims, spacing, payload.to_vec())?));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(UvolGrid::F32(Grid::new(dims, spacing, data)?))
}

pub fn read_uvol(path: impl AsRef<Path>) -> Result<UvolGrid, UvolError> {
    decode_uvol(&fs::read(path)?)
}

pub fn write_uvol<G: UvolWrite + ?Sized>(grid: &G, path: impl AsRef<Path>) -> Result<(), UvolError> {
    let bytes = encode_uvol(grid)?;
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}
