//! `CTT1` binary tensor files.
//!
//! Layout: the 4 magic bytes `CTT1`, one dtype byte (`0` = f32, `1` = u16,
//! `2` = u32), one rank byte, `rank` little-endian u64 dimensions, then the
//! row-major little-endian payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, ImageGrid, LabelMask};

pub const MAGIC: &[u8; 4] = b"CTT1";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U16(Vec<u16>),
    U32(Vec<u32>),
}

impl TensorData {
    fn code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::U16(_) => 1,
            TensorData::U32(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U16(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(Error::Format(format!("rank {} too large", dims.len())));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("dims {dims:?} need {n} elements, payload has {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn f32(dims: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(dims, TensorData::F32(values))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(self.data.code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing CTT1 magic".into()));
        }
        let code = bytes[4];
        let rank = bytes[5] as usize;
        let header = 6 + 8 * rank;
        if bytes.len() < header {
            return Err(Error::Format("truncated CTT1 header".into()));
        }
        let dims: Vec<usize> = (0..rank)
            .map(|i| {
                let s = 6 + 8 * i;
                u64::from_le_bytes(bytes[s..s + 8].try_into().unwrap()) as usize
            })
            .collect();
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("CTT1 dims overflow".into()))?;
        let payload = &bytes[header..];
        let width = match code {
            0 | 2 => 4,
            1 => 2,
            other => return Err(Error::Format(format!("unknown CTT1 dtype code {other}"))),
        };
        if payload.len() != n * width {
            return Err(Error::Format(format!("CTT1 payload is {} bytes, expected {}", payload.len(), n * width)));
        }
        let data = match code {
            0 => TensorData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            1 => TensorData::U16(payload.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().unwrap())).collect()),
            _ => TensorData::U32(payload.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self.data {
            TensorData::F32(v) => Ok(v),
            _ => Err(Error::Format("expected an f32 tensor".into())),
        }
    }
}

impl From<&ImageGrid> for Tensor {
    fn from(img: &ImageGrid) -> Self {
        Tensor { dims: vec![img.height(), img.width()], data: TensorData::F32(img.values().to_vec()) }
    }
}

impl From<&LabelMask> for Tensor {
    fn from(mask: &LabelMask) -> Self {
        Tensor { dims: vec![mask.height(), mask.width()], data: TensorData::U32(mask.ids().to_vec()) }
    }
}

/// Feature maps are stored as `[3, height, width]` f32.
impl From<&FeatureMap> for Tensor {
    fn from(z: &FeatureMap) -> Self {
        Tensor {
            dims: vec![3, z.height(), z.width()],
            data: TensorData::F32(z.data().iter().map(|&v| v as f32).collect()),
        }
    }
}

impl TryFrom<Tensor> for ImageGrid {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        match (t.dims.as_slice(), t.data) {
            (&[h, w], TensorData::F32(v)) => ImageGrid::new(h, w, v),
            _ => Err(Error::Format("image tensor must be rank-2 f32".into())),
        }
    }
}

impl TryFrom<Tensor> for LabelMask {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        match (t.dims.as_slice(), t.data) {
            (&[h, w], TensorData::U32(v)) => LabelMask::new(h, w, v),
            (&[h, w], TensorData::U16(v)) => LabelMask::new(h, w, v.into_iter().map(u32::from).collect()),
            _ => Err(Error::Format("mask tensor must be rank-2 u16/u32".into())),
        }
    }
}

impl TryFrom<Tensor> for FeatureMap {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        match (t.dims.as_slice(), t.data) {
            (&[3, h, w], TensorData::F32(v)) => FeatureMap::from_planar(h, w, v.into_iter().map(f64::from).collect()),
            _ => Err(Error::Format("feature tensor must be [3, h, w] f32".into())),
        }
    }
}
