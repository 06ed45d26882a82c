//! Dense tensor (`KMVT`) and PCA model (`KMVP`) binary files, little-endian.
//!
//! KMVT layout: magic, version u32, dtype u32, C u32, H u32, W u32, then
//! `C·H·W` values channel-major. KMVP layout: magic, C u32, K u32, mean
//! (C × f32), basis (C·K × f32, column-major).

use super::{read_file, write_file, FormatError};
use crate::features::{FeatureMap, PcaModel};
use crate::geometry::DisparityMap;
use nalgebra::{DMatrix, DVector};
use std::path::{Path, PathBuf};

pub const TENSOR_MAGIC: &[u8; 4] = b"KMVT";
pub const PCA_MAGIC: &[u8; 4] = b"KMVP";
pub const TENSOR_VERSION: u32 = 1;

/// Element encoding of a tensor file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    /// IEEE-754 binary32, tag 0.
    #[default]
    F32,
    /// IEEE-754 binary64, tag 1.
    F64,
}

impl Dtype {
    pub fn tag(self) -> u32 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// An in-memory `C × H × W` tensor together with the dtype it was stored as.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub dtype: Dtype,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            channels * height * width,
            "tensor buffer size mismatch"
        );
        Self {
            channels,
            height,
            width,
            dtype: Dtype::F32,
            data,
        }
    }

    pub fn with_dtype(mut self, dtype: Dtype) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn from_feature_map(map: &FeatureMap) -> Self {
        Self::new(
            map.channels(),
            map.height(),
            map.width(),
            map.data().to_vec(),
        )
    }

    pub fn from_disparity(map: &DisparityMap) -> Self {
        Self::new(1, map.height, map.width, map.values.clone())
    }

    /// A single-channel tensor of scalars laid out on an `H × W` grid.
    pub fn scalar_grid(height: usize, width: usize, values: Vec<f64>) -> Self {
        Self::new(1, height, width, values)
    }

    pub fn into_feature_map(self) -> Result<FeatureMap, crate::features::FeatureError> {
        FeatureMap::new(self.channels, self.height, self.width, self.data)
    }

    pub fn into_disparity(self) -> Option<DisparityMap> {
        (self.channels == 1).then(|| DisparityMap::from_values(self.width, self.height, self.data))
    }
}

fn placeholder() -> PathBuf {
    PathBuf::from("<memory>")
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::Truncated {
                path: placeholder(),
                detail: format!("need {n} bytes for {what} at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn values(&mut self, n: usize, dtype: Dtype) -> Result<Vec<f64>, FormatError> {
        let raw = self.take(n * dtype.width(), "tensor payload")?;
        Ok(match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        })
    }

    fn magic(&mut self, expected: &'static [u8; 4]) -> Result<(), FormatError> {
        let found = self.take(4, "magic")?;
        if found != expected {
            return Err(FormatError::BadMagic {
                path: placeholder(),
                found: String::from_utf8_lossy(found).into_owned(),
                expected: std::str::from_utf8(expected).unwrap(),
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), FormatError> {
        if self.pos != self.bytes.len() {
            return Err(FormatError::Invalid {
                path: placeholder(),
                message: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

fn push_values(out: &mut Vec<u8>, values: &[f64], dtype: Dtype) {
    match dtype {
        Dtype::F32 => values
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        Dtype::F64 => values
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + t.data.len() * t.dtype.width());
    out.extend_from_slice(TENSOR_MAGIC);
    for v in [
        TENSOR_VERSION,
        t.dtype.tag(),
        t.channels as u32,
        t.height as u32,
        t.width as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    push_values(&mut out, &t.data, t.dtype);
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(TENSOR_MAGIC)?;
    let version = r.u32("version")?;
    if version != TENSOR_VERSION {
        return Err(FormatError::UnsupportedVersion {
            path: placeholder(),
            version,
        });
    }
    let tag = r.u32("dtype")?;
    let dtype = Dtype::from_tag(tag).ok_or(FormatError::UnsupportedDtype {
        path: placeholder(),
        tag,
    })?;
    let channels = r.u32("channels")? as usize;
    let height = r.u32("height")? as usize;
    let width = r.u32("width")? as usize;
    let data = r.values(channels * height * width, dtype)?;
    r.finish()?;
    Ok(Tensor {
        channels,
        height,
        width,
        dtype,
        data,
    })
}

pub fn read_tensor(path: &Path) -> Result<Tensor, FormatError> {
    decode_tensor(&read_file(path)?).map_err(|e| e.at(path))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<(), FormatError> {
    write_file(path, &encode_tensor(t))
}

fn encode_pca(model: &PcaModel) -> Vec<u8> {
    let (c, k) = model.basis.shape();
    let mut out = Vec::with_capacity(12 + 4 * c * (k + 1));
    out.extend_from_slice(PCA_MAGIC);
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&(k as u32).to_le_bytes());
    push_values(&mut out, model.mean.as_slice(), Dtype::F32);
    // nalgebra storage is already column-major
    push_values(&mut out, model.basis.as_slice(), Dtype::F32);
    out
}

fn decode_pca(bytes: &[u8]) -> Result<PcaModel, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(PCA_MAGIC)?;
    let c = r.u32("C")? as usize;
    let k = r.u32("K")? as usize;
    let mean = DVector::from_vec(r.values(c, Dtype::F32)?);
    let basis = DMatrix::from_vec(c, k, r.values(c * k, Dtype::F32)?);
    r.finish()?;
    PcaModel::from_parts(mean, basis).map_err(|e| FormatError::Invalid {
        path: placeholder(),
        message: e.to_string(),
    })
}

pub fn read_pca(path: &Path) -> Result<PcaModel, FormatError> {
    decode_pca(&read_file(path)?).map_err(|e| e.at(path))
}

pub fn write_pca(path: &Path, model: &PcaModel) -> Result<(), FormatError> {
    write_file(path, &encode_pca(model))
}
