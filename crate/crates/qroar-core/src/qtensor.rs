//! Tensor file format: a one-line JSON header followed by raw values.
//!
//! The header line carries `format_version`, `name`, `dims`, `dtype`
//! (`"f64"`, `"f32"` or `"i32"`) and `layout` (always `"row-major"`). The
//! payload starts immediately after the header's newline and holds exactly
//! `product(dims)` little-endian values of the declared width. Writes go
//! through a temp-file-then-rename so readers never observe partial files.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Matrix;

pub const QTENSOR_FORMAT_VERSION: u32 = 1;

/// Payload element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
    I32,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F64 => "f64",
            DType::F32 => "f32",
            DType::I32 => "i32",
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 | DType::I32 => 4,
        }
    }

    fn parse(name: &str) -> Result<Self> {
        match name {
            "f64" => Ok(DType::F64),
            "f32" => Ok(DType::F32),
            "i32" => Ok(DType::I32),
            other => Err(Error::Format(format!("unknown dtype {other:?}"))),
        }
    }
}

/// Typed payload.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F64(_) => DType::F64,
            TensorData::F32(_) => DType::F32,
            TensorData::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A named tensor with shape and typed payload.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    name: String,
    dims: Vec<usize>,
    dtype: String,
    layout: String,
}

impl QTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let expect: usize = dims.iter().product();
        if expect != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} imply {expect} values, payload has {}",
                data.len()
            )));
        }
        Ok(Self { name: name.into(), dims, data })
    }

    pub fn from_matrix(name: impl Into<String>, m: &Matrix<f64>) -> Self {
        Self {
            name: name.into(),
            dims: vec![m.rows(), m.cols()],
            data: TensorData::F64(m.data().to_vec()),
        }
    }

    /// Interpret a 2-dimensional f64 tensor as a matrix.
    pub fn to_matrix(&self) -> Result<Matrix<f64>> {
        if self.dims.len() != 2 {
            return Err(Error::Shape(format!(
                "tensor {:?} has dims {:?}, expected a matrix",
                self.name, self.dims
            )));
        }
        match &self.data {
            TensorData::F64(v) => Matrix::new(self.dims[0], self.dims[1], v.clone()),
            other => Err(Error::Format(format!(
                "tensor {:?} is {}, expected f64",
                self.name,
                other.dtype().name()
            ))),
        }
    }

    /// Serialize to the on-disk byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: QTENSOR_FORMAT_VERSION,
            name: self.name.clone(),
            dims: self.dims.clone(),
            dtype: self.data.dtype().name().to_string(),
            layout: "row-major".to_string(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        match &self.data {
            TensorData::F64(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::I32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    /// Parse the on-disk byte layout.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("missing header line".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| Error::Format(format!("bad header: {e}")))?;
        if header.format_version != QTENSOR_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        if header.layout != "row-major" {
            return Err(Error::Format(format!("unsupported layout {:?}", header.layout)));
        }
        let dtype = DType::parse(&header.dtype)?;
        let payload = &bytes[newline + 1..];
        let count: usize = header.dims.iter().product();
        if payload.len() != count * dtype.width() {
            return Err(Error::Format(format!(
                "payload of {} bytes, expected {} ({} x {}-byte {})",
                payload.len(),
                count * dtype.width(),
                count,
                dtype.width(),
                dtype.name()
            )));
        }
        let data = match dtype {
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect(),
            ),
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                    .collect(),
            ),
            DType::I32 => TensorData::I32(
                payload
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().expect("chunk of 4")))
                    .collect(),
            ),
        };
        QTensor::new(header.name, header.dims, data)
    }
}

/// Write `bytes` to `path` atomically: write a sibling temp file, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp_path = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp_path)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp_path, path)?;
    Ok(())
}

/// Write a tensor file atomically.
pub fn write_qtensor(path: &Path, tensor: &QTensor) -> Result<()> {
    atomic_write(path, &tensor.to_bytes())
}

/// Read a tensor file.
pub fn read_qtensor(path: &Path) -> Result<QTensor> {
    let bytes = fs::read(path)?;
    QTensor::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_round_trip_f64() {
        let t = QTensor::new(
            "w",
            vec![2, 3],
            TensorData::F64(vec![1.0, -2.5, 3.25, 0.0, f64::MIN_POSITIVE, 1e300]),
        )
        .unwrap();
        let bytes = t.to_bytes();
        let back = QTensor::from_bytes(&bytes).unwrap();
        assert_eq!(t, back);
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn byte_round_trip_i32_and_f32() {
        let t = QTensor::new("codes", vec![4], TensorData::I32(vec![-8, 0, 7, 42])).unwrap();
        assert_eq!(QTensor::from_bytes(&t.to_bytes()).unwrap(), t);
        let t = QTensor::new("x", vec![2], TensorData::F32(vec![1.5, -0.25])).unwrap();
        assert_eq!(QTensor::from_bytes(&t.to_bytes()).unwrap(), t);
    }

    #[test]
    fn header_is_first_line_json() {
        let t = QTensor::new("h", vec![1], TensorData::F64(vec![7.0])).unwrap();
        let bytes = t.to_bytes();
        let newline = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&bytes[..newline]).unwrap();
        assert_eq!(header["dtype"], "f64");
        assert_eq!(header["layout"], "row-major");
        assert_eq!(header["dims"][0], 1);
        assert_eq!(bytes.len(), newline + 1 + 8);
    }

    #[test]
    fn payload_length_is_checked() {
        let t = QTensor::new("w", vec![2], TensorData::F64(vec![1.0, 2.0])).unwrap();
        let mut bytes = t.to_bytes();
        bytes.pop();
        assert!(matches!(QTensor::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn dims_must_match_payload() {
        assert!(QTensor::new("w", vec![3], TensorData::F64(vec![1.0])).is_err());
    }

    #[test]
    fn file_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.qt");
        let t = QTensor::new("w", vec![8], TensorData::F64((0..8).map(|i| i as f64).collect()))
            .unwrap();
        write_qtensor(&path, &t).unwrap();
        let first = std::fs::read(&path).unwrap();
        write_qtensor(&path, &t).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second);
        assert_eq!(read_qtensor(&path).unwrap(), t);
    }

    #[test]
    fn matrix_round_trip() {
        let m = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = QTensor::from_matrix("m", &m);
        assert_eq!(t.to_matrix().unwrap(), m);
    }
}
