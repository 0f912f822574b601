//! On-disk tensor container.
//!
//! Layout: 8-byte magic `NCTENSR1`, a little-endian `u32` header length, a
//! UTF-8 JSON header `{"dtype":"f32"|"f64","shape":[...],"order":"C"}`, then
//! the row-major little-endian payload. Round trips are bit-exact.

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"NCTENSR1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    dtype: DType,
    shape: Vec<usize>,
    order: String,
}

/// A dtype-tagged row-major tensor. Payload length always equals
/// `product(shape) * dtype.size()`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorContainer {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl TensorContainer {
    pub fn from_f64(arr: &ArrayD<f64>) -> Self {
        let std = arr.as_standard_layout();
        let mut payload = Vec::with_capacity(std.len() * 8);
        for v in std.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        TensorContainer {
            dtype: DType::F64,
            shape: arr.shape().to_vec(),
            payload,
        }
    }

    pub fn from_f32_values(shape: Vec<usize>, values: impl Iterator<Item = f32>) -> Self {
        let mut payload = Vec::new();
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        TensorContainer {
            dtype: DType::F32,
            shape,
            payload,
        }
    }

    /// Store an f64 array with f32 precision (dataset files).
    pub fn from_f64_as_f32(arr: &ArrayD<f64>) -> Self {
        let std = arr.as_standard_layout();
        Self::from_f32_values(arr.shape().to_vec(), std.iter().map(|&v| v as f32))
    }

    pub fn n_elements(&self) -> usize {
        self.shape.iter().product()
    }

    /// Decode the payload as f64, widening f32 payloads.
    pub fn to_f64(&self) -> ArrayD<f64> {
        let n = self.n_elements();
        let mut out = Vec::with_capacity(n);
        match self.dtype {
            DType::F64 => {
                for chunk in self.payload.chunks_exact(8) {
                    out.push(f64::from_le_bytes(chunk.try_into().unwrap()));
                }
            }
            DType::F32 => {
                for chunk in self.payload.chunks_exact(4) {
                    out.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&self.shape), out).expect("shape/payload checked on load")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            dtype: self.dtype,
            shape: self.shape.clone(),
            order: "C".to_string(),
        };
        let header_bytes = serde_json::to_vec(&header).expect("header serializes");
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
        f.write_all(&(header_bytes.len() as u32).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
        f.write_all(&header_bytes).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.payload).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::CorruptFile {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)
            .map_err(|_| corrupt("short read on magic"))?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut len_bytes = [0u8; 4];
        f.read_exact(&mut len_bytes)
            .map_err(|_| corrupt("short read on header length"))?;
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        f.read_exact(&mut header_bytes)
            .map_err(|_| corrupt("short read on header"))?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| corrupt(&format!("bad header json: {e}")))?;
        if header.order != "C" {
            return Err(corrupt("unsupported element order"));
        }
        let mut payload = Vec::new();
        f.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
        let expected = header.shape.iter().product::<usize>() * header.dtype.size();
        if payload.len() != expected {
            return Err(corrupt(&format!(
                "payload length {} does not match shape (expected {expected})",
                payload.len()
            )));
        }
        Ok(TensorContainer {
            dtype: header.dtype,
            shape: header.shape,
            payload,
        })
    }
}

/// Convenience: save an f64 array at full precision.
pub fn save_f64(arr: &ArrayD<f64>, path: &Path) -> Result<()> {
    TensorContainer::from_f64(arr).save(path)
}

pub fn load_f64(path: &Path) -> Result<ArrayD<f64>> {
    Ok(TensorContainer::load(path)?.to_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;
    use rand::Rng;

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let mut rng = seeding::stream(1, "tensor-test", 0);
        let data: Vec<f64> = (0..4 * 8 * 8).map(|_| rng.random::<f64>()).collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&[4, 8, 8]), data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tns");
        save_f64(&arr, &path).unwrap();
        let back = load_f64(&path).unwrap();
        assert_eq!(arr, back);
        // Bytes on disk are stable too.
        let b1 = std::fs::read(&path).unwrap();
        save_f64(&arr, &path).unwrap();
        assert_eq!(b1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn scalar_with_empty_shape_roundtrips() {
        let arr = ArrayD::from_elem(IxDyn(&[]), 3.25f64);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.tns");
        save_f64(&arr, &path).unwrap();
        let back = load_f64(&path).unwrap();
        assert_eq!(back.shape(), &[] as &[usize]);
        assert_eq!(back.first(), Some(&3.25));
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let arr = ArrayD::from_elem(IxDyn(&[16]), 1.0f64);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tns");
        save_f64(&arr, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match TensorContainer::load(&path) {
            Err(Error::CorruptFile { .. }) => {}
            other => panic!("expected corrupt-file error, got {other:?}"),
        }
    }

    #[test]
    fn f32_storage_widens_back() {
        let arr = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.5, 0.25, 1.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t32.tns");
        TensorContainer::from_f64_as_f32(&arr).save(&path).unwrap();
        let back = load_f64(&path).unwrap();
        assert_eq!(arr, back); // exactly representable values
    }
}
