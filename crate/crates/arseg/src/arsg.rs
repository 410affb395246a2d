//! The "ARSG" raster/tensor container used for datasets, mask outputs and
//! checkpoint parameters.
//!
//! Layout, bit-exact:
//!   magic bytes `ARSG` | u8 version (= 1) | u32 little-endian header length |
//!   JSON header `{"dtype": "...", "shape": [...]}` | raw little-endian
//!   row-major payload.
//!
//! Supported dtypes: `u8` (binary masks), `f32` (images, soft masks) and
//! `f64` (checkpoint parameters, where bit-exact round-trips matter).

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{ArsegError, Result};

pub const MAGIC: &[u8; 4] = b"ARSG";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "u8")]
    U8,
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

/// JSON header; field order is fixed so serialized files are byte-stable.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: Dtype,
    shape: Vec<usize>,
}

/// An in-memory tensor as read from or written to an ARSG file.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    U8(ArrayD<u8>),
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
}

impl Tensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            Tensor::U8(_) => Dtype::U8,
            Tensor::F32(_) => Dtype::F32,
            Tensor::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::U8(a) => a.shape(),
            Tensor::F32(a) => a.shape(),
            Tensor::F64(a) => a.shape(),
        }
    }

    pub fn as_f64(&self) -> ArrayD<f64> {
        match self {
            Tensor::U8(a) => a.mapv(|v| v as f64),
            Tensor::F32(a) => a.mapv(|v| v as f64),
            Tensor::F64(a) => a.clone(),
        }
    }
}

fn encode_payload(t: &Tensor) -> Vec<u8> {
    match t {
        Tensor::U8(a) => a.iter().copied().collect(),
        Tensor::F32(a) => {
            let mut out = Vec::with_capacity(a.len() * 4);
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out
        }
        Tensor::F64(a) => {
            let mut out = Vec::with_capacity(a.len() * 8);
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out
        }
    }
}

/// Serializes a tensor to the ARSG byte layout.
pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let header = Header {
        dtype: t.dtype(),
        shape: t.shape().to_vec(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serialization cannot fail");
    let payload = encode_payload(t);
    let mut out = Vec::with_capacity(4 + 1 + 4 + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    out
}

/// Parses a tensor from ARSG bytes; `origin` names the source in errors.
pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Tensor> {
    let fmt = |reason: &str| ArsegError::format(origin, reason);
    if bytes.len() < 9 {
        return Err(fmt("file shorter than fixed preamble"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fmt("bad magic bytes (expected \"ARSG\")"));
    }
    if bytes[4] != VERSION {
        return Err(fmt(&format!(
            "unsupported version {} (expected {VERSION})",
            bytes[4]
        )));
    }
    let header_len = u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]) as usize;
    let header_end = 9usize
        .checked_add(header_len)
        .ok_or_else(|| fmt("header length overflows"))?;
    if bytes.len() < header_end {
        return Err(fmt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[9..header_end])
        .map_err(|e| fmt(&format!("bad JSON header: {e}")))?;
    let n: usize = header.shape.iter().product();
    let payload = &bytes[header_end..];
    let elem = match header.dtype {
        Dtype::U8 => 1,
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    if payload.len() != n * elem {
        return Err(fmt(&format!(
            "payload length {} does not match shape {:?} ({} bytes expected)",
            payload.len(),
            header.shape,
            n * elem
        )));
    }
    let dyn_shape = IxDyn(&header.shape);
    let tensor = match header.dtype {
        Dtype::U8 => Tensor::U8(
            ArrayD::from_shape_vec(dyn_shape, payload.to_vec())
                .map_err(|e| fmt(&e.to_string()))?,
        ),
        Dtype::F32 => {
            let vals: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::F32(ArrayD::from_shape_vec(dyn_shape, vals).map_err(|e| fmt(&e.to_string()))?)
        }
        Dtype::F64 => {
            let vals: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| {
                    f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                })
                .collect();
            Tensor::F64(ArrayD::from_shape_vec(dyn_shape, vals).map_err(|e| fmt(&e.to_string()))?)
        }
    };
    Ok(tensor)
}

pub fn write_file(path: &Path, t: &Tensor) -> Result<()> {
    let bytes = to_bytes(t);
    let mut file = fs::File::create(path).map_err(|e| ArsegError::io(path.display().to_string(), e))?;
    file.write_all(&bytes)
        .map_err(|e| ArsegError::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| ArsegError::io(path.display().to_string(), e))?
        .read_to_end(&mut bytes)
        .map_err(|e| ArsegError::io(path.display().to_string(), e))?;
    from_bytes(&bytes, &path.display().to_string())
}

/// CRC-32 (IEEE 802.3, reflected 0xEDB88320), as used in manifest checksums.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc: u32 = 0xFFFF_FFFF;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn crc32_known_vector() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn roundtrip_f32() {
        let a = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![0.0f32, 1.5, -2.0, 3.25, 4.0, 5.0])
            .unwrap();
        let t = Tensor::F32(a);
        let bytes = to_bytes(&t);
        let back = from_bytes(&bytes, "mem").unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn roundtrip_u8_and_f64() {
        let t = Tensor::U8(ArrayD::from_shape_vec(IxDyn(&[4]), vec![0u8, 1, 1, 0]).unwrap());
        assert_eq!(from_bytes(&to_bytes(&t), "mem").unwrap(), t);
        let t = Tensor::F64(
            ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0f64, -0.5, std::f64::consts::PI, 0.0])
                .unwrap(),
        );
        assert_eq!(from_bytes(&to_bytes(&t), "mem").unwrap(), t);
    }

    #[test]
    fn serialization_is_byte_stable() {
        let t = Tensor::U8(ArrayD::from_shape_vec(IxDyn(&[2]), vec![1u8, 0]).unwrap());
        assert_eq!(to_bytes(&t), to_bytes(&t));
        // Fixed header prefix: magic, version, then the JSON header.
        let b = to_bytes(&t);
        assert_eq!(&b[0..4], b"ARSG");
        assert_eq!(b[4], 1);
    }

    #[test]
    fn truncated_and_corrupt_inputs_error() {
        let t = Tensor::F32(ArrayD::zeros(IxDyn(&[3, 3])));
        let bytes = to_bytes(&t);
        assert!(from_bytes(&bytes[..bytes.len() - 1], "mem").is_err());
        assert!(from_bytes(&bytes[..6], "mem").is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(from_bytes(&bad_magic, "mem").is_err());
        let mut bad_version = bytes;
        bad_version[4] = 9;
        assert!(from_bytes(&bad_version, "mem").is_err());
    }
}
