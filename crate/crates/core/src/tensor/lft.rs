//! LFT1 binary arrays.
//!
//! Layout: magic `LFT1`, u8 dtype code (0 = f32, 1 = u16), u8 rank,
//! `rank` little-endian u32 dimensions, then the little-endian payload.

use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};
use crate::fsutil;

pub const MAGIC: &[u8; 4] = b"LFT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    U16,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::U16 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::U16),
            other => Err(Error::Format(format!("LFT1: unknown dtype code {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::U16 => "u16",
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U16 => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LftData {
    F32(Vec<f32>),
    U16(Vec<u16>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LftArray {
    pub shape: Vec<usize>,
    pub data: LftData,
}

impl LftArray {
    pub fn f32(shape: &[usize], data: Vec<f32>) -> Self {
        LftArray {
            shape: shape.to_vec(),
            data: LftData::F32(data),
        }
    }

    pub fn u16(shape: &[usize], data: Vec<u16>) -> Self {
        LftArray {
            shape: shape.to_vec(),
            data: LftData::U16(data),
        }
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            LftData::F32(_) => DType::F32,
            LftData::U16(_) => DType::U16,
        }
    }

    pub fn into_tensor(self) -> Result<Tensor> {
        match self.data {
            LftData::F32(v) => Tensor::new(&self.shape, v),
            LftData::U16(_) => Err(Error::Format("LFT1: expected f32 payload, found u16".into())),
        }
    }

    pub fn into_u16(self) -> Result<(Vec<usize>, Vec<u16>)> {
        match self.data {
            LftData::U16(v) => Ok((self.shape, v)),
            LftData::F32(_) => Err(Error::Format("LFT1: expected u16 payload, found f32".into())),
        }
    }
}

impl From<&Tensor> for LftArray {
    fn from(t: &Tensor) -> Self {
        LftArray::f32(t.shape(), t.data().to_vec())
    }
}

pub fn encode(arr: &LftArray) -> Vec<u8> {
    let numel: usize = arr.shape.iter().product();
    let mut out = Vec::with_capacity(6 + 4 * arr.shape.len() + numel * arr.dtype().width());
    out.extend_from_slice(MAGIC);
    out.push(arr.dtype().code());
    out.push(arr.shape.len() as u8);
    for &d in &arr.shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match &arr.data {
        LftData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        LftData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

/// Size in bytes an encoded array occupies, read from its header.
pub fn encoded_len(bytes: &[u8]) -> Result<usize> {
    let (dtype, shape, header) = parse_header(bytes)?;
    Ok(header + shape.iter().product::<usize>() * dtype.width())
}

fn parse_header(bytes: &[u8]) -> Result<(DType, Vec<usize>, usize)> {
    if bytes.len() < 6 {
        return Err(Error::Format(format!(
            "LFT1: truncated header ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!(
            "LFT1: bad magic {:?}",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let dtype = DType::from_code(bytes[4])?;
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("LFT1: truncated dimension list".into()));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| {
            let o = 6 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
        })
        .collect();
    if shape.contains(&0) {
        return Err(Error::Format(format!("LFT1: zero dimension in {shape:?}")));
    }
    Ok((dtype, shape, header))
}

/// Decodes exactly one array; trailing bytes are an error.
pub fn decode(bytes: &[u8]) -> Result<LftArray> {
    let (dtype, shape, header) = parse_header(bytes)?;
    let numel: usize = shape.iter().product();
    let expected = header + numel * dtype.width();
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "LFT1: payload is {} bytes, header implies {}",
            bytes.len() - header,
            expected - header
        )));
    }
    let payload = &bytes[header..];
    let data = match dtype {
        DType::F32 => LftData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::U16 => LftData::U16(
            payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(LftArray { shape, data })
}

pub fn read(path: &Path) -> Result<LftArray> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write(path: &Path, arr: &LftArray) -> Result<()> {
    fsutil::write_atomic(path, &encode(arr))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    read(path)?.into_tensor()
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write(path, &LftArray::from(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic_and_dtype() {
        let mut bytes = encode(&LftArray::f32(&[2], vec![1.0, 2.0]));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(m)) if m.contains("magic")));
        let mut bytes = encode(&LftArray::f32(&[2], vec![1.0, 2.0]));
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Format(m)) if m.contains("dtype")));
    }

    #[test]
    fn rejects_truncation() {
        let bytes = encode(&LftArray::u16(&[3], vec![1, 2, 3]));
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(&bytes[..3]).is_err());
    }

    #[test]
    fn header_layout_is_exact() {
        let bytes = encode(&LftArray::u16(&[2, 1], vec![7, 258]));
        assert_eq!(
            bytes,
            vec![b'L', b'F', b'T', b'1', 1, 2, 2, 0, 0, 0, 1, 0, 0, 0, 7, 0, 2, 1]
        );
    }

    proptest! {
        #[test]
        fn f32_round_trip(shape in proptest::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|i| ((i as u32 ^ seed) as f32).sin() * 1e3).collect();
            let arr = LftArray::f32(&shape, data);
            let bytes = encode(&arr);
            prop_assert_eq!(encoded_len(&bytes).unwrap(), bytes.len());
            prop_assert_eq!(decode(&bytes).unwrap(), arr);
        }

        #[test]
        fn u16_round_trip(data in proptest::collection::vec(any::<u16>(), 1..64)) {
            let arr = LftArray::u16(&[data.len()], data);
            prop_assert_eq!(decode(&encode(&arr)).unwrap(), arr);
        }
    }
}
