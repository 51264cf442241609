//! Dense H×W×C tensors: a 16-byte little-endian header (`SLGS` magic,
//! dtype u16, height u32, width u32, channels u16) followed by the raw
//! samples in row-major, channel-interleaved order.

use std::io::{Read, Write};
use std::path::Path;

use super::IoError;

pub const MAGIC: &[u8; 4] = b"SLGS";
pub const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    fn code(&self) -> u16 {
        match self {
            TensorData::F32(_) => 1,
            TensorData::U8(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: TensorData,
}

impl Tensor {
    pub fn from_f32(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * channels);
        Self { height, width, channels, data: TensorData::F32(data) }
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), height * width * channels);
        Self { height, width, channels, data: TensorData::U8(data) }
    }

    pub fn as_f32(&self) -> Result<&[f32], IoError> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U8(_) => Err(IoError::Format("expected an f32 tensor, found u8".into())),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8], IoError> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            TensorData::F32(_) => Err(IoError::Format("expected a u8 tensor, found f32".into())),
        }
    }

    pub fn expect_shape(&self, height: usize, width: usize, channels: usize) -> Result<(), IoError> {
        if (self.height, self.width, self.channels) != (height, width, channels) {
            return Err(IoError::Format(format!(
                "tensor is {}×{}×{}, expected {height}×{width}×{channels}",
                self.height, self.width, self.channels
            )));
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), IoError> {
        let dims = |v: usize, max: usize, what: &str| {
            if v > max {
                Err(IoError::Format(format!("{what} {v} does not fit the header")))
            } else {
                Ok(v)
            }
        };
        w.write_all(MAGIC)?;
        w.write_all(&self.data.code().to_le_bytes())?;
        w.write_all(&(dims(self.height, u32::MAX as usize, "height")? as u32).to_le_bytes())?;
        w.write_all(&(dims(self.width, u32::MAX as usize, "width")? as u32).to_le_bytes())?;
        w.write_all(&(dims(self.channels, u16::MAX as usize, "channels")? as u16).to_le_bytes())?;
        match &self.data {
            TensorData::F32(v) => {
                let mut buf = Vec::with_capacity(v.len() * 4);
                v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
                w.write_all(&buf)?;
            }
            TensorData::U8(v) => w.write_all(v)?,
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, IoError> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header).map_err(|_| IoError::Format("truncated tensor header".into()))?;
        if &header[0..4] != MAGIC {
            return Err(IoError::Format("bad tensor magic".into()));
        }
        let code = u16::from_le_bytes([header[4], header[5]]);
        let height = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(header[10..14].try_into().unwrap()) as usize;
        let channels = u16::from_le_bytes([header[14], header[15]]) as usize;
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| IoError::Format("tensor dimensions overflow".into()))?;
        let truncated = |_| IoError::Format(format!("tensor payload shorter than {height}×{width}×{channels}"));
        let data = match code {
            1 => {
                let mut buf = vec![0u8; n * 4];
                r.read_exact(&mut buf).map_err(truncated)?;
                TensorData::F32(buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
            }
            2 => {
                let mut buf = vec![0u8; n];
                r.read_exact(&mut buf).map_err(truncated)?;
                TensorData::U8(buf)
            }
            other => return Err(IoError::Format(format!("unknown tensor dtype {other}"))),
        };
        debug_assert_eq!(data.len(), n);
        Ok(Self { height, width, channels, data })
    }
}

/// Writes tensors back to back into one file.
pub fn save_tensors(path: &Path, tensors: &[&Tensor]) -> Result<(), IoError> {
    let mut buf = Vec::new();
    for t in tensors {
        t.write_to(&mut buf)?;
    }
    super::write_atomic(path, &buf).map_err(|e| IoError::at(path, e.into()))
}

/// Reads `count` consecutive tensors; trailing bytes are an error.
pub fn load_tensors(path: &Path, count: usize) -> Result<Vec<Tensor>, IoError> {
    let bytes = std::fs::read(path).map_err(|e| IoError::at(path, e.into()))?;
    let mut cursor = std::io::Cursor::new(bytes.as_slice());
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(Tensor::read_from(&mut cursor).map_err(|e| IoError::at(path, e))?);
    }
    if cursor.position() as usize != bytes.len() {
        return Err(IoError::at(path, IoError::Format("trailing bytes after tensors".into())));
    }
    Ok(out)
}
