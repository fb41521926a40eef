//! Length-prefixed named tensor records.
//!
//! A snapshot stream is a sequence of records, each fully self-describing:
//!
//! ```text
//! name_len  u32   UTF-8 byte count of the name
//! name      [u8]  parameter name
//! dtype     u32   0 = f32, 1 = f64
//! rank      u32
//! extents   rank x u32
//! payload   numel x dtype size, little-endian
//! ```
//!
//! All integers are little-endian. Checkpoints concatenate one record per
//! parameter buffer; readers iterate until clean end-of-stream.

use std::io::{self, Read, Write};

use super::{Dtype, Scalar};

/// One decoded record with its payload still in raw bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl RawRecord {
    /// Decodes the payload, checking the stored dtype against `T`.
    pub fn decode<T: Scalar>(&self) -> io::Result<Vec<T>> {
        if self.dtype != T::DTYPE {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("record {:?} has dtype {:?}, expected {:?}", self.name, self.dtype, T::DTYPE),
            ));
        }
        let w = self.dtype.size_bytes();
        Ok(self.bytes.chunks_exact(w).map(T::read_le).collect())
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Appends one record to `w`.
pub fn write_record<T: Scalar, W: Write>(
    w: &mut W,
    name: &str,
    shape: &[usize],
    data: &[T],
) -> io::Result<()> {
    let numel: usize = shape.iter().product();
    assert_eq!(numel, data.len(), "snapshot record {name:?}: shape/payload mismatch");
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(T::DTYPE as u32).to_le_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &e in shape {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(data.len() * T::DTYPE.size_bytes());
    for &v in data {
        v.write_le(&mut payload);
    }
    w.write_all(&payload)
}

/// Reads the next record, or `None` at a clean end of stream.
pub fn read_record<R: Read>(r: &mut R) -> io::Result<Option<RawRecord>> {
    let name_len = match read_u32_or_eof(r)? {
        Some(v) => v as usize,
        None => return Ok(None),
    };
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    let dtype = Dtype::from_tag(read_u32(r)?)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "unknown dtype tag"))?;
    let rank = read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut bytes = vec![0u8; numel * dtype.size_bytes()];
    r.read_exact(&mut bytes)?;
    Ok(Some(RawRecord { name, dtype, shape, bytes }))
}

/// Reads records until end of stream.
pub fn read_all<R: Read>(r: &mut R) -> io::Result<Vec<RawRecord>> {
    let mut out = Vec::new();
    while let Some(rec) = read_record(r)? {
        out.push(rec);
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u32_or_eof<R: Read>(r: &mut R) -> io::Result<Option<u32>> {
    let mut buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return if filled == 0 {
                Ok(None)
            } else {
                Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated record header"))
            };
        }
        filled += n;
    }
    Ok(Some(u32::from_le_bytes(buf)))
}
