//! Little-endian binary framing shared by the episode and checkpoint
//! formats: 8-byte magic, u16 version, then format-specific payload.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 8], found: [u8; 8] },
    #[error("unsupported version {found} (expected {expected})")]
    BadVersion { expected: u16, found: u16 },
    #[error("corrupt payload: {0}")]
    Corrupt(String),
}

pub fn write_header<W: Write>(w: &mut W, magic: &[u8; 8], version: u16) -> Result<(), FormatError> {
    w.write_all(magic)?;
    w.write_u16::<LittleEndian>(version)?;
    Ok(())
}

pub fn read_header<R: Read>(r: &mut R, magic: &[u8; 8], version: u16) -> Result<(), FormatError> {
    let mut found = [0u8; 8];
    r.read_exact(&mut found)?;
    if &found != magic {
        return Err(FormatError::BadMagic { expected: *magic, found });
    }
    let v = r.read_u16::<LittleEndian>()?;
    if v != version {
        return Err(FormatError::BadVersion { expected: version, found: v });
    }
    Ok(())
}

pub fn write_f32s<W: Write>(w: &mut W, xs: &[f32]) -> Result<(), FormatError> {
    for &x in xs {
        w.write_f32::<LittleEndian>(x)?;
    }
    Ok(())
}

pub fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>, FormatError> {
    let mut out = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut out)?;
    Ok(out)
}

pub fn write_str<W: Write>(w: &mut W, s: &str) -> Result<(), FormatError> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

/// Length-prefixed UTF-8 with a hard cap so corrupt lengths fail fast
/// instead of attempting a huge allocation.
pub fn read_str<R: Read>(r: &mut R, max_len: usize) -> Result<String, FormatError> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    if len > max_len {
        return Err(FormatError::Corrupt(format!(
            "string length {len} exceeds cap {max_len}"
        )));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| FormatError::Corrupt(format!("non-utf8 string: {e}")))
}
