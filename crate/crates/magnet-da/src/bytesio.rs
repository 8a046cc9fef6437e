//! Little-endian primitives shared by the `DMDS` and `DMCK` file formats.

use crate::error::{MagnetError, Result};
use std::io::{Read, Write};

pub(crate) fn write_u16<W: Write>(w: &mut W, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f32<W: Write>(w: &mut W, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| MagnetError::Truncated(format!("while reading {what}")))
}

pub(crate) fn read_u8<R: Read>(r: &mut R, what: &str) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b, what)?;
    Ok(b[0])
}

pub(crate) fn read_u16<R: Read>(r: &mut R, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f32<R: Read>(r: &mut R, what: &str) -> Result<f32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(f32::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn read_bytes<R: Read>(r: &mut R, len: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf, what)?;
    Ok(buf)
}

pub(crate) fn read_magic<R: Read>(r: &mut R, expected: &'static str, path: &str) -> Result<()> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if magic != expected.as_bytes() {
        return Err(MagnetError::BadMagic {
            path: path.to_string(),
            expected,
        });
    }
    Ok(())
}

/// Reads a UTF-8 string with a `u16` length prefix.
pub(crate) fn read_string16<R: Read>(r: &mut R, what: &str) -> Result<String> {
    let len = read_u16(r, what)? as usize;
    let bytes = read_bytes(r, len, what)?;
    String::from_utf8(bytes)
        .map_err(|_| MagnetError::Truncated(format!("invalid UTF-8 in {what}")))
}

/// Reads a UTF-8 string with a `u32` length prefix.
pub(crate) fn read_string32<R: Read>(r: &mut R, what: &str) -> Result<String> {
    let len = read_u32(r, what)? as usize;
    let bytes = read_bytes(r, len, what)?;
    String::from_utf8(bytes)
        .map_err(|_| MagnetError::Truncated(format!("invalid UTF-8 in {what}")))
}
