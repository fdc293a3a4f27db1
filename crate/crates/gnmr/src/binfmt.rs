//! Little-endian primitives shared by the binary artifact formats.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub(crate) fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    if len > 1 << 20 {
        return Err(Error::Format(format!("string length {len} is implausible")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("invalid utf8: {e}")))
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, vals: &[f64]) -> Result<()> {
    for v in vals {
        w.write_f64::<LittleEndian>(*v)?;
    }
    Ok(())
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(r.read_f64::<LittleEndian>()?);
    }
    Ok(out)
}
