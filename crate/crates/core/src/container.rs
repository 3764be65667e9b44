//! Shared binary layout: 4 magic bytes, u16 version, u32 header length, JSON
//! header, raw little-endian body.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Upper bound on header size, to fail fast on garbage input.
const MAX_HEADER: u32 = 64 << 20;

pub(crate) fn write_container<W: Write>(
    w: &mut W,
    magic: &[u8; 4],
    version: u16,
    header: &[u8],
    body: &[u8],
) -> Result<()> {
    let len = u32::try_from(header.len()).map_err(|_| Error::InvalidInput("header too large".into()))?;
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(header)?;
    w.write_all(body)?;
    w.flush()?;
    Ok(())
}

pub(crate) fn read_container<R: Read>(
    mut r: R,
    magic: &[u8; 4],
    version: u16,
    what: &'static str,
) -> Result<(Vec<u8>, Vec<u8>)> {
    let bad = |detail: String| Error::Format { what, detail };
    let mut fixed = [0u8; 10];
    r.read_exact(&mut fixed).map_err(|_| bad("truncated preamble".into()))?;
    if &fixed[..4] != magic {
        return Err(bad(format!("bad magic {:?}", &fixed[..4])));
    }
    let v = u16::from_le_bytes([fixed[4], fixed[5]]);
    if v != version {
        return Err(bad(format!("unsupported version {v}")));
    }
    let len = u32::from_le_bytes([fixed[6], fixed[7], fixed[8], fixed[9]]);
    if len > MAX_HEADER {
        return Err(bad(format!("header length {len} is implausible")));
    }
    let mut header = vec![0u8; len as usize];
    r.read_exact(&mut header).map_err(|_| bad("truncated header".into()))?;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    Ok((header, body))
}
