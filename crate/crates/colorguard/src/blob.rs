//! Named f32 parameter blocks in a little binary container, shared by
//! checkpoints and backbone weight files.
//!
//! Layout: magic `CGWB`, u32 version, u32 block count, then per block a
//! u32-length UTF-8 name, u32 f32 count, and raw little-endian f32 data.

use std::io::{self, Read, Write};

pub(crate) const MAGIC: [u8; 4] = *b"CGWB";
pub(crate) const VERSION: u32 = 1;

pub(crate) fn write_blocks<W: Write>(w: &mut W, blocks: &[(String, &[f32])]) -> io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(blocks.len() as u32).to_le_bytes())?;
    for (name, data) in blocks {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(data.len() as u32).to_le_bytes())?;
        for v in *data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub(crate) fn read_blocks<R: Read>(r: &mut R) -> io::Result<Vec<(String, Vec<f32>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad weight blob magic"));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("unsupported weight blob version {version}"),
        ));
    }
    let count = read_u32(r)? as usize;
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "non-utf8 block name"))?;
        let len = read_u32(r)? as usize;
        let mut data = vec![0f32; len];
        let mut buf = [0u8; 4];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        blocks.push((name, data));
    }
    Ok(blocks)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Hex sha256 over raw bytes.
pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    format!("{:x}", Sha256::digest(bytes))
}
