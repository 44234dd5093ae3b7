//! Binary tensor files.
//!
//! Layout: magic `DTSR`, version byte `0x01`, dtype byte `0x00` (f32), rank
//! byte, `rank` little-endian `u32` dimensions, then the row-major
//! little-endian `f32` payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"DTSR";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F32: u8 = 0x00;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 7 {
        return Err(Error::Format(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:02x?}", &bytes[..4])));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {:#04x}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype {:#04x}", bytes[5])));
    }
    let rank = bytes[6] as usize;
    if rank > MAX_RANK {
        return Err(Error::Format(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let header = 7 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("truncated dimension list".into()));
    }
    let shape: Vec<usize> = bytes[7..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != 4 * numel {
        return Err(Error::Format(format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            payload.len(),
            4 * numel
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_to(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&encode(t))
}

pub fn read_from(r: &mut impl Read) -> Result<Tensor> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| Error::Format(format!("read failed: {e}")))?;
    decode(&buf)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
