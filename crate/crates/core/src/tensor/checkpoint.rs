//! Named-tensor checkpoint files.
//!
//! Layout (little-endian): magic `MVDW`, format version `u32`, tensor count
//! `u32`, then per tensor the name length `u32`, UTF-8 name, rank `u32`, one
//! `u32` per dimension and the row-major data as `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MVDW";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &[(&str, &Tensor)]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn save_checkpoint(path: &Path, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let file = File::create(path)?;
    write_checkpoint(BufWriter::new(file), tensors)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Reads every tensor in file order. `origin` only labels errors.
pub fn read_checkpoint<R: Read>(mut r: R, origin: &Path) -> Result<Vec<(String, Tensor)>> {
    let bad = |msg: String| Error::format(origin, msg);
    let truncated = |e: std::io::Error| bad(format!("truncated checkpoint: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}, expected MVDW")));
    }
    let version = read_u32(&mut r).map_err(truncated)?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r).map_err(truncated)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r).map_err(truncated)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r).map_err(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r).map_err(truncated)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw).map_err(truncated)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path)?;
    read_checkpoint(BufReader::new(file), path)
}
