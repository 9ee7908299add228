//! The `ATNS` binary tensor container.
//!
//! Layout (all integers little-endian):
//! `"ATNS"` | version `u8` | dtype `u8` (0 = f32) | ndim `u32` | dims `u32`×ndim | payload

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Parameterized, Tensor};
use crate::error::{Error, Result};

pub const ATNS_MAGIC: &[u8; 4] = b"ATNS";
pub const ATNS_VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;

pub fn write_tensor_to<W: Write>(t: &Tensor, mut w: W) -> Result<()> {
    w.write_all(ATNS_MAGIC)?;
    w.write_all(&[ATNS_VERSION, DTYPE_F32])?;
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor_from<R: Read>(mut r: R) -> Result<Tensor> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head).map_err(|_| Error::Format("truncated ATNS header".into()))?;
    if &head[..4] != ATNS_MAGIC {
        return Err(Error::Format("bad ATNS magic".into()));
    }
    if head[4] != ATNS_VERSION {
        return Err(Error::Format(format!("unsupported ATNS version {}", head[4])));
    }
    if head[5] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {}", head[5])));
    }
    let ndim = read_u32(&mut r)? as usize;
    let shape = (0..ndim).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(|_| Error::Format("truncated ATNS payload".into()))?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    if shape.is_empty() {
        let v: Vec<f32> = data;
        return Ok(Tensor::scalar(v[0]));
    }
    Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated ATNS header".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(t, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    read_tensor_from(BufReader::new(File::open(path)?))
}

/// Writes every parameter of `model` to `dir/<name>.atns`.
pub fn save_snapshot(model: &dyn Parameterized, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut result = Ok(());
    model.visit_params(&mut |name, t| {
        if result.is_ok() {
            result = write_tensor(t, dir.join(format!("{name}.atns")));
        }
    });
    result
}

/// Restores parameter values saved by [`save_snapshot`], keeping trainability flags.
pub fn load_snapshot(model: &mut dyn Parameterized, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let mut result = Ok(());
    model.visit_params_mut(&mut |name, t| {
        if result.is_err() {
            return;
        }
        match read_tensor(dir.join(format!("{name}.atns"))) {
            Ok(saved) if saved.shape() == t.shape() => t.data_mut().copy_from_slice(saved.data()),
            Ok(saved) => {
                result = Err(Error::Format(format!(
                    "snapshot {name} has shape {:?}, model expects {:?}",
                    saved.shape(),
                    t.shape()
                )))
            }
            Err(e) => result = Err(e),
        }
    });
    result
}
