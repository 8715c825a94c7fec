//! Flat named-tensor checkpoint archive.
//!
//! Layout (all integers little-endian):
//!   magic "FGDW" | u32 version | u32 entry count
//!   per entry: u32 name length | name bytes (UTF-8) | u8 dtype (1=f32,
//!   2=f64) | u8 rank | rank×u64 dims | raw little-endian values.

use crate::error::{Error, Result};
use crate::numerics::{Dtype, Scalar, Tensor};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FGDW";
const VERSION: u32 = 1;

/// One named tensor read back from an archive.
pub type CheckpointEntry<T> = (String, Tensor<T>);

fn dtype_code(d: Dtype) -> u8 {
    match d {
        Dtype::F32 => 1,
        Dtype::F64 => 2,
    }
}

pub fn write_checkpoint<T: Scalar>(path: &Path, entries: &[(&str, &Tensor<T>)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        out.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        out.write_all(name_bytes)?;
        out.write_all(&[dtype_code(T::DTYPE), tensor.rank() as u8])?;
        for &d in tensor.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        match T::DTYPE {
            Dtype::F32 => {
                for &v in tensor.data() {
                    out.write_all(&(v.as_f64() as f32).to_le_bytes())?;
                }
            }
            Dtype::F64 => {
                for &v in tensor.data() {
                    out.write_all(&v.as_f64().to_le_bytes())?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Vec<CheckpointEntry<T>>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::data(format!(
            "{}: not a checkpoint archive (bad magic)",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::data(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(Error::data(format!("checkpoint name length {name_len} implausible")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::data("checkpoint name is not UTF-8".to_string()))?;
        let mut meta = [0u8; 2];
        r.read_exact(&mut meta)?;
        let (dtype, rank) = (meta[0], meta[1] as usize);
        if dtype != dtype_code(T::DTYPE) {
            return Err(Error::data(format!(
                "checkpoint entry {name} stores dtype code {dtype}, expected {}",
                dtype_code(T::DTYPE)
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        match T::DTYPE {
            Dtype::F32 => {
                let mut b = [0u8; 4];
                for _ in 0..numel {
                    r.read_exact(&mut b)?;
                    data.push(T::of(f32::from_le_bytes(b) as f64));
                }
            }
            Dtype::F64 => {
                let mut b = [0u8; 8];
                for _ in 0..numel {
                    r.read_exact(&mut b)?;
                    data.push(T::of(f64::from_le_bytes(b)));
                }
            }
        }
        entries.push((name, Tensor::new(&shape, data)?));
    }
    Ok(entries)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
