//! Binary checkpoint: `NKCP`, u32 version, u32 count, then per parameter
//! `u32 name_len, name, u32 ndim, u32 dims…, f32 values…, f32 ema…`, all
//! little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NKCP";
const VERSION: u32 = 1;

pub fn write_params<R: Real>(w: &mut impl Write, store: &ParamStore<R>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, value, ema) in store.iter() {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&(value.shape().len() as u32).to_le_bytes())?;
        for &d in value.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for t in [value, ema] {
            for &x in t.data() {
                w.write_all(&(x.as_f64() as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s<R: Real>(r: &mut impl Read, n: usize) -> Result<Vec<R>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| R::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect())
}

pub fn read_params<R: Real>(r: &mut impl Read) -> Result<ParamStore<R>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Format("bad checkpoint magic".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(NnError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = read_u32(r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut nb = vec![0u8; len];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb).map_err(|e| NnError::Format(e.to_string()))?;
        let ndim = read_u32(r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u32(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let value = Tensor::new(shape.clone(), read_f32s(r, n)?)?;
        let ema = Tensor::new(shape, read_f32s(r, n)?)?;
        store.insert_with_ema(name, value, ema)?;
    }
    Ok(store)
}

pub fn save<R: Real>(path: impl AsRef<Path>, store: &ParamStore<R>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(&mut w, store)?;
    w.flush()?;
    Ok(())
}

pub fn load<R: Real>(path: impl AsRef<Path>) -> Result<ParamStore<R>> {
    let mut r = BufReader::new(File::open(path)?);
    read_params(&mut r)
}
