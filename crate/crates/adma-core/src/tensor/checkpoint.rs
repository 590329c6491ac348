//! Checkpoint container: magic `ADMA`, a little-endian u32 format version,
//! then one record per tensor — u32 name length, UTF-8 name, u32 rank, u32
//! extents, and the row-major payload as little-endian f64. Records appear
//! in store order and are read until end of file.

use super::{numel, ParamStore, Tensor};
use crate::error::{Error, Result};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ADMA";
pub const CHECKPOINT_VERSION: u32 = 1;

fn ck_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

pub fn save_records(store: &ParamStore, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for p in store.iter() {
        let name = p.name().as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.value().shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in p.value().data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_records(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = std::fs::File::open(path).map_err(|e| ck_err(path, e.to_string()))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| ck_err(path, "missing header"))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(ck_err(path, "bad magic bytes"));
    }
    let version = read_u32(&mut r).ok_or_else(|| ck_err(path, "missing version"))?;
    if version != CHECKPOINT_VERSION {
        return Err(ck_err(
            path,
            format!("unsupported format version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let mut records = Vec::new();
    loop {
        let Some(name_len) = read_u32(&mut r) else { break };
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name)
            .map_err(|_| ck_err(path, "truncated record name"))?;
        let name = String::from_utf8(name).map_err(|_| ck_err(path, "name is not UTF-8"))?;
        let rank = read_u32(&mut r).ok_or_else(|| ck_err(path, "truncated rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r).ok_or_else(|| ck_err(path, "truncated extents"))? as usize);
        }
        let count = numel(&shape);
        let mut data = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf)
                .map_err(|_| ck_err(path, format!("truncated payload for {name:?}")))?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| ck_err(path, format!("record {name:?}: {e}")))?;
        records.push((name, tensor));
    }
    Ok(records)
}

fn read_u32(r: &mut impl Read) -> Option<u32> {
    let mut buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return None,
            Ok(0) => return None,
            Ok(n) => filled += n,
            Err(_) => return None,
        }
    }
    Some(u32::from_le_bytes(buf))
}
