//! Little-endian binary encoding shared by the dataset and checkpoint
//! formats: length-prefixed JSON headers plus named tensor records
//! (name length, name bytes, ndim, dims, f32 payload). Round-trips are
//! bit-exact.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub(crate) fn write_u32(w: &mut impl Write, v: u32, path: &str) -> Result<()> {
    w.write_all(&v.to_le_bytes())
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn write_u64(w: &mut impl Write, v: u64, path: &str) -> Result<()> {
    w.write_all(&v.to_le_bytes())
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn read_u32(r: &mut impl Read, path: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_u64(r: &mut impl Read, path: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn write_magic(w: &mut impl Write, magic: &[u8; 4], path: &str) -> Result<()> {
    w.write_all(magic).map_err(|e| Error::io(path, e))
}

pub(crate) fn check_magic(r: &mut impl Read, magic: &[u8; 4], what: &str, path: &str) -> Result<()> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    if &buf != magic {
        return Err(Error::Incompat(format!(
            "{path}: not a {what} file (bad magic)"
        )));
    }
    Ok(())
}

pub(crate) fn write_json_header(w: &mut impl Write, json: &str, path: &str) -> Result<()> {
    write_u64(w, json.len() as u64, path)?;
    w.write_all(json.as_bytes()).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json_header(r: &mut impl Read, path: &str) -> Result<String> {
    let len = read_u64(r, path)? as usize;
    if len > 64 * 1024 * 1024 {
        return Err(Error::Incompat(format!(
            "{path}: unreasonable header length {len}"
        )));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    String::from_utf8(buf).map_err(|_| Error::Incompat(format!("{path}: header is not utf-8")))
}

pub(crate) fn write_tensor_record(
    w: &mut impl Write,
    name: &str,
    t: &Tensor,
    path: &str,
) -> Result<()> {
    write_u32(w, name.len() as u32, path)?;
    w.write_all(name.as_bytes()).map_err(|e| Error::io(path, e))?;
    write_u32(w, t.ndim() as u32, path)?;
    for &d in t.shape() {
        write_u64(w, d as u64, path)?;
    }
    let data = t.data();
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_tensor_record(r: &mut impl Read, path: &str) -> Result<(String, Tensor)> {
    let name_len = read_u32(r, path)? as usize;
    if name_len > 4096 {
        return Err(Error::Incompat(format!(
            "{path}: unreasonable tensor name length {name_len}"
        )));
    }
    let mut name_buf = vec![0u8; name_len];
    r.read_exact(&mut name_buf).map_err(|e| Error::io(path, e))?;
    let name = String::from_utf8(name_buf)
        .map_err(|_| Error::Incompat(format!("{path}: tensor name is not utf-8")))?;
    let ndim = read_u32(r, path)? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(Error::Incompat(format!(
            "{path}: tensor '{name}' has unsupported ndim {ndim}"
        )));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u64(r, path)? as usize);
    }
    let numel: usize = shape.iter().product();
    if numel == 0 || numel > 1 << 30 {
        return Err(Error::Incompat(format!(
            "{path}: tensor '{name}' has unreasonable shape {shape:?}"
        )));
    }
    let mut bytes = vec![0u8; numel * 4];
    r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let t = Tensor::from_vec(&shape, data)
        .map_err(|e| Error::Incompat(format!("{path}: tensor '{name}': {e}")))?;
    Ok((name, t))
}
