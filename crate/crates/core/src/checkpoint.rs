//! Parameter files: the magic `RDAD1`, a one-line JSON header mapping each
//! parameter name to its shape, then every value as little-endian `f32` in
//! header order.

use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 5] = b"RDAD1";

/// Serializes `store` into checkpoint bytes.
pub fn to_bytes(store: &ParamStore) -> Result<Vec<u8>> {
    let mut header = Map::new();
    for (name, t) in store.iter() {
        header.insert(name.to_string(), serde_json::to_value(t.shape().to_array())?);
    }
    let mut out = Vec::with_capacity(MAGIC.len() + 4 * store.num_scalars() + 64 * store.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(serde_json::to_string(&Value::Object(header))?.as_bytes());
    out.push(b'\n');
    for (_, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    fs::write(path, to_bytes(store)?).map_err(|e| Error::io(path, e))
}

/// Overwrites the values of `store` from checkpoint bytes. Names, order and
/// shapes must match exactly.
pub fn load_into(bytes: &[u8], store: &mut ParamStore, path: &Path) -> Result<()> {
    let rest = bytes
        .strip_prefix(MAGIC.as_slice())
        .ok_or_else(|| Error::format(path, "missing RDAD1 magic"))?;
    let nl = rest
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| Error::format(path, "unterminated header"))?;
    let header: Map<String, Value> =
        serde_json::from_slice(&rest[..nl]).map_err(|e| Error::format(path, format!("header: {e}")))?;
    if header.len() != store.len() {
        return Err(Error::format(
            path,
            format!("{} parameters in file, model expects {}", header.len(), store.len()),
        ));
    }
    let mut payload = &rest[nl + 1..];
    let ids: Vec<_> = store.ids().collect();
    for ((name, shape), id) in header.iter().zip(ids) {
        let expected = store.get(id).shape().to_array();
        if name != store.name(id) {
            return Err(Error::format(
                path,
                format!("parameter {name} where {} was expected", store.name(id)),
            ));
        }
        let shape: [usize; 4] =
            serde_json::from_value(shape.clone()).map_err(|e| Error::format(path, format!("shape of {name}: {e}")))?;
        if shape != expected {
            return Err(Error::format(
                path,
                format!("{name} has shape {shape:?}, model expects {expected:?}"),
            ));
        }
        let n = 4 * store.get(id).numel();
        if payload.len() < n {
            return Err(Error::format(path, "truncated payload"));
        }
        let (chunk, tail) = payload.split_at(n);
        for (dst, src) in store.get_mut(id).data_mut().iter_mut().zip(chunk.chunks_exact(4)) {
            *dst = f32::from_le_bytes(src.try_into().expect("4-byte chunk"));
        }
        payload = tail;
    }
    if !payload.is_empty() {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    Ok(())
}

pub fn load(path: &Path, store: &mut ParamStore) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_into(&bytes, store, path)
}
