//! Flat parameter archive.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "DCKP"
//! version  u32      1
//! dtype    u8       8 = f64, 4 = f32
//! count    u32      number of entries
//! entry*   name_len u32, name (UTF-8), ndim u32, dims u64 * ndim,
//!          values   dtype-sized little-endian floats, row-major
//! ```
//!
//! Entries keep insertion order, so identical stores give identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use crate::array::Array;
use crate::error::{DiffError, Result};
use crate::params::ParamStore;
use crate::Real;

pub const MAGIC: &[u8; 4] = b"DCKP";
pub const VERSION: u32 = 1;
const DTYPE: u8 = std::mem::size_of::<Real>() as u8;

/// Named arrays in archive order.
pub type Entries = Vec<(String, Array)>;

pub fn write_entries<'a, W: Write>(
    mut w: W,
    entries: impl ExactSizeIterator<Item = (&'a str, &'a Array)>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[DTYPE])?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, value) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(value.ndim() as u32).to_le_bytes())?;
        for &d in value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_entries<R: Read>(mut r: R) -> Result<Entries> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DiffError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(DiffError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut dtype = [0u8; 1];
    r.read_exact(&mut dtype)?;
    if dtype[0] != DTYPE {
        return Err(DiffError::Checkpoint(format!(
            "archive stores {}-byte floats, build uses {DTYPE}",
            dtype[0]
        )));
    }
    let count = read_u32(&mut r)?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| DiffError::Checkpoint("name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut b = [0u8; std::mem::size_of::<Real>()];
        for _ in 0..len {
            r.read_exact(&mut b)?;
            data.push(Real::from_le_bytes(b));
        }
        let value = Array::new(shape, data).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
        entries.push((name, value));
    }
    Ok(entries)
}

/// Serializes every parameter of `store` under its own name.
pub fn to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    write_entries(&mut out, store_entries(store)).expect("writing to a Vec cannot fail");
    out
}

fn store_entries(store: &ParamStore) -> impl ExactSizeIterator<Item = (&str, &Array)> {
    store
        .iter()
        .map(|(_, p)| (p.name.as_str(), &p.value))
        .collect::<Vec<_>>()
        .into_iter()
}

/// Rebuilds a store from an archive; gradients start empty.
pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, value) in read_entries(bytes)? {
        store.insert(name, value)?;
    }
    Ok(store)
}

/// Overwrites values in `store` from `entries` whose names are
/// `prefix + parameter name`. Every parameter must be present with the same shape.
pub fn load_into(store: &mut ParamStore, entries: &[(String, Array)], prefix: &str) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let key = format!("{prefix}{}", store.get(id).name);
        let (_, value) = entries
            .iter()
            .find(|(n, _)| *n == key)
            .ok_or_else(|| DiffError::Checkpoint(format!("missing entry `{key}`")))?;
        if value.shape() != store.value(id).shape() {
            return Err(DiffError::Checkpoint(format!(
                "`{key}` has shape {:?}, expected {:?}",
                value.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = value.clone();
    }
    Ok(())
}

pub fn save(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(store))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    from_bytes(&std::fs::read(path)?)
}
