//! Binary container for named tensor sets.
//!
//! Adversarial inputs, exported workloads, and any other bundle of tensors
//! that has to survive a trip through the filesystem use this one format.
//! Entries keep their order, so a saved workload replays in the sequence it
//! was captured, and every entry carries a unique string id so individual
//! tensors can be matched back to trace records.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "APCT"  magic
//! u16     format version
//! u32     entry count
//! entry*  { u32 id byte length, id utf-8 bytes,
//!           u32 rank, u32 dims[rank], f64 data[product(dims)] }
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wire::{put_f64_slice, ByteReader};

pub const TENSOR_SET_MAGIC: &[u8; 4] = b"APCT";
pub const TENSOR_SET_FORMAT_VERSION: u16 = 1;

/// One named tensor in a saved set.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub id: String,
    pub tensor: Tensor,
}

impl TensorEntry {
    pub fn new(id: impl Into<String>, tensor: Tensor) -> TensorEntry {
        TensorEntry {
            id: id.into(),
            tensor,
        }
    }
}

fn check_ids(entries: &[TensorEntry]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for entry in entries {
        if entry.id.is_empty() {
            return Err(Error::invalid("tensor entry id must not be empty"));
        }
        if !seen.insert(entry.id.as_str()) {
            return Err(Error::invalid(format!(
                "duplicate tensor entry id '{}'",
                entry.id
            )));
        }
    }
    Ok(())
}

fn encode(entries: &[TensorEntry]) -> Result<Vec<u8>> {
    check_ids(entries)?;
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::invalid("tensor set has too many entries"))?;
    let mut out = Vec::new();
    out.extend_from_slice(TENSOR_SET_MAGIC);
    out.extend_from_slice(&TENSOR_SET_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for entry in entries {
        let id_len = u32::try_from(entry.id.len())
            .map_err(|_| Error::invalid(format!("tensor entry id '{}' is too long", entry.id)))?;
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(entry.id.as_bytes());
        let shape = entry.tensor.shape();
        let rank = u32::try_from(shape.len())
            .map_err(|_| Error::invalid("tensor rank exceeds the format limit"))?;
        out.extend_from_slice(&rank.to_le_bytes());
        for &dim in shape {
            let dim = u32::try_from(dim)
                .map_err(|_| Error::invalid("tensor dimension exceeds the format limit"))?;
            out.extend_from_slice(&dim.to_le_bytes());
        }
        put_f64_slice(&mut out, entry.tensor.data());
    }
    Ok(out)
}

fn decode(buf: &[u8]) -> Result<Vec<TensorEntry>> {
    let mut r = ByteReader::new(buf);
    r.expect_magic(TENSOR_SET_MAGIC, "tensor set")?;
    r.expect_version(TENSOR_SET_FORMAT_VERSION)?;
    let count = r.u32_le()? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let id_offset = r.offset();
        let id_len = r.u32_le()? as usize;
        let id_bytes = r.bytes(id_len)?;
        let id = std::str::from_utf8(id_bytes)
            .map_err(|_| Error::format_at("tensor entry id is not valid utf-8", id_offset))?
            .to_string();
        if id.is_empty() {
            return Err(Error::format_at("empty tensor entry id", id_offset));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::format_at(
                format!("duplicate tensor entry id '{id}'"),
                id_offset,
            ));
        }
        let shape_offset = r.offset();
        let rank = r.u32_le()? as usize;
        let mut shape = Vec::with_capacity(rank.min(64));
        for _ in 0..rank {
            shape.push(r.u32_le()? as usize);
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::format_at(
                format!("invalid shape for tensor entry '{id}'"),
                shape_offset,
            ));
        }
        let elements = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| Error::format_at("unexpected end of data", r.offset()))?;
        let data_offset = r.offset();
        let data = r.f64_vec(elements)?;
        let tensor = Tensor::new(shape, data).map_err(|_| {
            Error::format_at(
                format!("non-finite values in tensor entry '{id}'"),
                data_offset,
            )
        })?;
        entries.push(TensorEntry { id, tensor });
    }
    r.expect_end()?;
    Ok(entries)
}

/// Write a tensor set to disk. Ids must be non-empty and unique.
pub fn save_tensor_set(path: &Path, entries: &[TensorEntry]) -> Result<()> {
    let bytes = encode(entries)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a tensor set back, restoring the original entry order.
pub fn load_tensor_set(path: &Path) -> Result<Vec<TensorEntry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
