//! Binary weight file ("PVCD"): magic, version, entry count, then per entry
//! a name, a rank, dims as u64 and little-endian f32 values. Round trips are
//! bit-exact; persisted precision is f32, and saving snaps the in-memory
//! copy to the persisted values so a reload is observationally identical.

use crate::error::{Error, Result};
use crate::model::{Model, Parameter};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PVCD";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct WeightEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn write_weight_file(path: &Path, entries: &[WeightEntry]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &e.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_weight_file(path: &Path) -> Result<Vec<WeightEntry>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Weights(format!("truncated file {}", path.display())));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::Weights(format!("{} is not a PVCD weight file", path.display())));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Weights(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count);
    let mut seen: HashMap<String, ()> = HashMap::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Weights("entry name is not UTF-8".into()))?;
        if seen.insert(name.clone(), ()).is_some() {
            return Err(Error::Weights(format!("duplicate entry `{name}`")));
        }
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 4)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(WeightEntry { name, shape, values });
    }
    if pos != bytes.len() {
        return Err(Error::Weights(format!("{} trailing bytes after last entry", bytes.len() - pos)));
    }
    Ok(entries)
}

fn snap_and_entry(p: &mut Parameter) -> WeightEntry {
    let values: Vec<f32> = p.data.iter().map(|&v| v as f32).collect();
    for (d, v) in p.data.iter_mut().zip(&values) {
        *d = *v as f64;
    }
    WeightEntry { name: p.name.clone(), shape: p.shape.clone(), values }
}

/// Apply file entries to a chosen subset of parameters. Every selected
/// parameter must be present with an exactly matching shape; names in the
/// file that match nothing are returned as warnings.
fn apply_entries(model: &mut Model, entries: Vec<WeightEntry>, include_frozen: bool) -> Result<Vec<String>> {
    let mut by_name: HashMap<String, WeightEntry> = entries.into_iter().map(|e| (e.name.clone(), e)).collect();
    for p in model.params_mut() {
        if !include_frozen && p.frozen {
            continue;
        }
        let e = by_name.remove(&p.name).ok_or_else(|| {
            Error::Weights(format!("missing parameter `{}`", p.name))
        })?;
        if e.shape != p.shape {
            return Err(Error::Weights(format!(
                "shape mismatch for `{}`: file has {:?}, model expects {:?}",
                p.name, e.shape, p.shape
            )));
        }
        for (d, v) in p.data.iter_mut().zip(&e.values) {
            *d = *v as f64;
        }
    }
    Ok(by_name.into_keys().map(|n| format!("unknown parameter `{n}` ignored")).collect())
}

impl Model {
    /// Persist every parameter (a full-model weight file).
    pub fn save_weights(&mut self, path: &Path) -> Result<()> {
        let entries: Vec<WeightEntry> = self.params_mut().iter_mut().map(snap_and_entry).collect();
        write_weight_file(path, &entries)
    }

    /// Persist only trainable parameters (the per-task checkpoint).
    pub fn save_checkpoint(&mut self, path: &Path) -> Result<()> {
        let entries: Vec<WeightEntry> = self
            .params_mut()
            .iter_mut()
            .filter(|p| !p.frozen)
            .map(snap_and_entry)
            .collect();
        write_weight_file(path, &entries)
    }

    /// Load a full-model weight file; frozen flags are unchanged.
    pub fn load_weights(&mut self, path: &Path) -> Result<Vec<String>> {
        let entries = read_weight_file(path)?;
        apply_entries(self, entries, true)
    }

    /// Load a trainable-only checkpoint onto a freshly built model
    /// (frozen backbone + checkpoint reconstructs the trained model).
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<Vec<String>> {
        let entries = read_weight_file(path)?;
        apply_entries(self, entries, false)
    }
}
