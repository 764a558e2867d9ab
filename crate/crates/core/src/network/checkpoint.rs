//! Checkpoints are a file of concatenated tensor records plus a sibling
//! `<file>.manifest` with one `name index` line per record.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::io;

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

/// Writes every tensor of `store`, running statistics included, at single
/// precision.
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let tensors: Vec<_> = store.iter().map(|(_, p)| p.value.clone()).collect();
    io::save(path, &tensors)?;
    let mut manifest = String::new();
    for (i, (_, p)) in store.iter().enumerate() {
        writeln!(manifest, "{} {i}", p.name).expect("writing to a String cannot fail");
    }
    let mpath = manifest_path(path);
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
}

/// Overwrites the values in `store` from a checkpoint. Every parameter of the
/// store must be present with a matching shape.
pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<()> {
    let tensors = io::load(path)?;
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut entries = std::collections::HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(name), Some(idx), None) = (it.next(), it.next(), it.next()) else {
            return Err(Error::format(&mpath, format!("line {}: expected `name index`", lineno + 1)));
        };
        let idx: usize =
            idx.parse().map_err(|_| Error::format(&mpath, format!("line {}: bad index {idx}", lineno + 1)))?;
        if idx >= tensors.len() {
            return Err(Error::format(&mpath, format!("line {}: index {idx} out of range", lineno + 1)));
        }
        entries.insert(name.to_string(), idx);
    }
    let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
    for name in names {
        let idx = *entries
            .get(&name)
            .ok_or_else(|| Error::format(&mpath, format!("parameter {name} missing from checkpoint")))?;
        store.assign(&name, tensors[idx].clone())?;
    }
    Ok(())
}
