//! Named-tensor checkpoints with a JSON manifest.
//!
//! `model.mckp` holds `MCKP`, a u32 tensor count, then per tensor: u32 name
//! length, UTF-8 name, u64 rows, u64 cols and row-major little-endian f32
//! values. `manifest.json` records the config hash, epoch and tensor names.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::model::Model;

const MAGIC: &[u8; 4] = b"MCKP";
pub const TENSOR_FILE: &str = "model.mckp";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub epoch: usize,
    pub variant: String,
    pub tensors: Vec<String>,
}

pub fn write_tensors(path: &Path, tensors: &[(String, &Mat)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, m) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(m.nrows() as u64).to_le_bytes())?;
        w.write_all(&(m.ncols() as u64).to_le_bytes())?;
        for v in m.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<BTreeMap<String, Mat>> {
    let mut r = BufReader::new(File::open(path)?);
    let bad = |m: &str| Error::format(path, m.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("missing MCKP magic"));
    }
    let mut u32b = [0u8; 4];
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u32b)
        .map_err(|_| bad("truncated header"))?;
    let count = u32::from_le_bytes(u32b);
    let mut out = BTreeMap::new();
    for _ in 0..count {
        r.read_exact(&mut u32b)
            .map_err(|_| bad("truncated tensor name"))?;
        let mut name = vec![0u8; u32::from_le_bytes(u32b) as usize];
        r.read_exact(&mut name)
            .map_err(|_| bad("truncated tensor name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        r.read_exact(&mut u64b)
            .map_err(|_| bad("truncated shape"))?;
        let rows = u64::from_le_bytes(u64b) as usize;
        r.read_exact(&mut u64b)
            .map_err(|_| bad("truncated shape"))?;
        let cols = u64::from_le_bytes(u64b) as usize;
        let mut payload = vec![0u8; rows * cols * 4];
        r.read_exact(&mut payload)
            .map_err(|_| Error::format(path, format!("truncated payload for `{name}`")))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let m = Mat::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::format(path, e.to_string()))?;
        out.insert(name, m);
    }
    Ok(out)
}

pub fn save_checkpoint(dir: &Path, model: &Model, manifest_base: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let named = model.named();
    write_tensors(&dir.join(TENSOR_FILE), &named)?;
    let manifest = Manifest {
        tensors: named.into_iter().map(|(n, _)| n).collect(),
        ..manifest_base.clone()
    };
    std::fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    Ok(serde_json::from_str(&std::fs::read_to_string(
        dir.join(MANIFEST_FILE),
    )?)?)
}

/// Overwrite every tensor of `model` from the checkpoint in `dir`; shapes must match.
pub fn load_into(dir: &Path, model: &mut Model) -> Result<Manifest> {
    let manifest = load_manifest(dir)?;
    let mut tensors = read_tensors(&dir.join(TENSOR_FILE))?;
    for (name, slot) in model.named_mut() {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| Error::format(dir, format!("checkpoint lacks tensor `{name}`")))?;
        if t.dim() != slot.dim() {
            return Err(Error::Dimension(format!(
                "tensor `{name}` has shape {:?}, model expects {:?}",
                t.dim(),
                slot.dim()
            )));
        }
        *slot = t;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::format(dir, format!("unexpected tensor `{extra}`")));
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn tensor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.mckp");
        let a = array![[1.0, 2.5], [-3.0, 0.125]];
        let b = Mat::zeros((0, 3));
        write_tensors(&p, &[("a".into(), &a), ("block0.wq".into(), &b)]).unwrap();
        let back = read_tensors(&p).unwrap();
        assert_eq!(back["a"], a);
        assert_eq!(back["block0.wq"].dim(), (0, 3));
        std::fs::write(&p, b"MCKP\x01\0\0\0").unwrap();
        assert!(read_tensors(&p).is_err());
    }
}
