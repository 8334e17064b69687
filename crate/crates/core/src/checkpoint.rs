//! Self-describing binary checkpoint container.
//!
//! Layout: magic `NPCK`, format version (u32 LE), descriptor length (u64 LE),
//! descriptor JSON, then all parameter tensors as little-endian f64 in the
//! order listed by the descriptor. One file carries everything needed to
//! reconstruct a model: kind tag, model metadata, and weights.

use crate::error::{Error, Result};
use crate::nn::{ParamSet, ParamTensor};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"NPCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Descriptor {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

pub fn save(path: &Path, kind: &str, meta: &serde_json::Value, params: &ParamSet) -> Result<()> {
    let descriptor = Descriptor {
        kind: kind.to_string(),
        meta: meta.clone(),
        tensors: params
            .entries()
            .iter()
            .map(|e| TensorInfo { name: e.name.clone(), shape: e.shape.clone() })
            .collect(),
    };
    let desc_bytes = serde_json::to_vec(&descriptor)?;
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(desc_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&desc_bytes)?;
    for entry in params.entries() {
        for v in &entry.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(String, serde_json::Value, ParamSet)> {
    let file = std::fs::File::open(path)?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic in {}: not a checkpoint file",
            path.display()
        )));
    }
    let mut version = [0u8; 4];
    r.read_exact(&mut version)?;
    let version = u32::from_le_bytes(version);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let desc_len = u64::from_le_bytes(len) as usize;
    let mut desc_bytes = vec![0u8; desc_len];
    r.read_exact(&mut desc_bytes)?;
    let descriptor: Descriptor = serde_json::from_slice(&desc_bytes)?;

    let mut params = ParamSet::new();
    for info in &descriptor.tensors {
        let count: usize = info.shape.iter().product();
        let mut data = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        params.insert(&info.name, info.shape.clone(), data);
    }
    // Trailing bytes mean the descriptor and payload disagree.
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after tensor payload".into()));
    }
    Ok((descriptor.kind, descriptor.meta, params))
}

/// Compare two ParamSets tensor-by-tensor; used by round-trip tests.
pub fn params_equal(a: &ParamSet, b: &ParamSet) -> bool {
    a.entries().len() == b.entries().len()
        && a.entries().iter().zip(b.entries()).all(|(x, y): (&ParamTensor, &ParamTensor)| {
            x.name == y.name && x.shape == y.shape && x.data == y.data
        })
}
