//! Model checkpoints: a small binary container with a JSON header followed by
//! raw little-endian f64 tensor data.
//!
//! Layout: 8-byte magic, u32 LE format version, u64 LE header length, JSON
//! header (model kind, config snapshot, parameter names and shapes), then each
//! tensor's elements in row-major order, in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::Mat;
use super::layers::ParamBank;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"XTALKCP1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Model family, e.g. "diarizer", "icam", "gfam", "blstm".
    pub kind: String,
    /// Arbitrary config snapshot the model was built from.
    pub config: serde_json::Value,
    pub params: Vec<ParamMeta>,
}

pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    config: &serde_json::Value,
    bank: &ParamBank,
) -> Result<()> {
    let header = CheckpointHeader {
        kind: kind.to_string(),
        config: config.clone(),
        params: (0..bank.len())
            .map(|i| {
                let t = bank.tensor(i);
                ParamMeta { name: bank.name(i).to_string(), shape: [t.nrows(), t.ncols()] }
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for i in 0..bank.len() {
        for &x in bank.tensor(i).iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamBank)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Data(format!("{}: not a checkpoint file", path.display())));
    }
    let mut v4 = [0u8; 4];
    read_exact(&mut r, &mut v4, path, "version")?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let mut l8 = [0u8; 8];
    read_exact(&mut r, &mut l8, path, "header length")?;
    let header_len = u64::from_le_bytes(l8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact(&mut r, &mut header_bytes, path, "header")?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;

    let mut bank = ParamBank::new();
    for meta in &header.params {
        let [rows, cols] = meta.shape;
        let mut buf = vec![0u8; rows * cols * 8];
        read_exact(&mut r, &mut buf, path, &format!("tensor {}", meta.name))?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk size")))
            .collect();
        let tensor = Mat::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Data(format!("{}: bad tensor shape: {e}", path.display())))?;
        bank.add(&meta.name, tensor);
    }
    Ok((header, bank))
}

/// Copy loaded tensors into a freshly constructed bank; names and shapes
/// must line up one-to-one (construction order is deterministic per model).
pub fn restore_into(bank: &mut ParamBank, loaded: &ParamBank) -> Result<()> {
    if loaded.len() != bank.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} tensors, model needs {}",
            loaded.len(),
            bank.len()
        )));
    }
    for i in 0..loaded.len() {
        if loaded.name(i) != bank.name(i) {
            return Err(Error::Data(format!(
                "checkpoint tensor {} is '{}', expected '{}'",
                i,
                loaded.name(i),
                bank.name(i)
            )));
        }
        if loaded.tensor(i).dim() != bank.tensor(i).dim() {
            return Err(Error::Data(format!(
                "checkpoint tensor '{}' has shape {:?}, expected {:?}",
                loaded.name(i),
                loaded.tensor(i).dim(),
                bank.tensor(i).dim()
            )));
        }
        *bank.tensor_mut(i) = loaded.tensor(i).clone();
    }
    Ok(())
}

/// Load and require a specific model kind.
pub fn load_checkpoint_expecting(path: &Path, kind: &str) -> Result<(CheckpointHeader, ParamBank)> {
    let (header, bank) = load_checkpoint(path)?;
    if header.kind != kind {
        return Err(Error::Data(format!(
            "{}: checkpoint holds a '{}' model, expected '{kind}'",
            path.display(),
            header.kind
        )));
    }
    Ok((header, bank))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Data(format!("{}: truncated checkpoint ({what})", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn sample_bank() -> ParamBank {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut bank = ParamBank::new();
        bank.add("a.w", ParamBank::xavier(&mut rng, 3, 7));
        bank.add("a.b", Mat::zeros((1, 7)));
        bank.add("head.w", ParamBank::xavier(&mut rng, 7, 2));
        bank
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let bank = sample_bank();
        let cfg = serde_json::json!({"hidden": 7, "lr": 1e-4});
        save_checkpoint(&path, "icam", &cfg, &bank).unwrap();
        let (header, loaded) = load_checkpoint_expecting(&path, "icam").unwrap();
        assert_eq!(header.kind, "icam");
        assert_eq!(header.config, cfg);
        assert_eq!(loaded.len(), bank.len());
        for i in 0..bank.len() {
            assert_eq!(loaded.name(i), bank.name(i));
            assert_eq!(loaded.tensor(i), bank.tensor(i), "tensor {i} not bit-equal");
        }
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, "gfam", &serde_json::json!({}), &sample_bank()).unwrap();
        let err = load_checkpoint_expecting(&path, "icam").unwrap_err();
        assert!(err.to_string().contains("expected 'icam'"));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("not a checkpoint"));
    }

    #[test]
    fn truncated_tensor_data_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, "blstm", &serde_json::json!({}), &sample_bank()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }
}
