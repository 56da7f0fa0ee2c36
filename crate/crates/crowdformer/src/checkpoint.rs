//! Checkpoint serialization.
//!
//! Layout: magic bytes "CFCK", format version (u32 LE), record count (u32 LE),
//! then per record: name length (u32 LE), name bytes, rank (u32 LE), dims
//! (u32 LE each), payload as little-endian f32. Optimizer state and run
//! metadata live under the reserved "opt." name prefix.
//!
//! Payloads are single precision; saving rounds parameters to f32 and loading
//! widens back, so a loaded model re-saves to an identical file.

use crate::optim::{Adam, ParamStore};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"CFCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint mismatch at tensor `{name}`: {detail}")]
    Mismatch { name: String, detail: String },
}

pub struct Checkpoint {
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn find(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| CheckpointError::Corrupt(format!("truncated while reading {what}")))?;
    Ok(u32::from_le_bytes(buf))
}

fn write_record<W: Write>(w: &mut W, name: &str, t: &Tensor) -> io::Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    write_u32(w, t.shape().len() as u32)?;
    for &d in t.shape() {
        write_u32(w, d as u32)?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_record<R: Read>(r: &mut R) -> Result<(String, Tensor), CheckpointError> {
    let name_len = read_u32(r, "name length")? as usize;
    let mut name_buf = vec![0u8; name_len];
    r.read_exact(&mut name_buf)
        .map_err(|_| CheckpointError::Corrupt("truncated record name".into()))?;
    let name = String::from_utf8(name_buf)
        .map_err(|_| CheckpointError::Corrupt("record name is not utf-8".into()))?;
    let rank = read_u32(r, "rank")? as usize;
    if rank > 8 {
        return Err(CheckpointError::Corrupt(format!("implausible rank {rank} for `{name}`")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r, "dim")? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 4];
    for _ in 0..numel {
        r.read_exact(&mut buf).map_err(|_| {
            CheckpointError::Corrupt(format!("truncated payload for `{name}`"))
        })?;
        data.push(f32::from_le_bytes(buf) as f64);
    }
    Ok((name, Tensor::new(&shape, data)))
}

fn round_f32(t: &Tensor) -> Tensor {
    Tensor::new(t.shape(), t.data().iter().map(|&v| v as f32 as f64).collect())
}

/// Text packed one byte per f32, used to carry the run config inside the
/// tensor-record format losslessly.
fn pack_text(s: &str) -> Tensor {
    Tensor::new(&[s.len()], s.bytes().map(|b| b as f64).collect())
}

fn unpack_text(t: &Tensor) -> Result<String, CheckpointError> {
    let bytes: Vec<u8> = t.data().iter().map(|&v| v as u8).collect();
    String::from_utf8(bytes)
        .map_err(|_| CheckpointError::Corrupt("embedded config is not utf-8".into()))
}

/// Saves model parameters, Adam moments and step, and the run config.
pub fn save(
    path: &Path,
    store: &ParamStore,
    adam: &Adam,
    config_text: &str,
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    let n_records = store.len() * 3 + 2;
    write_u32(&mut w, n_records as u32)?;
    for (name, p) in store.iter() {
        write_record(&mut w, name, &p.value)?;
    }
    for (name, p) in store.iter() {
        write_record(&mut w, &format!("opt.m.{name}"), &p.m)?;
        write_record(&mut w, &format!("opt.v.{name}"), &p.v)?;
    }
    write_record(&mut w, "opt.step", &Tensor::scalar(adam.step as f64))?;
    write_record(&mut w, "opt.run_config", &pack_text(config_text))?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = read_u32(&mut r, "record count")? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        records.push(read_record(&mut r)?);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CheckpointError::Corrupt("trailing bytes after last record".into()));
    }
    Ok(Checkpoint { records })
}

/// Restores parameters and optimizer state into an already-initialized store.
/// The store defines the expected tensor set; the first mismatch is reported
/// by name.
pub fn restore(
    ckpt: &Checkpoint,
    store: &mut ParamStore,
    adam: &mut Adam,
) -> Result<(), CheckpointError> {
    let expected: Vec<String> = store.names().map(|s| s.to_string()).collect();
    for name in &expected {
        let rec = ckpt.find(name).ok_or_else(|| CheckpointError::Mismatch {
            name: name.clone(),
            detail: "missing from checkpoint".into(),
        })?;
        let p = store.get_mut(name);
        if rec.shape() != p.value.shape() {
            return Err(CheckpointError::Mismatch {
                name: name.clone(),
                detail: format!("shape {:?} in checkpoint, {:?} in model", rec.shape(), p.value.shape()),
            });
        }
        p.value = rec.clone();
        if let Some(m) = ckpt.find(&format!("opt.m.{name}")) {
            p.m = m.clone();
        }
        if let Some(v) = ckpt.find(&format!("opt.v.{name}")) {
            p.v = v.clone();
        }
        p.grad = None;
    }
    for (name, _) in &ckpt.records {
        if !name.starts_with("opt.") && !store.contains(name) {
            return Err(CheckpointError::Mismatch {
                name: name.clone(),
                detail: "present in checkpoint but not in model".into(),
            });
        }
    }
    if let Some(step) = ckpt.find("opt.step") {
        adam.step = step.item() as u64;
    }
    Ok(())
}

pub fn embedded_config(ckpt: &Checkpoint) -> Result<String, CheckpointError> {
    let rec = ckpt
        .find("opt.run_config")
        .ok_or_else(|| CheckpointError::Corrupt("checkpoint has no embedded config".into()))?;
    unpack_text(rec)
}

/// Rounds live parameters to f32 so that in-memory state matches what a
/// reload of the just-saved file would produce.
pub fn quantize_store(store: &mut ParamStore) {
    for (_, p) in store.iter_mut() {
        p.value = round_f32(&p.value);
        p.m = round_f32(&p.m);
        p.v = round_f32(&p.v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamConfig;

    fn demo_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.register("a.w", Tensor::new(&[2, 2], vec![1.0, -0.5, 0.25, 3.0]));
        s.register("b.bias", Tensor::new(&[3], vec![0.1, 0.2, 0.3]));
        s
    }

    #[test]
    fn round_trip_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut store = demo_store();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step = 42;
        save(&path, &store, &adam, "epochs = 3\n").unwrap();

        let ckpt = load(&path).unwrap();
        assert_eq!(embedded_config(&ckpt).unwrap(), "epochs = 3\n");
        let mut store2 = demo_store();
        store2.get_mut("a.w").value = Tensor::zeros(&[2, 2]);
        let mut adam2 = Adam::new(AdamConfig::default());
        restore(&ckpt, &mut store2, &mut adam2).unwrap();
        assert_eq!(adam2.step, 42);
        assert_eq!(store2.get("a.w").value, store.get("a.w").value);
        // Re-saving a loaded model reproduces the file byte for byte.
        let path2 = dir.path().join("m2.ckpt");
        save(&path2, &store2, &adam2, "epochs = 3\n").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        let _ = &mut store;
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let store = demo_store();
        save(&path, &store, &Adam::new(AdamConfig::default()), "").unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &demo_store(), &Adam::new(AdamConfig::default()), "").unwrap();
        let ckpt = load(&path).unwrap();
        let mut other = ParamStore::new();
        other.register("a.w", Tensor::zeros(&[3, 3]));
        other.register("b.bias", Tensor::zeros(&[3]));
        match restore(&ckpt, &mut other, &mut Adam::new(AdamConfig::default())) {
            Err(CheckpointError::Mismatch { name, .. }) => assert_eq!(name, "a.w"),
            other => panic!("expected mismatch, got {other:?}"),
        }
    }
}
