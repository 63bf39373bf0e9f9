//! Checkpoint format: a small JSON header naming every tensor, followed
//! by raw little-endian f32 data in header order. Writing and reading
//! preserve every bit, so a reloaded model evaluates identically.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{CodafError, Result};
use crate::params::ParamStore;

const MAGIC: &[u8; 4] = b"CDAF";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    entries: Vec<Entry>,
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

/// Write every parameter plus a metadata blob.
pub fn save(path: &Path, store: &ParamStore<f32>, meta: &serde_json::Value) -> Result<()> {
    let entries: Vec<Entry> = store
        .iter()
        .map(|(name, t)| Entry { name: name.clone(), shape: t.shape().to_vec() })
        .collect();
    let header = Header { entries, meta: meta.clone() };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| CodafError::data(format!("checkpoint header encoding failed: {e}")))?;
    let file = fs::File::create(path).map_err(|e| CodafError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| CodafError::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header_bytes).map_err(io)?;
    for (_, tensor) in store.iter() {
        for v in tensor.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Read a checkpoint back into a parameter store.
pub fn load(path: &Path) -> Result<(ParamStore<f32>, serde_json::Value)> {
    let mut file = fs::File::open(path).map_err(|e| CodafError::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| CodafError::io(path, e))?;
    let bad = |what: &str| {
        CodafError::data(format!("{}: not a checkpoint ({what})", path.display()))
    };
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(bad("magic mismatch"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("fixed width"));
    if version != VERSION {
        return Err(bad(&format!("version {version}, expected {VERSION}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("fixed width")) as usize;
    let data_at = 16usize.checked_add(header_len).ok_or_else(|| bad("header length overflow"))?;
    if bytes.len() < data_at {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..data_at])
        .map_err(|e| bad(&format!("header parse failed: {e}")))?;
    let total: usize = header.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if bytes.len() != data_at + 4 * total {
        return Err(bad(&format!(
            "payload holds {} bytes, header promises {}",
            bytes.len() - data_at,
            4 * total
        )));
    }
    let mut store = ParamStore::new();
    let mut at = data_at;
    for entry in &header.entries {
        let n: usize = entry.shape.iter().product();
        let mut flat = Vec::with_capacity(n);
        for _ in 0..n {
            flat.push(f32::from_le_bytes(bytes[at..at + 4].try_into().expect("fixed width")));
            at += 4;
        }
        let tensor = ArrayD::from_shape_vec(IxDyn(&entry.shape), flat)
            .map_err(|e| bad(&format!("tensor {} malformed: {e}", entry.name)))?;
        store.insert(&entry.name, tensor)?;
    }
    Ok((store, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::TempDir;

    use crate::params::he_conv;

    fn sample_store() -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        store.insert("a.w", he_conv(&mut rng, 4, 3, 3)).unwrap();
        store.insert("a.b", ArrayD::from_elem(IxDyn(&[4]), 0.25f32)).unwrap();
        store.insert("z.w", he_conv(&mut rng, 2, 4, 1)).unwrap();
        store
    }

    #[test]
    fn round_trip_preserves_every_bit() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = sample_store();
        let meta = serde_json::json!({"epoch": 3, "ap50": 0.725});
        save(&path, &store, &meta).unwrap();
        let (back, meta_back) = load(&path).unwrap();
        assert_eq!(meta_back, meta, "metadata must survive");
        assert_eq!(back.tensor_count(), store.tensor_count());
        for (name, tensor) in store.iter() {
            let restored = back.get(name).unwrap();
            assert_eq!(restored.shape(), tensor.shape());
            for (a, b) in tensor.iter().zip(restored.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name} changed bits across the round trip");
            }
        }
    }

    #[test]
    fn double_save_is_byte_identical() {
        let dir = TempDir::new().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let store = sample_store();
        let meta = serde_json::json!({"step": 12});
        save(&p1, &store, &meta).unwrap();
        save(&p2, &store, &meta).unwrap();
        assert_eq!(
            fs::read(&p1).unwrap(),
            fs::read(&p2).unwrap(),
            "serialisation must be deterministic"
        );
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("model.ckpt");
        fs::write(&path, b"PNG\x0d not a checkpoint").unwrap();
        assert!(load(&path).is_err(), "wrong magic must be rejected");
        let good = dir.path().join("good.ckpt");
        save(&good, &sample_store(), &serde_json::Value::Null).unwrap();
        let mut bytes = fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        let err = load(&path).unwrap_err();
        assert!(format!("{err}").contains("holds"), "truncation should name the size: {err}");
    }
}
