//! Checkpoint archive: one binary file of shape-tagged little-endian f32
//! tensors keyed by parameter name (`IVGP` magic), plus a JSON metadata file
//! carrying the configuration, its hash, the token vocabulary, and the
//! confounder vocabulary with its hash.
//!
//! Snapshots round parameter values through f32, so a checkpoint evaluates
//! identically whether it is used in memory or reloaded from disk.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::trainer::{ModelConfig, TrainConfig};
use crate::vocab::{ConfounderVocab, TokenVocab};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IVGP";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub epoch: usize,
    pub t: usize,
    pub d_v: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub token_vocab: TokenVocab,
    pub confounder_vocab: Option<ConfounderVocab>,
    pub vocab_hash: Option<String>,
}

/// An exported parameter set plus everything needed to evaluate it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: Vec<(String, Mat)>,
    pub meta: CheckpointMeta,
}

/// Canonical hash of any serializable configuration object.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    hex(&Sha256::digest(json.as_bytes()))
}

/// Hash of the confounder vocabulary's canonical JSON form.
pub fn vocab_hash(vocab: &ConfounderVocab) -> String {
    config_hash(vocab)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    /// Snapshot a parameter store, rounding every value through f32.
    pub fn from_store(store: &ParamStore, meta: CheckpointMeta) -> Self {
        let params = store
            .iter()
            .map(|(name, v)| (name.to_string(), v.mapv(|x| x as f32 as f64)))
            .collect();
        Checkpoint { params, meta }
    }

    /// Rebuild a parameter store (in archive order).
    pub fn to_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, v) in &self.params {
            store.add(name.clone(), v.clone());
        }
        store
    }

    pub fn param(&self, name: &str) -> Option<&Mat> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Write `<stem>.ivgp` and `<stem>.json`; returns the archive path.
    pub fn save(&self, stem: &Path) -> Result<PathBuf> {
        if let Some(dir) = stem.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let bin_path = stem.with_extension("ivgp");
        let file = fs::File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let mut w = BufWriter::new(file);
        let io = |r: std::io::Result<()>| r.map_err(|e| Error::io(&bin_path, e));
        io(w.write_all(CHECKPOINT_MAGIC))?;
        io(w.write_all(&(self.params.len() as u32).to_le_bytes()))?;
        for (name, v) in &self.params {
            let bytes = name.as_bytes();
            io(w.write_all(&(bytes.len() as u16).to_le_bytes()))?;
            io(w.write_all(bytes))?;
            io(w.write_all(&(v.nrows() as u32).to_le_bytes()))?;
            io(w.write_all(&(v.ncols() as u32).to_le_bytes()))?;
            for &x in v.iter() {
                io(w.write_all(&(x as f32).to_le_bytes()))?;
            }
        }
        io(w.flush())?;

        let meta_path = stem.with_extension("json");
        let json = serde_json::to_string_pretty(&self.meta)
            .map_err(|e| Error::json("checkpoint metadata", e))?;
        fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
        Ok(bin_path)
    }

    /// Load from a stem or either of the two file paths.
    pub fn load(stem: &Path) -> Result<Self> {
        let stem = if stem.extension().is_some_and(|e| e == "ivgp" || e == "json") {
            stem.with_extension("")
        } else {
            stem.to_path_buf()
        };
        let meta_path = stem.with_extension("json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)
            .map_err(|e| Error::json(meta_path.display().to_string(), e))?;

        let bin_path = stem.with_extension("ivgp");
        let file = fs::File::open(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let mut r = BufReader::new(file);
        let bad = |detail: &str| Error::Checkpoint(format!("{}: {detail}", bin_path.display()));

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("missing header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(|_| bad("missing tensor count"))?;
        let count = u32::from_le_bytes(u32buf) as usize;

        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let mut u16buf = [0u8; 2];
            r.read_exact(&mut u16buf).map_err(|_| bad("truncated name length"))?;
            let name_len = u16::from_le_bytes(u16buf) as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes).map_err(|_| bad("truncated name"))?;
            let name = String::from_utf8(name_bytes).map_err(|_| bad("non-utf8 name"))?;
            r.read_exact(&mut u32buf).map_err(|_| bad("truncated rows"))?;
            let rows = u32::from_le_bytes(u32buf) as usize;
            r.read_exact(&mut u32buf).map_err(|_| bad("truncated cols"))?;
            let cols = u32::from_le_bytes(u32buf) as usize;
            let mut data = vec![0u8; rows * cols * 4];
            r.read_exact(&mut data).map_err(|_| bad("truncated tensor data"))?;
            let values: Vec<f64> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let m = Mat::from_shape_vec((rows, cols), values)
                .map_err(|e| bad(&e.to_string()))?;
            params.push((name, m));
        }
        Ok(Checkpoint { params, meta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Initializer;
    use crate::vocab::build_vocab;

    fn meta() -> CheckpointMeta {
        let vocab = build_vocab(&["person holds a vacuum".to_string()]).unwrap();
        CheckpointMeta {
            config_hash: "abc".into(),
            epoch: 3,
            t: 16,
            d_v: 8,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            token_vocab: TokenVocab::build(&["person holds a vacuum"]),
            vocab_hash: Some(vocab_hash(&vocab)),
            confounder_vocab: Some(vocab),
        }
    }

    #[test]
    fn roundtrip_preserves_params_and_meta() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(1);
        store.add("a.w", init.uniform_fan_in(3, 4));
        store.add("b.w", init.uniform_fan_in(2, 2));
        let ckpt = Checkpoint::from_store(&store, meta());

        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("model");
        ckpt.save(&stem).unwrap();
        let loaded = Checkpoint::load(&stem).unwrap();

        assert_eq!(loaded.params.len(), 2);
        for ((n1, v1), (n2, v2)) in ckpt.params.iter().zip(&loaded.params) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2, "f32 rounding makes save/load lossless");
        }
        assert_eq!(loaded.meta.epoch, 3);
        assert_eq!(loaded.meta.vocab_hash, ckpt.meta.vocab_hash);
    }

    #[test]
    fn snapshot_rounds_through_f32() {
        let mut store = ParamStore::new();
        store.add("x", Mat::from_elem((1, 1), 0.1f64));
        let ckpt = Checkpoint::from_store(&store, meta());
        assert_eq!(ckpt.params[0].1[[0, 0]], 0.1f32 as f64);
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = TrainConfig::default();
        let mut b = TrainConfig::default();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.alpha += 0.1;
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
