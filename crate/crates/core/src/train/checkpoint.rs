//! Checkpoint files.
//!
//! Layout (integers little-endian): magic `b"UHCK"`, version `u32`, entry
//! count `u32`, then per entry `name_len u32`, UTF-8 name, UHTN tensor.
//! Parameters come first in registration order, followed by optimizer
//! moments (`__adam.*`), run metadata (`__meta.*`) and the architecture
//! (`__config.*`).

use std::fs;
use std::io::{self, Cursor, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::adam::Adam;
use crate::config::ModelConfig;
use crate::nn::{ParamId, ParamStore};
use crate::tensor::io::{read_tensor, write_tensor, TensorIoError};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UHCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One architecture key whose value differs.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigDiff {
    pub key: String,
    /// Value in the requested configuration.
    pub expected: Option<f64>,
    /// Value stored in the checkpoint.
    pub found: Option<f64>,
}

fn show(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".into(), |x| x.to_string())
}

fn format_diffs(diffs: &[ConfigDiff]) -> String {
    diffs
        .iter()
        .map(|d| {
            format!(
                "{}: expected {}, found {}",
                d.key,
                show(d.expected),
                show(d.found)
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint architecture differs: {}", format_diffs(.diffs))]
    ConfigMismatch { diffs: Vec<ConfigDiff> },
    #[error("checkpoint parameters do not fit the model: {0}")]
    ParamMismatch(String),
    #[error("checkpoint file {0} not found")]
    Missing(PathBuf),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
}

impl From<TensorIoError> for CheckpointError {
    fn from(e: TensorIoError) -> Self {
        match e {
            TensorIoError::Io(io) if io.kind() == io::ErrorKind::UnexpectedEof => {
                CheckpointError::Malformed("truncated tensor".into())
            }
            TensorIoError::Io(io) => CheckpointError::Io(io),
            other => CheckpointError::Malformed(other.to_string()),
        }
    }
}

/// Model parameters, optimizer state and run position.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Stage that produced this checkpoint; 0 for an untrained model.
    pub stage: u8,
    /// Optimizer steps taken within `stage`.
    pub step: u64,
    pub complete: bool,
    pub seed: u64,
    pub params: Vec<(String, Tensor)>,
    pub adam_t: u64,
    pub adam_m: Vec<(String, Tensor)>,
    pub adam_v: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshot of a store and optimizer.
    pub fn capture(
        config: &ModelConfig,
        store: &ParamStore,
        adam: &Adam,
        stage: u8,
        step: u64,
        complete: bool,
        seed: u64,
    ) -> Self {
        let named = |moments: &[Option<Tensor>]| -> Vec<(String, Tensor)> {
            moments
                .iter()
                .enumerate()
                .filter_map(|(i, t)| {
                    t.as_ref()
                        .map(|t| (store.name(ParamId(i)).to_string(), t.clone()))
                })
                .collect()
        };
        Checkpoint {
            config: config.clone(),
            stage,
            step,
            complete,
            seed,
            params: store
                .ids()
                .map(|id| (store.name(id).to_string(), store.get(id).clone()))
                .collect(),
            adam_t: adam.t,
            adam_m: named(&adam.m),
            adam_v: named(&adam.v),
        }
    }

    /// Keys whose values differ between `cfg` and the stored architecture.
    pub fn config_diff(&self, cfg: &ModelConfig) -> Vec<ConfigDiff> {
        let mine = self.config.entries();
        let theirs = cfg.entries();
        let mut keys: Vec<&String> = mine.iter().chain(&theirs).map(|(k, _)| k).collect();
        keys.sort();
        keys.dedup();
        let look =
            |set: &[(String, f64)], k: &str| set.iter().find(|(n, _)| n == k).map(|&(_, v)| v);
        keys.into_iter()
            .filter_map(|k| {
                let (expected, found) = (look(&theirs, k), look(&mine, k));
                (expected != found).then(|| ConfigDiff {
                    key: k.clone(),
                    expected,
                    found,
                })
            })
            .collect()
    }

    pub fn check_config(&self, cfg: &ModelConfig) -> Result<(), CheckpointError> {
        let diffs = self.config_diff(cfg);
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(CheckpointError::ConfigMismatch { diffs })
        }
    }

    /// Copy parameters into `store`; names and shapes must match exactly.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        if self.params.len() != store.len() {
            return Err(CheckpointError::ParamMismatch(format!(
                "{} stored parameters for {} in the model",
                self.params.len(),
                store.len()
            )));
        }
        for (id, (name, value)) in store
            .ids()
            .collect::<Vec<_>>()
            .into_iter()
            .zip(&self.params)
        {
            if store.name(id) != name || store.get(id).shape() != value.shape() {
                return Err(CheckpointError::ParamMismatch(format!(
                    "{name} {:?} where the model has {} {:?}",
                    value.shape(),
                    store.name(id),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = value.clone();
        }
        Ok(())
    }

    /// Optimizer state keyed by `store`'s parameter order.
    pub fn restore_adam(&self, store: &ParamStore) -> Result<Adam, CheckpointError> {
        let mut adam = Adam::new(store.len());
        adam.t = self.adam_t;
        for (moments, slot) in [(&self.adam_m, &mut adam.m), (&self.adam_v, &mut adam.v)] {
            for (name, t) in moments {
                let id = store.id(name).ok_or_else(|| {
                    CheckpointError::ParamMismatch(format!("moment for unknown parameter {name}"))
                })?;
                slot[id.0] = Some(t.clone());
            }
        }
        Ok(adam)
    }

    fn entries(&self) -> Vec<(String, Tensor)> {
        let mut out = self.params.clone();
        out.push(("__adam.t".into(), Tensor::scalar(self.adam_t as f64)));
        out.extend(
            self.adam_m
                .iter()
                .map(|(n, t)| (format!("__adam.m.{n}"), t.clone())),
        );
        out.extend(
            self.adam_v
                .iter()
                .map(|(n, t)| (format!("__adam.v.{n}"), t.clone())),
        );
        out.push(("__meta.stage".into(), Tensor::scalar(f64::from(self.stage))));
        out.push(("__meta.step".into(), Tensor::scalar(self.step as f64)));
        out.push((
            "__meta.complete".into(),
            Tensor::scalar(f64::from(u8::from(self.complete))),
        ));
        // u64 split into exact 32-bit halves.
        out.push((
            "__meta.seed".into(),
            Tensor::new(
                vec![2],
                vec![(self.seed >> 32) as f64, (self.seed & 0xffff_ffff) as f64],
            )
            .expect("two halves"),
        ));
        out.extend(
            self.config
                .entries()
                .into_iter()
                .map(|(k, v)| (format!("__config.{k}"), Tensor::scalar(v))),
        );
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entries = self.entries();
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in &entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            write_tensor(&mut buf, t).expect("writing to memory");
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic { found: magic });
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = read_u32(&mut r)?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            if len > bytes.len() {
                return Err(CheckpointError::Malformed(format!(
                    "entry name length {len}"
                )));
            }
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| CheckpointError::Malformed("entry name is not UTF-8".into()))?;
            entries.push((name, read_tensor(&mut r)?));
        }
        if (r.position() as usize) != bytes.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Self::from_entries(entries)
    }

    fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self, CheckpointError> {
        let mut params = Vec::new();
        let mut adam_m = Vec::new();
        let mut adam_v = Vec::new();
        let mut meta = Vec::new();
        let mut config = Vec::new();
        for (name, t) in entries {
            if let Some(k) = name.strip_prefix("__config.") {
                config.push((k.to_string(), scalar(&name, &t)?));
            } else if let Some(n) = name.strip_prefix("__adam.m.") {
                adam_m.push((n.to_string(), t));
            } else if let Some(n) = name.strip_prefix("__adam.v.") {
                adam_v.push((n.to_string(), t));
            } else if name.starts_with("__") {
                meta.push((name, t));
            } else {
                params.push((name, t));
            }
        }
        let get = |key: &str| -> Result<&Tensor, CheckpointError> {
            meta.iter()
                .find(|(n, _)| n == key)
                .map(|(_, t)| t)
                .ok_or_else(|| CheckpointError::Malformed(format!("missing entry {key}")))
        };
        let seed = get("__meta.seed")?;
        if seed.numel() != 2 {
            return Err(CheckpointError::Malformed(
                "seed entry must hold two halves".into(),
            ));
        }
        let config = ModelConfig::from_entries(&config)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        Ok(Checkpoint {
            config,
            stage: scalar("__meta.stage", get("__meta.stage")?)? as u8,
            step: scalar("__meta.step", get("__meta.step")?)? as u64,
            complete: scalar("__meta.complete", get("__meta.complete")?)? != 0.0,
            seed: ((seed.data()[0] as u64) << 32) | seed.data()[1] as u64,
            params,
            adam_t: scalar("__adam.t", get("__adam.t")?)? as u64,
            adam_m,
            adam_v,
        })
    }
}

fn scalar(name: &str, t: &Tensor) -> Result<f64, CheckpointError> {
    if t.numel() != 1 {
        return Err(CheckpointError::Malformed(format!(
            "{name} must be a scalar"
        )));
    }
    Ok(t.data()[0])
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Malformed("truncated file".into())
        } else {
            CheckpointError::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&ck.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == io::ErrorKind::NotFound {
            CheckpointError::Missing(path.to_path_buf())
        } else {
            CheckpointError::Io(e)
        }
    })?;
    Checkpoint::from_bytes(&bytes)
}

/// Load and require the stored architecture to equal `cfg`.
pub fn load_checkpoint_for(path: &Path, cfg: &ModelConfig) -> Result<Checkpoint, CheckpointError> {
    let ck = load_checkpoint(path)?;
    ck.check_config(cfg)?;
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::UniHema;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig::small();
        let (_, store) = UniHema::build(&cfg, 4).unwrap();
        let mut adam = Adam::new(store.len());
        adam.t = 3;
        adam.m[1] = Some(Tensor::full(store.get(ParamId(1)).shape(), 0.25));
        adam.v[1] = Some(Tensor::full(store.get(ParamId(1)).shape(), 1e-7));
        Checkpoint::capture(&cfg, &store, &adam, 2, 17, false, u64::MAX - 5)
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(&bytes[..4], b"UHCK");
    }

    #[test]
    fn corrupted_magic_and_truncation() {
        let mut bytes = sample().to_bytes();
        let cut = bytes[..bytes.len() - 3].to_vec();
        assert!(matches!(
            Checkpoint::from_bytes(&cut),
            Err(CheckpointError::Malformed(_))
        ));
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::BadMagic { found }) if &found == b"XHCK"
        ));
    }

    #[test]
    fn config_mismatch_lists_keys() {
        let ck = sample();
        let other = ModelConfig {
            model_dim: 64,
            ..ModelConfig::small()
        };
        match ck.check_config(&other) {
            Err(CheckpointError::ConfigMismatch { diffs }) => {
                assert_eq!(diffs.len(), 1);
                assert_eq!(diffs[0].key, "model_dim");
                assert_eq!(
                    (diffs[0].expected, diffs[0].found),
                    (Some(64.0), Some(32.0))
                );
            }
            other => panic!("{other:?}"),
        }
        ck.check_config(&ModelConfig::small()).unwrap();
    }

    #[test]
    fn restore_into_store() {
        let ck = sample();
        let (_, mut store) = UniHema::build(&ModelConfig::small(), 99).unwrap();
        ck.restore_params(&mut store).unwrap();
        let adam = ck.restore_adam(&store).unwrap();
        let again = Checkpoint::capture(
            &ck.config,
            &store,
            &adam,
            ck.stage,
            ck.step,
            ck.complete,
            ck.seed,
        );
        assert_eq!(again, ck);
        let (_, mut wrong) = UniHema::build(&ModelConfig::default(), 0).unwrap();
        assert!(matches!(
            ck.restore_params(&mut wrong),
            Err(CheckpointError::ParamMismatch(_))
        ));
    }
}
