//! Binary checkpoint container.
//!
//! Layout: `DPCK`, a little-endian `u32` format version, a `u64` header
//! length, the JSON header, then every parameter tensor as little-endian
//! `f64` in store order. When optimizer state is present the Adam first and
//! second moments follow in the same order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{AdamConfig, TrainConfig};
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::model::{DeepPerson, ModelConfig};
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Per-epoch means written to the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_trp: Option<f64>,
    pub loss_cls_p: Option<f64>,
    pub loss_cls_g: Option<f64>,
    pub map: Option<f64>,
}

impl EpochMetrics {
    /// `key=value` fields separated by spaces; disabled terms print `na`.
    pub fn to_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "na".to_string(), |v| format!("{v:?}"));
        let mut line = format!(
            "epoch={} lr={:?} loss={:?} loss_trp={} loss_cls_p={} loss_cls_g={}",
            self.epoch,
            self.lr,
            self.loss,
            opt(self.loss_trp),
            opt(self.loss_cls_p),
            opt(self.loss_cls_g)
        );
        if let Some(m) = self.map {
            line.push_str(&format!(" mAP={m:?}"));
        }
        line
    }
}

/// Everything besides the parameters needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs; the next epoch to run.
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub optimizer: Adam,
    /// Master seed; each epoch's sampling stream is derived from it.
    pub seed: u64,
    pub best_map: Option<f64>,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(params: &ParamStore, config: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            batch_in_epoch: 0,
            optimizer: Adam::new(config.adam, params),
            seed: config.seed,
            best_map: None,
            best_epoch: None,
            history: Vec::new(),
        }
    }

    pub fn metrics_log(&self) -> String {
        self.history.iter().map(|m| m.to_line() + "\n").collect()
    }
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    epoch: usize,
    batch_in_epoch: usize,
    adam: AdamConfig,
    adam_step: u64,
    seed: u64,
    best_map: Option<f64>,
    best_epoch: Option<usize>,
    history: Vec<EpochMetrics>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    fingerprint: String,
    model: ModelConfig,
    train: Option<TrainConfig>,
    params: Vec<(String, Vec<usize>)>,
    state: Option<StateHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub params: ParamStore,
    pub state: Option<TrainState>,
}

fn fingerprint_of(model: &ModelConfig, train: Option<&TrainConfig>) -> String {
    let mut h = Sha256::new();
    h.update(model.fingerprint());
    if let Some(t) = train {
        h.update(t.fingerprint());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn from_model(
        model: &DeepPerson,
        train_config: Option<&TrainConfig>,
        state: Option<&TrainState>,
    ) -> Self {
        Self {
            model_config: model.config().clone(),
            train_config: train_config.cloned(),
            params: model.params().clone(),
            state: state.cloned(),
        }
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_of(&self.model_config, self.train_config.as_ref())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            fingerprint: self.fingerprint(),
            model: self.model_config.clone(),
            train: self.train_config.clone(),
            params: self
                .params
                .entries()
                .iter()
                .map(|e| (e.name.clone(), e.shape.clone()))
                .collect(),
            state: self.state.as_ref().map(|s| StateHeader {
                epoch: s.epoch,
                batch_in_epoch: s.batch_in_epoch,
                adam: s.optimizer.config,
                adam_step: s.optimizer.step,
                seed: s.seed,
                best_map: s.best_map,
                best_epoch: s.best_epoch,
                history: s.history.clone(),
            }),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + self.params.num_scalars() * 24);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for e in self.params.entries() {
            put_f64s(&mut out, &e.data);
        }
        if let Some(s) = &self.state {
            for m in &s.optimizer.m {
                put_f64s(&mut out, m);
            }
            for v in &s.optimizer.v {
                put_f64s(&mut out, v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let len = usize::try_from(len)
            .map_err(|_| Error::Checkpoint("header length overflows".into()))?;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        let expected = fingerprint_of(&header.model, header.train.as_ref());
        if header.fingerprint != expected {
            return Err(Error::Checkpoint(
                "header fingerprint does not match its configuration".into(),
            ));
        }
        let mut params = ParamStore::new();
        for (name, shape) in &header.params {
            let n = shape.iter().product();
            params.add(name.clone(), shape.clone(), r.f64s(n)?);
        }
        let state = match header.state {
            Some(s) => {
                let sizes: Vec<usize> = params.entries().iter().map(|e| e.data.len()).collect();
                let m = sizes
                    .iter()
                    .map(|&n| r.f64s(n))
                    .collect::<Result<Vec<_>>>()?;
                let v = sizes
                    .iter()
                    .map(|&n| r.f64s(n))
                    .collect::<Result<Vec<_>>>()?;
                Some(TrainState {
                    epoch: s.epoch,
                    batch_in_epoch: s.batch_in_epoch,
                    optimizer: Adam {
                        config: s.adam,
                        step: s.adam_step,
                        m,
                        v,
                    },
                    seed: s.seed,
                    best_map: s.best_map,
                    best_epoch: s.best_epoch,
                    history: s.history,
                })
            }
            None => None,
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            model_config: header.model,
            train_config: header.train,
            params,
            state,
        })
    }

    /// Writes through a temporary file so an interrupted save never leaves a
    /// partial checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Refuses configurations that differ from the saved ones, listing each
    /// differing field.
    pub fn check_compatible(&self, model: &ModelConfig, train: Option<&TrainConfig>) -> Result<()> {
        let mut diff = self.model_config.diff(model);
        if let (Some(ours), Some(theirs)) = (&self.train_config, train) {
            if ours.fingerprint() != theirs.fingerprint() {
                let a = serde_json::to_value(ours).expect("config serializes");
                let b = serde_json::to_value(theirs).expect("config serializes");
                if let (Some(a), Some(b)) = (a.as_object(), b.as_object()) {
                    diff.extend(
                        a.iter()
                            .filter(|(k, v)| b.get(*k) != Some(v))
                            .map(|(k, v)| format!("trainer.{k}: {v} != {}", b[k])),
                    );
                }
            }
        }
        if diff.is_empty() {
            Ok(())
        } else {
            Err(Error::FingerprintMismatch(diff.join("; ")))
        }
    }

    /// Rebuilds the saved network.
    pub fn to_model(&self) -> Result<DeepPerson> {
        let mut model = DeepPerson::new(self.model_config.clone(), 0)?;
        self.restore_into(&mut model)?;
        Ok(model)
    }

    /// Copies the saved parameters into a model of the same layout.
    pub fn restore_into(&self, model: &mut DeepPerson) -> Result<()> {
        self.check_compatible(model.config(), None)?;
        let target = model.params_mut();
        if target.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                target.len()
            )));
        }
        for (dst, src) in target.entries_mut().iter_mut().zip(self.params.entries()) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match model tensor {} {:?}",
                    src.name, src.shape, dst.name, dst.shape
                )));
            }
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }
}
