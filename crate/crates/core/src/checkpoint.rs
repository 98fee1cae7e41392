//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "MELROFCK"
//! version    u32      CHECKPOINT_VERSION
//! header_len u32
//! header     JSON     {format_version, mode, config, bands, backbone_trainable, training}
//! count      u32      number of blocks
//! blocks     count x {name_len u32, name utf-8, rank u32, dims u64 x rank, data f32 x prod(dims)}
//! ```
//!
//! Parameter blocks come first, in the model's registration order: band
//! projection, then per layer the time and band encoders, then the embedding
//! projection, then the onset and frame heads. When training state is saved,
//! AdamW moments follow as `optim.m.<name>` and `optim.v.<name>` blocks.

use std::path::Path;

use indexmap::IndexMap;
use melrof_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::melband::MelBandMap;
use crate::model::{MelRoFormer, Mode, ModelConfig};
use crate::params::ParamStore;
use crate::train::{OptimizerState, PlateauState, TrainConfig, TrainerState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MELROFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TrainingHeader {
    config: TrainConfig,
    step: u64,
    optimizer: crate::train::AdamWConfig,
    plateau: Option<PlateauState>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    mode: Mode,
    config: ModelConfig,
    bands: Vec<(usize, usize)>,
    backbone_trainable: bool,
    training: Option<TrainingHeader>,
}

/// Model weights plus optional resumable training state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: MelRoFormer<f32>,
    pub training: Option<TrainerState>,
}

fn err(msg: impl Into<String>) -> CoreError {
    CoreError::Checkpoint(msg.into())
}

fn put_block(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| err("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn block(&mut self) -> Result<(String, Tensor<f32>)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| err("block name is not UTF-8"))?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| Ok(self.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| err("block too large"))?;
        let bytes = self.take(len.checked_mul(4).ok_or_else(|| err("block too large"))?)?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}

impl Checkpoint {
    pub fn new(model: MelRoFormer<f32>) -> Self {
        Self { model, training: None }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            mode: m.mode(),
            config: m.config().clone(),
            bands: m.band_map().bands().to_vec(),
            backbone_trainable: m.backbone_trainable(),
            training: self.training.as_ref().map(|t| TrainingHeader {
                config: t.config.clone(),
                step: t.optimizer.step,
                optimizer: t.optimizer.hyper,
                plateau: t.plateau.clone(),
            }),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * m.parameter_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let moments = self.training.as_ref().map(|t| (&t.optimizer.first, &t.optimizer.second));
        let count = m.params().len() + moments.map_or(0, |(a, b)| a.len() + b.len());
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (name, t) in m.params().iter() {
            put_block(&mut out, name, t.shape(), t.data());
        }
        if let Some((first, second)) = moments {
            for (prefix, map) in [("optim.m.", first), ("optim.v.", second)] {
                for (name, v) in map {
                    put_block(&mut out, &format!("{prefix}{name}"), &[v.len()], v);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8).map_err(|_| err("not a checkpoint"))? != CHECKPOINT_MAGIC {
            return Err(err("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(err(format!(
                "unsupported checkpoint version {version} (this build reads version {CHECKPOINT_VERSION})"
            )));
        }
        let n = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(n)?)?;
        if header.format_version != version || header.mode != header.config.mode {
            return Err(err("inconsistent checkpoint header"));
        }
        let map = MelBandMap::from_bands(header.bands, header.config.sample_rate, header.config.stft.window_size)?;
        if map != header.config.band_map()? {
            return Err(err("stored band map does not match the configuration"));
        }
        // Names and shapes must match what this configuration would create.
        let reference = MelRoFormer::<f32>::new(header.config.clone(), 0)?;
        let blocks = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut first = IndexMap::new();
        let mut second = IndexMap::new();
        for _ in 0..blocks {
            let (name, t) = r.block()?;
            if let Some(p) = name.strip_prefix("optim.m.") {
                first.insert(p.to_string(), t.data().to_vec());
            } else if let Some(p) = name.strip_prefix("optim.v.") {
                second.insert(p.to_string(), t.data().to_vec());
            } else {
                let expected = reference.params().get(&name).ok_or_else(|| err(format!("unexpected block {name}")))?;
                if expected.shape() != t.shape() {
                    return Err(err(format!("block {name} has shape {:?}, expected {:?}", t.shape(), expected.shape())));
                }
                params.insert(name, t);
            }
        }
        if r.pos != buf.len() {
            return Err(err("trailing bytes after the last block"));
        }
        if !params.names().eq(reference.params().names()) {
            return Err(err("parameter blocks are missing or out of order"));
        }
        for (name, v) in first.iter().chain(&second) {
            let p = params.get(name).ok_or_else(|| err(format!("moment for unknown parameter {name}")))?;
            if p.len() != v.len() {
                return Err(err(format!("moment for {name} has {} values, expected {}", v.len(), p.len())));
            }
        }
        let model = MelRoFormer::from_parts(header.config, map, params, header.backbone_trainable)?;
        let training = header.training.map(|t| TrainerState {
            config: t.config,
            optimizer: OptimizerState {
                hyper: t.optimizer,
                step: t.step,
                first,
                second,
            },
            plateau: t.plateau,
        });
        Ok(Self { model, training })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
