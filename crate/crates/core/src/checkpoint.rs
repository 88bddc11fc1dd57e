//! Single-file checkpoints: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header, then raw little-endian `f32` tensor blobs.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::layers::ParamStore;
use crate::networks::{CenArchConfig, MmgArchConfig};

pub const MAGIC: &[u8; 8] = b"MMSCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mmg,
    Cen,
}

/// Generator position, enough to resume the exact stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal string; JSON numbers cannot hold 128 bits portably.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob section.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: ModelKind,
    #[serde(default)]
    pub mmg_arch: Option<MmgArchConfig>,
    #[serde(default)]
    pub cen_arch: Option<CenArchConfig>,
    #[serde(default)]
    pub schedule: Option<ScheduleConfig>,
    pub loss_weights: LossWeights,
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    #[serde(default)]
    pub rng: Option<RngState>,
    #[serde(default)]
    pub optimizer: Option<AdamParams>,
    #[serde(default)]
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointHeader {
    pub fn new(kind: ModelKind, loss_weights: LossWeights, seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind,
            mmg_arch: None,
            cen_arch: None,
            schedule: None,
            loss_weights,
            epoch: 0,
            step: 0,
            seed,
            rng: None,
            optimizer: None,
            tensors: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

/// Writes `header` (its tensor index is rebuilt) and `tensors` to `path`.
pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut header = header.clone();
    header.format_version = FORMAT_VERSION;
    header.tensors.clear();
    let mut blob = Vec::new();
    for (name, t) in tensors {
        header.tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.dims().to_vec(),
            offset: blob.len() as u64,
        });
        for x in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let json = serde_json::to_vec(&header)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(MAGIC)
        .and_then(|_| f.write_all(&(json.len() as u64).to_le_bytes()))
        .and_then(|_| f.write_all(&json))
        .and_then(|_| f.write_all(&blob))
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<Checkpoint> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let raw: serde_json::Value = serde_json::from_slice(json)?;
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Checkpoint("header lacks format_version".into()))? as u32;
    if found != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let header: CheckpointHeader = serde_json::from_value(raw)?;
    let blob = &bytes[16 + len..];
    let mut tensors = BTreeMap::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let chunk = blob
            .get(start..start + 4 * n)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the end of the file", entry.name)))?;
        let data: Vec<f32> = chunk
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(entry.name.clone(), Tensor::from_vec(data, entry.shape.as_slice(), device)?);
    }
    Ok(Checkpoint { header, tensors })
}

/// Copies `param/<name>` tensors from a checkpoint into the store.
pub fn restore_params(store: &ParamStore, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    for (name, var) in store.vars() {
        let key = format!("param/{name}");
        let t = tensors
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
        if t.dims() != var.dims() {
            return Err(Error::Checkpoint(format!(
                "tensor {key} has shape {:?}, model expects {:?}",
                t.dims(),
                var.dims()
            )));
        }
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    Ok(())
}

pub fn param_tensors(store: &ParamStore) -> Vec<(String, Tensor)> {
    store
        .vars()
        .into_iter()
        .map(|(n, v)| (format!("param/{n}"), v.as_tensor().clone()))
        .collect()
}
