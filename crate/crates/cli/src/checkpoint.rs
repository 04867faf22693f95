//! Binary checkpoints: magic `DYND`, a u32 format version, a JSON manifest
//! (config, epoch, RNG state, named parameter entries with byte offsets)
//! and a raw little-endian f32 parameter block. Parameters train in f64 and
//! store as f32, so save → load → save is byte-identical while a reload
//! costs one well-defined rounding.

use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ExperimentConfig;
use dyndepth_core::optim::{OptimState, ParamSet};
use dyndepth_core::rng::Stream;
use dyndepth_core::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DYND";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes (not a DYND checkpoint)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, this build reads {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("manifest offset error: {0}")]
    Offset(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] dyndepth_core::CoreError),
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Serializable ChaCha stream state: seed plus 128-bit word position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed_hex: String,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(stream: &Stream) -> Self {
        let seed = stream.get_seed();
        let pos = stream.get_word_pos();
        RngState {
            seed_hex: seed.iter().map(|b| format!("{:02x}", b)).collect(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> Result<Stream> {
        if self.seed_hex.len() != 64 {
            return Err(CheckpointError::Manifest(format!(
                "rng seed must be 32 hex bytes, got {} chars",
                self.seed_hex.len()
            )));
        }
        let mut seed = [0u8; 32];
        for (i, chunk) in self.seed_hex.as_bytes().chunks(2).enumerate() {
            let s = std::str::from_utf8(chunk)
                .map_err(|_| CheckpointError::Manifest("non-utf8 rng seed".into()))?;
            seed[i] = u8::from_str_radix(s, 16)
                .map_err(|_| CheckpointError::Manifest("non-hex rng seed".into()))?;
        }
        let mut stream = Stream::from_seed(seed);
        stream.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        Ok(stream)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the f32 block.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSection {
    pub step: u64,
    /// First-moment entries, aligned with `params`.
    pub m: Vec<ManifestEntry>,
    /// Second-moment entries, aligned with `params`.
    pub v: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    config: ExperimentConfig,
    epoch: u32,
    rng: RngState,
    params: Vec<ManifestEntry>,
    optimizer: Option<OptimizerSection>,
}

/// Everything a checkpoint carries.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub epoch: u32,
    pub rng: RngState,
    pub params: ParamSet,
    pub optimizer: Option<OptimizerSnapshot>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerSnapshot {
    pub fn capture(params: &ParamSet, state: &OptimState) -> Self {
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            let (mi, vi) = state.moments(i);
            m.push(mi.to_vec());
            v.push(vi.to_vec());
        }
        OptimizerSnapshot { step: state.step, m, v }
    }
}

fn push_block(block: &mut Vec<u8>, data: &[f64]) -> u64 {
    let offset = block.len() as u64;
    for &v in data {
        block.extend_from_slice(&(v as f32).to_le_bytes());
    }
    offset
}

pub fn checkpoint_save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut block = Vec::new();
    let mut params = Vec::with_capacity(ckpt.params.len());
    for (name, tensor) in ckpt.params.iter() {
        let offset = push_block(&mut block, &tensor.data);
        params.push(ManifestEntry {
            name: name.to_string(),
            shape: tensor.shape.clone(),
            offset,
        });
    }
    let optimizer = ckpt.optimizer.as_ref().map(|opt| {
        let mut m = Vec::with_capacity(opt.m.len());
        let mut v = Vec::with_capacity(opt.v.len());
        for (i, (name, tensor)) in ckpt.params.iter().enumerate() {
            let off_m = push_block(&mut block, &opt.m[i]);
            m.push(ManifestEntry {
                name: format!("optim.m.{}", name),
                shape: tensor.shape.clone(),
                offset: off_m,
            });
            let off_v = push_block(&mut block, &opt.v[i]);
            v.push(ManifestEntry {
                name: format!("optim.v.{}", name),
                shape: tensor.shape.clone(),
                offset: off_v,
            });
        }
        OptimizerSection { step: opt.step, m, v }
    });

    let manifest = Manifest {
        config_hash: ckpt.config_hash.clone(),
        config: ckpt.config.clone(),
        epoch: ckpt.epoch,
        rng: ckpt.rng.clone(),
        params,
        optimizer,
    };
    let manifest_json =
        serde_json::to_vec(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;

    let mut out = Vec::with_capacity(12 + manifest_json.len() + block.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    out.extend_from_slice(&block);
    std::fs::write(path, out)?;
    Ok(())
}

fn read_entry(block: &[u8], entry: &ManifestEntry) -> Result<Vec<f64>> {
    let numel: usize = entry.shape.iter().product();
    let bytes = numel * 4;
    let start = entry.offset as usize;
    let end = start.checked_add(bytes).ok_or_else(|| {
        CheckpointError::Offset(format!("entry `{}` offset overflows", entry.name))
    })?;
    if end > block.len() {
        return Err(CheckpointError::Offset(format!(
            "entry `{}` spans {}..{} but the block has {} bytes",
            entry.name,
            start,
            end,
            block.len()
        )));
    }
    Ok(block[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

fn check_offsets(entries: &[(&ManifestEntry, usize)], block_len: usize) -> Result<()> {
    // non-overlapping and in-bounds
    let mut spans: Vec<(u64, u64, &str)> = entries
        .iter()
        .map(|(e, numel)| (e.offset, e.offset + (*numel as u64) * 4, e.name.as_str()))
        .collect();
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[0].1 > w[1].0 {
            return Err(CheckpointError::Offset(format!(
                "entries `{}` and `{}` overlap",
                w[0].2, w[1].2
            )));
        }
    }
    if let Some(last) = spans.last() {
        if last.1 > block_len as u64 {
            return Err(CheckpointError::Offset(format!(
                "entry `{}` runs past the parameter block",
                last.2
            )));
        }
    }
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;

    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated("shorter than the fixed header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version, supported: VERSION });
    }
    let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if 12 + manifest_len > bytes.len() {
        return Err(CheckpointError::Truncated("manifest runs past end of file".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[12..12 + manifest_len])
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let block = &bytes[12 + manifest_len..];

    let mut spans: Vec<(&ManifestEntry, usize)> = Vec::new();
    for e in &manifest.params {
        spans.push((e, e.shape.iter().product()));
    }
    if let Some(opt) = &manifest.optimizer {
        if opt.m.len() != manifest.params.len() || opt.v.len() != manifest.params.len() {
            return Err(CheckpointError::Manifest(
                "optimizer moment entries not aligned with parameters".into(),
            ));
        }
        for e in opt.m.iter().chain(&opt.v) {
            spans.push((e, e.shape.iter().product()));
        }
    }
    check_offsets(&spans, block.len())?;

    let mut params = ParamSet::new();
    for e in &manifest.params {
        let data = read_entry(block, e)?;
        params.push(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    let optimizer = match &manifest.optimizer {
        Some(opt) => {
            let mut m = Vec::with_capacity(opt.m.len());
            let mut v = Vec::with_capacity(opt.v.len());
            for e in &opt.m {
                m.push(read_entry(block, e)?);
            }
            for e in &opt.v {
                v.push(read_entry(block, e)?);
            }
            Some(OptimizerSnapshot { step: opt.step, m, v })
        }
        None => None,
    };

    Ok(Checkpoint {
        config: manifest.config,
        config_hash: manifest.config_hash,
        epoch: manifest.epoch,
        rng: manifest.rng,
        params,
        optimizer,
    })
}

impl Checkpoint {
    /// Restore optimizer state aligned with `params`, when present.
    pub fn restore_optimizer(
        &self,
        state: &mut OptimState,
    ) -> std::result::Result<(), dyndepth_core::CoreError> {
        if let Some(opt) = &self.optimizer {
            state.step = opt.step;
            for i in 0..self.params.len() {
                state.set_moments(i, opt.m[i].clone(), opt.v[i].clone())?;
            }
        }
        Ok(())
    }

    pub fn param_tensor(&self, name: &str) -> Option<&Tensor> {
        self.params.find(name).map(|id| self.params.get(id))
    }
}
