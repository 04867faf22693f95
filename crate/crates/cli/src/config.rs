//! Experiment configuration: one JSON file pins the model, dataset,
//! optimizer, schedule and training mode. Unknown keys are hard errors, and
//! every artifact records the config's hash.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dyndepth_core::data::{MelParams, Splits, SynthClsConfig, SynthCtcConfig};
use dyndepth_core::model::{ModelConfig, TaskKind};
use dyndepth_core::optim::{AdamConfig, LrSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    SynthCtc(SynthCtcConfig),
    SynthCls(SynthClsConfig),
    Manifest(ManifestDataset),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestDataset {
    pub train: String,
    pub dev: String,
    pub test: String,
    #[serde(default)]
    pub mel: Option<MelParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerAlgo {
    /// Plain Adam; weight decay must stay 0.
    Adam,
    /// Adam with decoupled weight decay.
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub algo: OptimizerAlgo,
    pub peak_lr: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            base_lr: self.peak_lr,
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub warmup_steps: u64,
    pub decay_rate: f64,
    pub decay_every: u64,
}

impl ScheduleConfig {
    pub fn lr_schedule(&self, peak_lr: f64) -> dyndepth_core::Result<LrSchedule> {
        LrSchedule::new(peak_lr, self.warmup_steps, self.decay_rate, self.decay_every)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Full static stack.
    Static,
    /// Input-driven dropping: per batch k ~ U(1, N), per sample top-k gates.
    Idld,
    /// Random dropping with per-layer Bernoulli gates.
    Rd,
    /// Early exit: joint loss over all auxiliary heads.
    Ee,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    /// Fixed dropping probability for rd mode.
    #[serde(default)]
    pub rd_p: Option<f64>,
    /// Per-batch uniform draw range for rd mode.
    #[serde(default)]
    pub rd_p_range: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Max contiguous time-mask width (frames); 0 disables.
    #[serde(default)]
    pub time_mask: usize,
    /// Max contiguous feature-mask width (dims); 0 disables.
    #[serde(default)]
    pub feat_mask: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate().context("model section")?;
        if self.train.batch_size == 0 {
            bail!("train.batch_size must be >= 1 (allowed: any positive integer)");
        }
        match self.train.mode {
            TrainMode::Rd => match (self.train.rd_p, self.train.rd_p_range) {
                (Some(p), None) => {
                    if !(0.0..=1.0).contains(&p) {
                        bail!("train.rd_p must be in [0, 1], got {}", p);
                    }
                }
                (None, Some((lo, hi))) => {
                    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                        bail!("train.rd_p_range must satisfy 0 <= lo <= hi <= 1");
                    }
                }
                (None, None) => bail!("rd mode needs exactly one of train.rd_p / train.rd_p_range"),
                (Some(_), Some(_)) => {
                    bail!("rd mode needs exactly one of train.rd_p / train.rd_p_range, got both")
                }
            },
            _ => {
                if self.train.rd_p.is_some() || self.train.rd_p_range.is_some() {
                    bail!("train.rd_p / train.rd_p_range only apply to mode \"rd\"");
                }
            }
        }
        if self.train.mode == TrainMode::Ee && !self.model.ee_enabled {
            bail!("ee training mode requires model.ee_enabled = true");
        }
        if self.optimizer.algo == OptimizerAlgo::Adam && self.optimizer.weight_decay != 0.0 {
            bail!("optimizer adam does not take weight_decay; use adamw (allowed: adam, adamw)");
        }
        self.schedule
            .lr_schedule(self.optimizer.peak_lr)
            .context("schedule section")?;

        // dataset ↔ model consistency
        match (&self.dataset, &self.model.task) {
            (DatasetConfig::SynthCtc(d), TaskKind::Ctc { vocab_size }) => {
                if d.vocab + 1 != *vocab_size {
                    bail!(
                        "dataset vocab {} (labels) needs model vocab_size {} (labels + blank), got {}",
                        d.vocab,
                        d.vocab + 1,
                        vocab_size
                    );
                }
                if d.d_in != self.model.d_in {
                    bail!("dataset d_in {} != model d_in {}", d.d_in, self.model.d_in);
                }
                let t_max = d.symbols_per_utt.1 * d.frames_per_symbol.1;
                if t_max > self.model.max_seq_len {
                    bail!(
                        "dataset can emit {} frames but model.max_seq_len is {}",
                        t_max,
                        self.model.max_seq_len
                    );
                }
            }
            (DatasetConfig::SynthCls(d), TaskKind::Classification { num_classes }) => {
                if d.num_classes != *num_classes {
                    bail!("dataset num_classes {} != model {}", d.num_classes, num_classes);
                }
                if d.d_in != self.model.d_in {
                    bail!("dataset d_in {} != model d_in {}", d.d_in, self.model.d_in);
                }
                if d.len_range.1 > self.model.max_seq_len {
                    bail!(
                        "dataset can emit {} frames but model.max_seq_len is {}",
                        d.len_range.1,
                        self.model.max_seq_len
                    );
                }
            }
            (DatasetConfig::Manifest(_), _) => {}
            (ds, task) => bail!(
                "dataset type {:?} does not match model task {:?}",
                std::mem::discriminant(ds),
                task
            ),
        }
        Ok(())
    }

    /// First 16 hex chars of sha256 over the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{:02x}", b)).collect()
    }

    /// Build (or load) the dataset splits this config describes.
    pub fn load_splits(&self) -> Result<Splits> {
        match &self.dataset {
            DatasetConfig::SynthCtc(c) => Ok(dyndepth_core::data::gen_ctc_task(c)?),
            DatasetConfig::SynthCls(c) => Ok(dyndepth_core::data::gen_cls_task(c)?),
            DatasetConfig::Manifest(m) => {
                let read = |p: &str| -> Result<Vec<dyndepth_core::data::Sample>> {
                    dyndepth_core::data::read_manifest(Path::new(p), m.mel)
                        .with_context(|| format!("manifest {}", p))
                };
                Ok(Splits {
                    train: read(&m.train)?,
                    dev: read(&m.dev)?,
                    test: read(&m.test)?,
                })
            }
        }
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let config: ExperimentConfig = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use dyndepth_core::model::SelectorConfig;

    pub(crate) fn sample_config() -> ExperimentConfig {
        ExperimentConfig {
            model: ModelConfig {
                n_layers: 2,
                d_model: 8,
                num_heads: 2,
                d_ff: 16,
                d_in: 4,
                max_seq_len: 16,
                task: TaskKind::Classification { num_classes: 3 },
                selector: SelectorConfig { channels: 4, kernel_width: 3, pooled_len: 2 },
                ee_enabled: false,
            },
            dataset: DatasetConfig::SynthCls(SynthClsConfig {
                num_classes: 3,
                d_in: 4,
                len_range: (6, 10),
                span_range: (2, 3),
                span_amp: 1.0,
                bg_amp: 0.5,
                noise_sigma: 0.05,
                num_train: 8,
                num_dev: 4,
                num_test: 4,
                seed: 5,
            }),
            optimizer: OptimizerConfig {
                algo: OptimizerAlgo::Adamw,
                peak_lr: 1e-3,
                betas: default_betas(),
                eps: default_eps(),
                weight_decay: 0.01,
            },
            schedule: ScheduleConfig { warmup_steps: 10, decay_rate: 0.95, decay_every: 20 },
            train: TrainConfig {
                mode: TrainMode::Idld,
                epochs: 1,
                batch_size: 4,
                seed: 1,
                rd_p: None,
                rd_p_range: None,
            },
            augment: AugmentConfig::default(),
        }
    }

    #[test]
    fn roundtrips_and_hashes_stably() {
        let config = sample_config();
        let json = serde_json::to_string_pretty(&config).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(config, back);
        assert_eq!(config.hash(), back.hash());
        assert_eq!(config.hash().len(), 16);
    }

    #[test]
    fn unknown_keys_are_named_in_the_error() {
        let mut v: serde_json::Value =
            serde_json::to_value(sample_config()).unwrap();
        v["train"]["batchsize"] = serde_json::json!(4);
        let err = serde_json::from_value::<ExperimentConfig>(v).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("batchsize"), "error should name the key: {}", msg);
        assert!(msg.contains("batch_size"), "error should list allowed keys: {}", msg);
    }

    #[test]
    fn rd_mode_needs_exactly_one_probability() {
        let mut config = sample_config();
        config.train.mode = TrainMode::Rd;
        assert!(config.validate().is_err());
        config.train.rd_p = Some(0.5);
        assert!(config.validate().is_ok());
        config.train.rd_p_range = Some((0.2, 0.9));
        assert!(config.validate().is_err());
        config.train.rd_p = None;
        assert!(config.validate().is_ok());
    }

    #[test]
    fn ee_mode_requires_aux_heads() {
        let mut config = sample_config();
        config.train.mode = TrainMode::Ee;
        assert!(config.validate().is_err());
        config.model.ee_enabled = true;
        assert!(config.validate().is_ok());
    }

    #[test]
    fn adam_rejects_weight_decay() {
        let mut config = sample_config();
        config.optimizer.algo = OptimizerAlgo::Adam;
        assert!(config.validate().is_err());
        config.optimizer.weight_decay = 0.0;
        assert!(config.validate().is_ok());
    }

    #[test]
    fn dataset_model_mismatch_is_rejected() {
        let mut config = sample_config();
        config.model.task = TaskKind::Classification { num_classes: 4 };
        assert!(config.validate().is_err());
    }
}
