//! Shared experiment configs for the harness integration tests.
#![allow(dead_code)] // each test target uses a subset

use dyndepth_cli::config::{
    AugmentConfig, DatasetConfig, ExperimentConfig, OptimizerAlgo, OptimizerConfig,
    ScheduleConfig, TrainConfig, TrainMode,
};
use dyndepth_core::data::{SynthClsConfig, SynthCtcConfig};
use dyndepth_core::model::{ModelConfig, SelectorConfig, TaskKind};

/// Small classification setup that trains in about a second.
pub fn tiny_cls_config(mode: TrainMode, seed: u64, epochs: u32) -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig {
            n_layers: 3,
            d_model: 16,
            num_heads: 2,
            d_ff: 32,
            d_in: 6,
            max_seq_len: 24,
            task: TaskKind::Classification { num_classes: 4 },
            selector: SelectorConfig { channels: 8, kernel_width: 3, pooled_len: 4 },
            ee_enabled: mode == TrainMode::Ee,
        },
        dataset: DatasetConfig::SynthCls(SynthClsConfig {
            num_classes: 4,
            d_in: 6,
            len_range: (10, 16),
            span_range: (3, 4),
            span_amp: 1.0,
            bg_amp: 0.5,
            noise_sigma: 0.05,
            num_train: 96,
            num_dev: 32,
            num_test: 64,
            seed: 11,
        }),
        optimizer: OptimizerConfig {
            algo: OptimizerAlgo::Adamw,
            peak_lr: 2e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
        },
        schedule: ScheduleConfig { warmup_steps: 20, decay_rate: 0.95, decay_every: 50 },
        train: TrainConfig {
            mode,
            epochs,
            batch_size: 16,
            seed,
            rd_p: if mode == TrainMode::Rd { Some(0.5) } else { None },
            rd_p_range: None,
        },
        augment: AugmentConfig::default(),
    }
}

/// The trend-reproduction setup: N=6, d_model=64, d_ff=128, two heads, on
/// the synthetic classification task.
pub fn trend_cls_config(mode: TrainMode, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig {
            n_layers: 6,
            d_model: 64,
            num_heads: 2,
            d_ff: 128,
            d_in: 8,
            max_seq_len: 24,
            task: TaskKind::Classification { num_classes: 4 },
            selector: SelectorConfig { channels: 32, kernel_width: 3, pooled_len: 4 },
            ee_enabled: false,
        },
        dataset: DatasetConfig::SynthCls(SynthClsConfig {
            num_classes: 4,
            d_in: 8,
            len_range: (12, 20),
            span_range: (3, 5),
            span_amp: 1.0,
            bg_amp: 0.5,
            noise_sigma: 0.1,
            num_train: 512,
            num_dev: 128,
            num_test: 256,
            seed: 11,
        }),
        optimizer: OptimizerConfig {
            algo: OptimizerAlgo::Adamw,
            peak_lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
        },
        schedule: ScheduleConfig { warmup_steps: 50, decay_rate: 0.97, decay_every: 100 },
        train: TrainConfig {
            mode,
            epochs: 15,
            batch_size: 16,
            seed,
            rd_p: if mode == TrainMode::Rd { Some(0.5) } else { None },
            rd_p_range: None,
        },
        augment: AugmentConfig::default(),
    }
}

/// Static CTC training on the synthetic transcription task.
pub fn ctc_regression_config() -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig {
            n_layers: 2,
            d_model: 32,
            num_heads: 2,
            d_ff: 64,
            d_in: 8,
            max_seq_len: 24,
            task: TaskKind::Ctc { vocab_size: 5 },
            selector: SelectorConfig { channels: 8, kernel_width: 3, pooled_len: 4 },
            ee_enabled: false,
        },
        dataset: DatasetConfig::SynthCtc(SynthCtcConfig {
            vocab: 4,
            d_in: 8,
            frames_per_symbol: (2, 4),
            symbols_per_utt: (2, 5),
            noise_sigma: 0.1,
            num_train: 2000,
            num_dev: 200,
            num_test: 400,
            seed: 17,
        }),
        optimizer: OptimizerConfig {
            algo: OptimizerAlgo::Adam,
            peak_lr: 2e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
        },
        schedule: ScheduleConfig { warmup_steps: 100, decay_rate: 0.95, decay_every: 200 },
        train: TrainConfig {
            mode: TrainMode::Static,
            epochs: 8,
            batch_size: 16,
            seed: 5,
            rd_p: None,
            rd_p_range: None,
        },
        augment: AugmentConfig::default(),
    }
}
