//! The training loop. Per batch: draw the mode's gate policy (one k per
//! batch in idld mode, each sample still binarizing its own scores), run
//! every sample through a fresh tape, take the mean loss, backprop, and
//! apply one AdamW step at the scheduled rate. Everything is driven by a
//! single seeded stream, so a (config, seed) pair replays byte-for-byte.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::Rng;

use dyndepth_core::data::{pad_batch, Sample, Target};
use dyndepth_core::gating::sample_k;
use dyndepth_core::loss;
use dyndepth_core::model::{model_forward, DropPolicy, ModelParams};
use dyndepth_core::nn::spec_mask;
use dyndepth_core::optim::{adamw_step, lr_at, OptimState};
use dyndepth_core::rng::{stream_from_seed, Stream};
use dyndepth_core::tensor::Tensor;
use dyndepth_core::{Tape, Var};

use crate::checkpoint::{checkpoint_save, Checkpoint, OptimizerSnapshot, RngState};
use crate::config::{ExperimentConfig, TrainMode};
use crate::evalrun::{evaluate, EvalPolicy};

pub const TRAIN_LOG_HEADER: &str = "step,epoch,lr,loss,k_or_mask_popcount";
pub const DEV_METRICS_HEADER: &str = "epoch,metric_name,metric_value";

#[derive(Debug)]
pub struct TrainOutput {
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub dev_metrics_path: PathBuf,
    pub final_dev_metric: Option<f64>,
}

/// The loss of one sample under the mode's policy, plus how many layers ran.
fn sample_loss(
    tape: &mut Tape,
    config: &ExperimentConfig,
    vars: &dyndepth_core::model::ModelVars,
    features: &Tensor,
    target: &Target,
    policy: DropPolicy,
    rng: &mut Stream,
) -> Result<(Var, usize)> {
    let t = features.shape[0];
    if config.train.mode == TrainMode::Ee {
        let exits =
            dyndepth_core::model::ee_all_exit_logits(tape, features, vars, &config.model)?;
        let mut per_exit = Vec::with_capacity(exits.len());
        for logits in exits {
            per_exit.push(target_loss(tape, logits, target, t)?);
        }
        let joint = loss::ee_joint_loss(tape, &per_exit)?;
        Ok((joint.loss, config.model.n_layers))
    } else {
        let (logits, trace) = model_forward(tape, features, policy, vars, &config.model, rng)?;
        let loss_var = target_loss(tape, logits, target, t)?;
        Ok((loss_var, trace.executed_layers))
    }
}

fn target_loss(tape: &mut Tape, logits: Var, target: &Target, input_len: usize) -> Result<Var> {
    match target {
        Target::Labels(labels) => {
            let lp = tape.row_log_softmax(logits);
            Ok(loss::ctc_loss(tape, lp, labels, input_len)?.loss)
        }
        Target::Class(class) => Ok(loss::cross_entropy(tape, logits, *class)?),
    }
}

fn augment(features: &Tensor, config: &ExperimentConfig, rng: &mut Stream) -> Result<Tensor> {
    let aug = &config.augment;
    if aug.time_mask == 0 && aug.feat_mask == 0 {
        return Ok(features.clone());
    }
    let (t, d) = (features.shape[0], features.shape[1]);
    // widths cap at dim-1 so short desk-scale utterances stay maskable
    let tw = aug.time_mask.min(t.saturating_sub(1));
    let fw = aug.feat_mask.min(d.saturating_sub(1));
    Ok(spec_mask(features, tw, fw, rng)?)
}

fn dev_metric(config: &ExperimentConfig, params: &ModelParams, dev: &[Sample]) -> Result<(String, f64)> {
    if dev.is_empty() {
        return Ok(("none".into(), f64::NAN));
    }
    let result = evaluate(params, dev, &EvalPolicy::Full, config.train.seed)?;
    Ok((result.metric_name, result.metric_value))
}

pub fn cmd_train(config: &ExperimentConfig, out_dir: &Path) -> Result<TrainOutput> {
    config.validate()?;
    let hash = config.hash();
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    let splits = config.load_splits()?;
    if splits.train.is_empty() && config.train.epochs > 0 {
        bail!("training requested on an empty train split");
    }

    let mut params = ModelParams::init(&config.model, config.train.seed)?;
    let mut optim = OptimState::new(&params.set, config.optimizer.adam_config());
    let schedule = config.schedule.lr_schedule(config.optimizer.peak_lr)?;
    let mut rng = stream_from_seed(config.train.seed);

    // log text is accumulated and written once per epoch; no timestamps
    // anywhere so reruns are byte-identical
    let mut log = String::new();
    writeln!(log, "# config_hash={} seed={}", hash, config.train.seed)?;
    writeln!(log, "{}", TRAIN_LOG_HEADER)?;
    let mut dev_log = String::new();
    writeln!(dev_log, "# config_hash={} seed={}", hash, config.train.seed)?;
    writeln!(dev_log, "{}", DEV_METRICS_HEADER)?;

    let log_path = out_dir.join("train_log.csv");
    let dev_metrics_path = out_dir.join("dev_metrics.csv");
    let final_path = out_dir.join("final.dynd");

    let save = |params: &ModelParams, optim: &OptimState, rng: &Stream, epoch: u32, path: &Path| -> Result<()> {
        let ckpt = Checkpoint {
            config: config.clone(),
            config_hash: hash.clone(),
            epoch,
            rng: RngState::capture(rng),
            params: params.set.clone(),
            optimizer: Some(OptimizerSnapshot::capture(&params.set, optim)),
        };
        checkpoint_save(path, &ckpt).with_context(|| format!("saving {}", path.display()))?;
        Ok(())
    };

    // epoch 0 checkpoint: the initialization, retained as last-good until
    // the first epoch lands
    save(&params, &optim, &rng, 0, &out_dir.join("epoch_000.dynd"))?;
    let mut last_good = out_dir.join("epoch_000.dynd");

    let mut step: u64 = 0;
    let mut final_dev = None;
    for epoch in 1..=config.train.epochs {
        // deterministic shuffle
        let mut order: Vec<usize> = (0..splits.train.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        for chunk in order.chunks(config.train.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &splits.train[i]).collect();
            let batch = pad_batch(&samples)?;

            // per-batch policy state
            let (policy, k_label): (DropPolicy, Option<f64>) = match config.train.mode {
                TrainMode::Static => (DropPolicy::Full, Some(config.model.n_layers as f64)),
                TrainMode::Ee => (DropPolicy::Full, Some(config.model.n_layers as f64)),
                TrainMode::Idld => {
                    let k = sample_k(config.model.n_layers, &mut rng);
                    (DropPolicy::InputDrivenTopK(k), Some(k as f64))
                }
                TrainMode::Rd => {
                    let p = match (config.train.rd_p, config.train.rd_p_range) {
                        (Some(p), None) => p,
                        (None, Some((lo, hi))) => {
                            if lo == hi {
                                lo
                            } else {
                                rng.gen_range(lo..hi)
                            }
                        }
                        _ => unreachable!("validated"),
                    };
                    (DropPolicy::RandomBernoulli(p), None)
                }
            };

            let mut tape = Tape::new();
            let vars = params.bind(&mut tape, true);
            let mut per_sample = Vec::with_capacity(batch.len());
            let mut popcount_sum = 0usize;
            for i in 0..batch.len() {
                let feats = augment(&batch.valid_features(i), config, &mut rng)?;
                // augmentation and gate draws consume `rng` in sample order
                let (loss_var, executed) = sample_loss(
                    &mut tape,
                    config,
                    &vars,
                    &feats,
                    &batch.targets[i],
                    policy,
                    &mut rng,
                )?;
                per_sample.push(loss_var);
                popcount_sum += executed;
            }
            let batch_loss = loss::batch_mean_loss(&mut tape, &per_sample)?;
            let loss_value = tape.value(batch_loss).item()?;

            if !loss_value.is_finite() {
                std::fs::write(&log_path, &log)?;
                std::fs::write(&dev_metrics_path, &dev_log)?;
                bail!(
                    "non-finite loss {} at step {}; aborting with last good checkpoint {}",
                    loss_value,
                    step,
                    last_good.display()
                );
            }

            tape.backward(batch_loss)?;
            let grads = params.set.collect_grads(&tape, &vars.all);
            let lr = lr_at(&schedule, step + 1);
            adamw_step(&mut params.set, &grads, &mut optim, lr)?;

            // idld logs the drawn k; rd logs the batch's mean mask popcount
            let k_col = k_label.unwrap_or(popcount_sum as f64 / batch.len() as f64);
            writeln!(log, "{},{},{},{},{}", step, epoch, lr, loss_value, k_col)?;
            step += 1;
        }

        let epoch_path = out_dir.join(format!("epoch_{:03}.dynd", epoch));
        save(&params, &optim, &rng, epoch, &epoch_path)?;
        last_good = epoch_path;

        let (metric_name, metric_value) = dev_metric(config, &params, &splits.dev)?;
        writeln!(dev_log, "{},{},{}", epoch, metric_name, metric_value)?;
        final_dev = Some(metric_value);
    }

    save(&params, &optim, &rng, config.train.epochs, &final_path)?;
    std::fs::write(&log_path, &log)?;
    std::fs::write(&dev_metrics_path, &dev_log)?;

    Ok(TrainOutput {
        final_checkpoint: final_path,
        log_path,
        dev_metrics_path,
        final_dev_metric: final_dev,
    })
}
