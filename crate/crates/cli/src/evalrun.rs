//! Dataset-level evaluation under a policy point, plus the n-sweep and
//! threshold-sweep commands that aggregate evaluation rows across
//! checkpoints and random draws.

use std::path::Path;

use anyhow::{bail, Context, Result};

use dyndepth_core::data::{Sample, Target};
use dyndepth_core::loss::ctc_greedy_decode;
use dyndepth_core::metrics::{self, levenshtein, RunReport};
use dyndepth_core::model::{forced_exit_forward, model_forward, DropPolicy, ModelParams};
use dyndepth_core::rng::{derive_seed, stream_from_seed};
use dyndepth_core::Tape;

use crate::checkpoint::{checkpoint_load, Checkpoint};

/// A user-requestable evaluation point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalPolicy {
    Full,
    TopK(usize),
    /// Input-driven top-k written as a dropped-layer count: k = N − n.
    DropN(usize),
    GateThreshold(f64),
    RdExact(usize),
    EeEntropy(f64),
    /// Early-exit model forced to read the head at a fixed exit.
    EeForced(usize),
}

impl EvalPolicy {
    /// Stable descriptor for the report's `policy` column; thresholds ride
    /// along because the schema has no dedicated column for them.
    pub fn describe(&self) -> String {
        match self {
            EvalPolicy::Full => "full".into(),
            EvalPolicy::TopK(k) => format!("topk({})", k),
            EvalPolicy::DropN(n) => format!("topk_drop_n({})", n),
            EvalPolicy::GateThreshold(g) => format!("gate_threshold({})", g),
            EvalPolicy::RdExact(n) => format!("rd_exact({})", n),
            EvalPolicy::EeEntropy(t) => format!("ee_entropy({})", t),
            EvalPolicy::EeForced(j) => format!("ee_forced({})", j),
        }
    }

    /// Dropped-layer count when the policy pins one.
    pub fn n_dropped(&self, n_layers: usize) -> Option<usize> {
        match self {
            EvalPolicy::Full => Some(0),
            EvalPolicy::TopK(k) => Some(n_layers - k.min(&n_layers)),
            EvalPolicy::DropN(n) => Some(*n),
            EvalPolicy::RdExact(n) => Some(*n),
            EvalPolicy::EeForced(j) => Some(n_layers - j.min(&n_layers)),
            EvalPolicy::GateThreshold(_) | EvalPolicy::EeEntropy(_) => None,
        }
    }

    fn stream_id(&self) -> u64 {
        match self {
            EvalPolicy::Full => 0,
            EvalPolicy::TopK(_) => 1,
            EvalPolicy::DropN(_) => 2,
            EvalPolicy::GateThreshold(_) => 3,
            EvalPolicy::RdExact(_) => 4,
            EvalPolicy::EeEntropy(_) => 5,
            EvalPolicy::EeForced(_) => 6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub metric_name: String,
    pub metric_value: f64,
    pub exec_layers_mean: f64,
    pub k_mean: f64,
    pub macs_mean: u64,
    pub n_samples: usize,
    /// Per-sample executed-layer counts, in dataset order.
    pub per_sample_executed: Vec<usize>,
}

/// Evaluate one parameter set over a dataset under one policy point.
/// Random policies derive one stream per sample from (seed, policy, index).
pub fn evaluate(
    params: &ModelParams,
    samples: &[Sample],
    policy: &EvalPolicy,
    seed: u64,
) -> Result<EvalResult> {
    if samples.is_empty() {
        bail!("evaluation dataset is empty");
    }
    let config = &params.config;
    let n_layers = config.n_layers;

    let mut edit_total = 0usize;
    let mut ref_total = 0usize;
    let mut hits = 0usize;
    let mut exec_sum = 0usize;
    let mut macs_sum: u128 = 0;
    let mut per_sample_executed = Vec::with_capacity(samples.len());

    for (idx, sample) in samples.iter().enumerate() {
        let mut rng = stream_from_seed(derive_seed(seed, 100 + policy.stream_id(), idx as u64));
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let (logits, trace) = match policy {
            EvalPolicy::Full => {
                model_forward(&mut tape, &sample.features, DropPolicy::Full, &vars, config, &mut rng)?
            }
            EvalPolicy::TopK(k) => model_forward(
                &mut tape,
                &sample.features,
                DropPolicy::InputDrivenTopK(*k),
                &vars,
                config,
                &mut rng,
            )?,
            EvalPolicy::DropN(n) => {
                if *n >= n_layers {
                    bail!("drop-n {} leaves no layers (model has {})", n, n_layers);
                }
                model_forward(
                    &mut tape,
                    &sample.features,
                    DropPolicy::InputDrivenTopK(n_layers - n),
                    &vars,
                    config,
                    &mut rng,
                )?
            }
            EvalPolicy::GateThreshold(gamma) => model_forward(
                &mut tape,
                &sample.features,
                DropPolicy::InputDrivenThreshold(*gamma),
                &vars,
                config,
                &mut rng,
            )?,
            EvalPolicy::RdExact(n) => model_forward(
                &mut tape,
                &sample.features,
                DropPolicy::RandomExactN(*n),
                &vars,
                config,
                &mut rng,
            )?,
            EvalPolicy::EeEntropy(tau) => model_forward(
                &mut tape,
                &sample.features,
                DropPolicy::EarlyExitEntropy(*tau),
                &vars,
                config,
                &mut rng,
            )?,
            EvalPolicy::EeForced(j) => {
                forced_exit_forward(&mut tape, &sample.features, *j, &vars, config)?
            }
        };

        match &sample.target {
            Target::Labels(reference) => {
                let lp = tape.row_log_softmax(logits);
                let hyp = ctc_greedy_decode(tape.value(lp), trace.seq_len);
                edit_total += levenshtein(reference, &hyp);
                ref_total += reference.len();
            }
            Target::Class(class) => {
                let row = tape.value(logits);
                let mut best = 0;
                for (c, &v) in row.data.iter().enumerate() {
                    if v > row.data[best] {
                        best = c;
                    }
                }
                hits += usize::from(best == *class);
            }
        }
        exec_sum += trace.executed_layers;
        macs_sum += metrics::macs_for_trace(&trace, config).total() as u128;
        per_sample_executed.push(trace.executed_layers);
    }

    let n = samples.len();
    let (metric_name, metric_value) = if config.task.is_ctc() {
        if ref_total == 0 {
            bail!("corpus WER undefined: no reference tokens");
        }
        ("wer".to_string(), edit_total as f64 / ref_total as f64)
    } else {
        ("accuracy".to_string(), hits as f64 / n as f64)
    };

    Ok(EvalResult {
        metric_name,
        metric_value,
        exec_layers_mean: exec_sum as f64 / n as f64,
        k_mean: exec_sum as f64 / n as f64,
        macs_mean: (macs_sum / n as u128) as u64,
        n_samples: n,
        per_sample_executed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Dev,
    Test,
}

pub struct LoadedModel {
    pub checkpoint: Checkpoint,
    pub params: ModelParams,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let checkpoint =
        checkpoint_load(path).with_context(|| format!("loading {}", path.display()))?;
    let params = ModelParams::from_set(&checkpoint.config.model, checkpoint.params.clone())?;
    Ok(LoadedModel { checkpoint, params })
}

fn split_samples(model: &LoadedModel, split: EvalSplit) -> Result<Vec<Sample>> {
    let splits = model.checkpoint.config.load_splits()?;
    Ok(match split {
        EvalSplit::Dev => splits.dev,
        EvalSplit::Test => splits.test,
    })
}

/// One evaluation row for one checkpoint.
pub fn cmd_eval(
    ckpt_path: &Path,
    policy: &EvalPolicy,
    split: EvalSplit,
    seed: u64,
) -> Result<RunReport> {
    let model = load_model(ckpt_path)?;
    let samples = split_samples(&model, split)?;
    let result = evaluate(&model.params, &samples, policy, seed)?;
    Ok(RunReport {
        policy: policy.describe(),
        n_dropped: policy.n_dropped(model.params.config.n_layers),
        k_mean: result.k_mean,
        metric_name: result.metric_name,
        metric_value: result.metric_value,
        metric_std: 0.0,
        exec_layers_mean: result.exec_layers_mean,
        macs_per_sample: result.macs_mean,
        seed,
        config_hash: model.checkpoint.config_hash.clone(),
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn aggregate_row(
    policy_name: String,
    n_dropped: Option<usize>,
    per_run: &[EvalResult],
    seed: u64,
    config_hash: &str,
) -> RunReport {
    let metrics_list: Vec<f64> = per_run.iter().map(|r| r.metric_value).collect();
    let (metric_mean, metric_std) = mean_std(&metrics_list);
    let exec_mean =
        per_run.iter().map(|r| r.exec_layers_mean).sum::<f64>() / per_run.len() as f64;
    let k_mean = per_run.iter().map(|r| r.k_mean).sum::<f64>() / per_run.len() as f64;
    let macs = (per_run.iter().map(|r| r.macs_mean as u128).sum::<u128>()
        / per_run.len() as u128) as u64;
    RunReport {
        policy: policy_name,
        n_dropped,
        k_mean,
        metric_name: per_run[0].metric_name.clone(),
        metric_value: metric_mean,
        metric_std,
        exec_layers_mean: exec_mean,
        macs_per_sample: macs,
        seed,
        config_hash: config_hash.to_string(),
    }
}

/// n-sweep: rows per dropped-layer count, with a random-dropping column
/// (averaged over `rd_draws` mask draws), the input-driven top-k column
/// (k = N − n), and — on early-exit checkpoints — a forced-exit column.
/// When several checkpoints are given (model seeds), rows carry mean ± std
/// across them.
pub fn cmd_sweep(
    ckpt_paths: &[&Path],
    n_list: &[usize],
    rd_draws: usize,
    split: EvalSplit,
    seed: u64,
) -> Result<Vec<RunReport>> {
    if ckpt_paths.is_empty() {
        bail!("sweep needs at least one checkpoint");
    }
    if rd_draws == 0 {
        bail!("sweep needs rd_draws >= 1");
    }
    let models: Vec<LoadedModel> = ckpt_paths.iter().map(|p| load_model(p)).collect::<Result<_>>()?;
    let hash = models[0].checkpoint.config_hash.clone();
    for m in &models {
        if m.checkpoint.config.model != models[0].checkpoint.config.model {
            bail!("sweep checkpoints disagree on the model architecture");
        }
    }
    let n_layers = models[0].params.config.n_layers;
    for &n in n_list {
        if n >= n_layers {
            bail!("n {} leaves no layers to run (model has {})", n, n_layers);
        }
    }
    let datasets: Vec<Vec<Sample>> =
        models.iter().map(|m| split_samples(m, split)).collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for &n in n_list {
        let k = n_layers - n;

        // random dropping, rd_draws mask draws per checkpoint
        let mut rd_runs = Vec::new();
        for (m, ds) in models.iter().zip(&datasets) {
            for draw in 0..rd_draws {
                let draw_seed = derive_seed(seed, 7, draw as u64);
                rd_runs.push(evaluate(&m.params, ds, &EvalPolicy::RdExact(n), draw_seed)?);
            }
        }
        rows.push(aggregate_row(
            EvalPolicy::RdExact(n).describe(),
            Some(n),
            &rd_runs,
            seed,
            &hash,
        ));

        // input-driven top-k
        let mut idld_runs = Vec::new();
        for (m, ds) in models.iter().zip(&datasets) {
            idld_runs.push(evaluate(&m.params, ds, &EvalPolicy::TopK(k), seed)?);
        }
        rows.push(aggregate_row(
            EvalPolicy::TopK(k).describe(),
            Some(n),
            &idld_runs,
            seed,
            &hash,
        ));

        // forced early exit, only for checkpoints that carry aux heads
        if models[0].params.config.ee_enabled {
            let mut ee_runs = Vec::new();
            for (m, ds) in models.iter().zip(&datasets) {
                ee_runs.push(evaluate(&m.params, ds, &EvalPolicy::EeForced(k), seed)?);
            }
            rows.push(aggregate_row(
                EvalPolicy::EeForced(k).describe(),
                Some(n),
                &ee_runs,
                seed,
                &hash,
            ));
        }
    }
    Ok(rows)
}

/// Threshold sweep: one row per gate threshold (input-driven) or entropy
/// threshold (early exit), in list order.
pub fn cmd_threshold_sweep(
    ckpt_path: &Path,
    gammas: &[f64],
    taus: &[f64],
    split: EvalSplit,
    seed: u64,
) -> Result<Vec<RunReport>> {
    if gammas.is_empty() && taus.is_empty() {
        bail!("threshold sweep needs --gamma-list or --tau-list");
    }
    let model = load_model(ckpt_path)?;
    let samples = split_samples(&model, split)?;
    let mut rows = Vec::new();
    for &gamma in gammas {
        let policy = EvalPolicy::GateThreshold(gamma);
        let result = evaluate(&model.params, &samples, &policy, seed)?;
        rows.push(RunReport {
            policy: policy.describe(),
            n_dropped: None,
            k_mean: result.k_mean,
            metric_name: result.metric_name.clone(),
            metric_value: result.metric_value,
            metric_std: 0.0,
            exec_layers_mean: result.exec_layers_mean,
            macs_per_sample: result.macs_mean,
            seed,
            config_hash: model.checkpoint.config_hash.clone(),
        });
    }
    for &tau in taus {
        let policy = EvalPolicy::EeEntropy(tau);
        let result = evaluate(&model.params, &samples, &policy, seed)?;
        rows.push(RunReport {
            policy: policy.describe(),
            n_dropped: None,
            k_mean: result.k_mean,
            metric_name: result.metric_name.clone(),
            metric_value: result.metric_value,
            metric_std: 0.0,
            exec_layers_mean: result.exec_layers_mean,
            macs_per_sample: result.macs_mean,
            seed,
            config_hash: model.checkpoint.config_hash.clone(),
        });
    }
    Ok(rows)
}
