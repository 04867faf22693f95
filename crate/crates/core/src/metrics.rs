//! Evaluation metrics and analytic compute accounting.
//!
//! MACs (multiply-accumulates, 1 MAC = 2 FLOPs) are the canonical compute
//! unit. Softmax, layer-norm and pooling costs are excluded everywhere; the
//! counted terms are spelled out on [`macs_per_layer`] and [`macs_for_trace`].

use crate::error::{CoreError, Result};
use crate::model::{ForwardTrace, ModelConfig, TaskKind};
use crate::tensor::Tensor;

/// Unit-cost Levenshtein distance between token sequences.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ta) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, tb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ta != tb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by reference length. The reference must be
/// non-empty; the rate can exceed 1.
pub fn word_error_rate<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(CoreError::Contract(
            "word_error_rate: empty reference has no denominator".into(),
        ));
    }
    Ok(levenshtein(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], targets: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(CoreError::Contract(format!(
            "accuracy: {} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let hits = predictions.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Mean over the first `valid_len` rows of −Σ p·ln p (natural log,
/// 0·ln 0 := 0). Rows must sum to 1 within 1e-6.
pub fn avg_entropy(prob_rows: &Tensor, valid_len: usize) -> Result<f64> {
    let (t, _) = prob_rows.rows_cols();
    if valid_len == 0 || valid_len > t {
        return Err(CoreError::Contract(format!(
            "avg_entropy: valid_len {} out of 1..={}",
            valid_len, t
        )));
    }
    let mut total = 0.0;
    for r in 0..valid_len {
        let row = prob_rows.row(r);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(CoreError::Contract(format!(
                "avg_entropy: row {} sums to {}, expected 1",
                r, sum
            )));
        }
        let h: f64 = row
            .iter()
            .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
            .sum();
        total += h;
    }
    Ok(total / valid_len as f64)
}

/// Multiply-accumulates of one executed encoder layer at sequence length
/// `t`: 4·T·d² (Q, K, V, O projections) + 2·T²·d (attention scores and the
/// weighted value sum) + 2·T·d·d_ff (the two FFN linears).
pub fn macs_per_layer(t: usize, d_model: usize, d_ff: usize) -> u64 {
    let (t, d, f) = (t as u64, d_model as u64, d_ff as u64);
    4 * t * d * d + 2 * t * t * d + 2 * t * d * f
}

/// Per-component MAC totals for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacsBreakdown {
    /// Input projection: T·d_in·d_model.
    pub frontend: u64,
    /// popcount(mask) · [`macs_per_layer`].
    pub layers: u64,
    /// Output head(s): T·d_model·V per CTC head, d_model·V per
    /// classification head; early exit at j pays for heads 1..=j.
    pub heads: u64,
    /// Selector, counted only for input-driven policies: the convolution
    /// (T·w·d_model·C) plus the score projection (C·P·N).
    pub selector: u64,
}

impl MacsBreakdown {
    pub fn total(&self) -> u64 {
        self.frontend + self.layers + self.heads + self.selector
    }
}

/// Analytic MAC accounting for one trace.
pub fn macs_for_trace(trace: &ForwardTrace, config: &ModelConfig) -> MacsBreakdown {
    let t = trace.seq_len as u64;
    let d = config.d_model as u64;
    let frontend = t * config.d_in as u64 * d;
    let layers = trace.executed_layers as u64 * macs_per_layer(trace.seq_len, config.d_model, config.d_ff);
    let head_once = match config.task {
        TaskKind::Ctc { vocab_size } => t * d * vocab_size as u64,
        TaskKind::Classification { num_classes } => d * num_classes as u64,
    };
    let heads = match trace.exit_index {
        Some(j) => head_once * j as u64,
        None => head_once,
    };
    let selector = if trace.selector_used {
        let sel = &config.selector;
        t * sel.kernel_width as u64 * d * sel.channels as u64
            + (sel.channels * sel.pooled_len) as u64 * config.n_layers as u64
    } else {
        0
    };
    MacsBreakdown { frontend, layers, heads, selector }
}

/// One evaluation row: a policy evaluated on a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub policy: String,
    /// Dropped-layer count when the policy fixes one.
    pub n_dropped: Option<usize>,
    pub k_mean: f64,
    pub metric_name: String,
    pub metric_value: f64,
    pub metric_std: f64,
    pub exec_layers_mean: f64,
    pub macs_per_sample: u64,
    pub seed: u64,
    pub config_hash: String,
}

/// Build a single-trace report row; sweep aggregation happens in the harness.
pub fn report_row(
    trace: &ForwardTrace,
    metric_name: &str,
    metric_value: f64,
    config: &ModelConfig,
    policy: String,
    seed: u64,
    config_hash: String,
) -> RunReport {
    let macs = macs_for_trace(trace, config);
    RunReport {
        policy,
        n_dropped: Some(config.n_layers - trace.executed_layers),
        k_mean: trace.executed_layers as f64,
        metric_name: metric_name.to_string(),
        metric_value,
        metric_std: 0.0,
        exec_layers_mean: trace.executed_layers as f64,
        macs_per_sample: macs.total(),
        seed,
        config_hash,
    }
}
