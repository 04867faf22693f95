//! The layer-selector network and every way of turning soft per-layer scores
//! into a binary execution mask: learned top-k and threshold binarization,
//! the uniform k sampler, and the random-dropping baselines.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::rng::Stream;

/// Soft per-layer gate scores, one real per encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GateScores {
    pub values: Vec<f64>,
}

impl GateScores {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Contract("gate scores must be finite".into()));
        }
        Ok(GateScores { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Which policy produced a mask; kept on the mask so downstream reporting
/// can label rows without re-threading policy state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskOrigin {
    Full,
    TopK { k: usize },
    Threshold { gamma: f64 },
    Bernoulli { p_drop: f64 },
    ExactDrop { n_dropped: usize },
    /// Prefix mask recording an early-exit run.
    EarlyExit { exit: usize },
}

/// Binary per-layer execution mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMask {
    pub bits: Vec<bool>,
    pub origin: MaskOrigin,
}

impl GateMask {
    pub fn full(n: usize) -> Self {
        GateMask {
            bits: vec![true; n],
            origin: MaskOrigin::Full,
        }
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Indices of the k largest scores, ties broken by lower index first.
fn topk_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("gate scores must not be NaN")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// {0,1} mask keeping the k largest scores (lower index wins ties).
pub fn topk_mask(scores: &[f64], k: usize) -> Vec<bool> {
    let mut bits = vec![false; scores.len()];
    for idx in topk_indices(scores, k) {
        bits[idx] = true;
    }
    bits
}

/// `score > gamma` mask. A fully-dropped encoder is degenerate, so when no
/// score clears the threshold the single argmax layer is forced on.
pub fn threshold_mask(scores: &[f64], gamma: f64) -> Vec<bool> {
    let mut bits: Vec<bool> = scores.iter().map(|&s| s > gamma).collect();
    if !bits.iter().any(|&b| b) && !scores.is_empty() {
        let argmax = topk_indices(scores, 1)[0];
        bits[argmax] = true;
    }
    bits
}

/// Selector-network parameters bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct SelectorVars {
    pub ln_gain: Var,
    pub ln_bias: Var,
    /// C×d_model×w convolution kernel, w odd.
    pub conv_kernel: Var,
    pub conv_bias: Var,
    /// (C·P)×N projection after pooling to P rows.
    pub proj_w: Var,
    pub proj_b: Var,
    pub pooled_len: usize,
}

/// The selector pipeline: layer-norm the features, 1-D convolution with GELU,
/// adaptive-average-pool to a fixed number of rows, flatten, linear project to
/// one score per encoder layer. Output length is independent of the input
/// length and the whole pipeline is differentiable.
pub fn selector_forward(tape: &mut Tape, x: Var, params: &SelectorVars, eps: f64) -> Result<Var> {
    let normed = tape.layer_norm(x, params.ln_gain, params.ln_bias, eps)?;
    let conv = tape.conv1d_same(normed, params.conv_kernel, params.conv_bias)?;
    let act = tape.gelu(conv);
    let pooled = tape.adaptive_avg_pool1d(act, params.pooled_len)?;
    let channels = tape.value(pooled).shape[1];
    let flat = tape.reshape(pooled, vec![1, params.pooled_len * channels])?;
    let projected = tape.matmul(flat, params.proj_w)?;
    let scored = tape.add_row(projected, params.proj_b)?;
    let n = tape.value(scored).numel();
    tape.reshape(scored, vec![n])
}

/// Differentiable top-k binarization (straight-through backward).
pub fn topk_binarize(tape: &mut Tape, scores: Var, k: usize) -> Result<(Var, GateMask)> {
    let mask_var = tape.topk_gates(scores, k)?;
    let bits: Vec<bool> = tape.value(mask_var).data.iter().map(|&v| v == 1.0).collect();
    Ok((
        mask_var,
        GateMask {
            bits,
            origin: MaskOrigin::TopK { k },
        },
    ))
}

/// Differentiable threshold binarization with the argmax fallback.
pub fn threshold_binarize(tape: &mut Tape, scores: Var, gamma: f64) -> Result<(Var, GateMask)> {
    let mask_var = tape.threshold_gates(scores, gamma)?;
    let bits: Vec<bool> = tape.value(mask_var).data.iter().map(|&v| v == 1.0).collect();
    Ok((
        mask_var,
        GateMask {
            bits,
            origin: MaskOrigin::Threshold { gamma },
        },
    ))
}

/// Value-level top-k binarization for evaluation paths.
pub fn topk_binarize_scores(scores: &GateScores, k: usize) -> Result<GateMask> {
    if k == 0 || k > scores.len() {
        return Err(CoreError::Contract(format!(
            "topk_binarize: k {} out of 1..={}",
            k,
            scores.len()
        )));
    }
    Ok(GateMask {
        bits: topk_mask(&scores.values, k),
        origin: MaskOrigin::TopK { k },
    })
}

/// Value-level threshold binarization for evaluation paths.
pub fn threshold_binarize_scores(scores: &GateScores, gamma: f64) -> GateMask {
    GateMask {
        bits: threshold_mask(&scores.values, gamma),
        origin: MaskOrigin::Threshold { gamma },
    }
}

/// Draw k uniformly from {1, …, n} inclusive.
pub fn sample_k(n: usize, rng: &mut Stream) -> usize {
    assert!(n >= 1, "sample_k needs at least one layer");
    rng.gen_range(1..=n)
}

/// Random-dropping training mask: each layer independently dropped with
/// probability `p_drop`. An all-dropped draw forces one uniformly random
/// layer back on so the encoder never degenerates to zero layers.
pub fn random_gates_bernoulli(n: usize, p_drop: f64, rng: &mut Stream) -> Result<GateMask> {
    if !(0.0..=1.0).contains(&p_drop) {
        return Err(CoreError::Contract(format!(
            "random_gates_bernoulli: p_drop {} outside [0,1]",
            p_drop
        )));
    }
    let mut bits: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() >= p_drop).collect();
    if !bits.iter().any(|&b| b) && n > 0 {
        bits[rng.gen_range(0..n)] = true;
    }
    Ok(GateMask {
        bits,
        origin: MaskOrigin::Bernoulli { p_drop },
    })
}

/// Random-dropping evaluation mask: a uniformly random subset of exactly
/// `n - n_dropped` layers is enabled.
pub fn random_gates_exact(n: usize, n_dropped: usize, rng: &mut Stream) -> Result<GateMask> {
    if n_dropped >= n {
        return Err(CoreError::Contract(format!(
            "random_gates_exact: must keep at least one of {} layers, asked to drop {}",
            n, n_dropped
        )));
    }
    // Partial Fisher-Yates: the first (n - n_dropped) slots pick the subset.
    let keep = n - n_dropped;
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..keep {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    let mut bits = vec![false; n];
    for &i in &idx[..keep] {
        bits[i] = true;
    }
    Ok(GateMask {
        bits,
        origin: MaskOrigin::ExactDrop { n_dropped },
    })
}
