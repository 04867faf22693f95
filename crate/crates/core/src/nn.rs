//! Neural building blocks for the encoder and the layer selector:
//! multi-head attention, the feed-forward network, the static encoder layer,
//! and SpecAug-style feature masking. Layer norm, GELU, 1-D convolution and
//! adaptive pooling are tape primitives (see [`crate::autograd::Tape`]);
//! this module composes them.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Multi-head attention projections bound to a tape. Projections are square
/// d_model×d_model and bias-free.
#[derive(Debug, Clone, Copy)]
pub struct MhaVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub num_heads: usize,
}

/// Scaled dot-product multi-head self-attention, pre-residual. Key/value
/// positions at or beyond `valid_len` are masked out of every query's
/// softmax, so outputs for valid positions never depend on padding rows.
pub fn multi_head_attention(tape: &mut Tape, x: Var, params: &MhaVars, valid_len: usize) -> Result<Var> {
    let (t, d) = tape.value(x).dims2("multi_head_attention")?;
    if d % params.num_heads != 0 {
        return Err(CoreError::Config(format!(
            "multi_head_attention: d_model {} not divisible by {} heads",
            d, params.num_heads
        )));
    }
    if valid_len == 0 || valid_len > t {
        return Err(CoreError::Contract(format!(
            "multi_head_attention: valid_len {} out of 1..={}",
            valid_len, t
        )));
    }
    let dh = d / params.num_heads;
    let q = tape.matmul(x, params.wq)?;
    let k = tape.matmul(x, params.wk)?;
    let v = tape.matmul(x, params.wv)?;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut head_outputs = Vec::with_capacity(params.num_heads);
    for h in 0..params.num_heads {
        let qh = tape.take_cols(q, h * dh, dh)?;
        let kh = tape.take_cols(k, h * dh, dh)?;
        let vh = tape.take_cols(v, h * dh, dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scaled = tape.scale(scores, scale);
        let weights = tape.row_softmax_masked(scaled, valid_len)?;
        head_outputs.push(tape.matmul(weights, vh)?);
    }
    let concat = tape.concat_cols(&head_outputs)?;
    tape.matmul(concat, params.wo)
}

/// Position-wise feed-forward weights bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// linear → GELU → linear, pre-residual.
pub fn ffn(tape: &mut Tape, x: Var, params: &FfnVars) -> Result<Var> {
    let h = tape.matmul(x, params.w1)?;
    let h = tape.add_row(h, params.b1)?;
    let h = tape.gelu(h);
    let out = tape.matmul(h, params.w2)?;
    tape.add_row(out, params.b2)
}

/// One encoder layer's parameters: pre-sublayer norms, attention, FFN.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayerVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub mha: MhaVars,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub ffn: FfnVars,
}

/// The static (always-executed) encoder layer: each sublayer is
/// norm → transform, added onto the untouched residual path.
pub fn static_layer_forward(
    tape: &mut Tape,
    y_prev: Var,
    layer: &EncoderLayerVars,
    valid_len: usize,
) -> Result<Var> {
    let normed = tape.layer_norm(y_prev, layer.ln1_gain, layer.ln1_bias, LAYER_NORM_EPS)?;
    let attn = multi_head_attention(tape, normed, &layer.mha, valid_len)?;
    let mid = tape.add(y_prev, attn)?;
    let normed2 = tape.layer_norm(mid, layer.ln2_gain, layer.ln2_bias, LAYER_NORM_EPS)?;
    let ff = ffn(tape, normed2, &layer.ffn)?;
    tape.add(mid, ff)
}

/// Zero one contiguous time span and one contiguous feature span, each of
/// uniformly random width up to the given maxima.
///
/// Draw order from `rng`, in this exact sequence: time width from
/// `0..=max_time_mask` (skipped when the max is 0), then time start from
/// `0..=T-width` (skipped when the width is 0); then the same two draws for
/// the feature axis.
pub fn spec_mask(x: &Tensor, max_time_mask: usize, max_feat_mask: usize, rng: &mut Stream) -> Result<Tensor> {
    let (t, d) = x.dims2("spec_mask")?;
    if max_time_mask >= t || max_feat_mask >= d {
        return Err(CoreError::Contract(format!(
            "spec_mask: mask widths ({}, {}) must be below dims ({}, {})",
            max_time_mask, max_feat_mask, t, d
        )));
    }
    let mut out = x.clone();
    if max_time_mask > 0 {
        let width = rng.gen_range(0..=max_time_mask);
        if width > 0 {
            let start = rng.gen_range(0..=t - width);
            for r in start..start + width {
                for c in 0..d {
                    out.data[r * d + c] = 0.0;
                }
            }
        }
    }
    if max_feat_mask > 0 {
        let width = rng.gen_range(0..=max_feat_mask);
        if width > 0 {
            let start = rng.gen_range(0..=d - width);
            for r in 0..t {
                for c in start..start + width {
                    out.data[r * d + c] = 0.0;
                }
            }
        }
    }
    Ok(out)
}
