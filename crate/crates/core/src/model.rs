//! The dynamic-depth transformer: a linear+positional frontend feeding both
//! the gated encoder stack and the layer selector, policy-driven forward
//! passes, and the entropy-based early-exit variant.
//!
//! Per layer j the gate bit multiplies both sublayer branches while the
//! residual path stays untouched:
//!
//! ```text
//! ŷ = y + g_j · MHA(LN1(y));   y' = ŷ + g_j · FFN(LN2(ŷ))
//! ```
//!
//! A zero bit short-circuits the layer entirely, so skipped layers cost no
//! compute and their parameters receive exactly zero gradient. Heads emit
//! pre-softmax logits; losses and entropy metrics apply the softmax.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::gating::{self, GateMask, MaskOrigin, SelectorVars};
use crate::metrics;
use crate::nn::{self, EncoderLayerVars, FfnVars, MhaVars, LAYER_NORM_EPS};
use crate::optim::{ParamId, ParamSet};
use crate::rng::{normal, stream_from_seed, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskKind {
    /// Per-frame vocabulary logits; index 0 is the CTC blank.
    Ctc { vocab_size: usize },
    /// One class distribution per utterance, mean-pooled over valid frames.
    Classification { num_classes: usize },
}

impl TaskKind {
    pub fn output_size(&self) -> usize {
        match *self {
            TaskKind::Ctc { vocab_size } => vocab_size,
            TaskKind::Classification { num_classes } => num_classes,
        }
    }

    pub fn is_ctc(&self) -> bool {
        matches!(self, TaskKind::Ctc { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectorConfig {
    pub channels: usize,
    pub kernel_width: usize,
    pub pooled_len: usize,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig { channels: 32, kernel_width: 3, pooled_len: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub d_in: usize,
    pub max_seq_len: usize,
    pub task: TaskKind,
    #[serde(default)]
    pub selector: SelectorConfig,
    #[serde(default)]
    pub ee_enabled: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(CoreError::Config("model: n_layers must be >= 1".into()));
        }
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(CoreError::Config(format!(
                "model: d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.d_ff == 0 || self.d_in == 0 || self.max_seq_len == 0 {
            return Err(CoreError::Config("model: d_ff, d_in, max_seq_len must be >= 1".into()));
        }
        match self.task {
            TaskKind::Ctc { vocab_size } if vocab_size < 2 => {
                return Err(CoreError::Config(
                    "model: ctc vocab_size must be >= 2 (blank plus at least one label)".into(),
                ));
            }
            TaskKind::Classification { num_classes } if num_classes < 2 => {
                return Err(CoreError::Config("model: num_classes must be >= 2".into()));
            }
            _ => {}
        }
        if self.selector.kernel_width % 2 == 0 || self.selector.kernel_width == 0 {
            return Err(CoreError::Config(format!(
                "model: selector kernel_width must be odd, got {}",
                self.selector.kernel_width
            )));
        }
        if self.selector.channels == 0 || self.selector.pooled_len == 0 {
            return Err(CoreError::Config(
                "model: selector channels and pooled_len must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Number of output heads the parameter set carries: one shared head,
    /// or one per layer when early exit is enabled (the layer-N head then
    /// doubles as the final head).
    pub fn head_count(&self) -> usize {
        if self.ee_enabled {
            self.n_layers
        } else {
            1
        }
    }
}

// ── parameters ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct HeadIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerIds {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct SelectorIds {
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub conv_kernel: ParamId,
    pub conv_bias: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct ModelIds {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub pos: ParamId,
    pub layers: Vec<LayerIds>,
    pub selector: SelectorIds,
    pub heads: Vec<HeadIds>,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub set: ParamSet,
    pub ids: ModelIds,
}

#[derive(Debug, Clone, Copy)]
enum InitKind {
    /// Scaled normal with 1/sqrt(fan_in).
    Normal { fan_in: usize },
    /// Scaled normal with an extra multiplier (positional table).
    SmallNormal { scale: f64 },
    Zeros,
    Ones,
}

fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, InitKind)> {
    let d = config.d_model;
    let v = config.task.output_size();
    let sel = &config.selector;
    let mut out: Vec<(String, Vec<usize>, InitKind)> = vec![
        ("frontend.w_in".into(), vec![config.d_in, d], InitKind::Normal { fan_in: config.d_in }),
        ("frontend.b_in".into(), vec![d], InitKind::Zeros),
        ("frontend.pos".into(), vec![config.max_seq_len, d], InitKind::SmallNormal { scale: 0.02 }),
    ];
    for j in 0..config.n_layers {
        let p = |suffix: &str| format!("layer{:02}.{}", j, suffix);
        out.push((p("ln1.gain"), vec![d], InitKind::Ones));
        out.push((p("ln1.bias"), vec![d], InitKind::Zeros));
        for name in ["mha.wq", "mha.wk", "mha.wv", "mha.wo"] {
            out.push((p(name), vec![d, d], InitKind::Normal { fan_in: d }));
        }
        out.push((p("ln2.gain"), vec![d], InitKind::Ones));
        out.push((p("ln2.bias"), vec![d], InitKind::Zeros));
        out.push((p("ffn.w1"), vec![d, config.d_ff], InitKind::Normal { fan_in: d }));
        out.push((p("ffn.b1"), vec![config.d_ff], InitKind::Zeros));
        out.push((p("ffn.w2"), vec![config.d_ff, d], InitKind::Normal { fan_in: config.d_ff }));
        out.push((p("ffn.b2"), vec![d], InitKind::Zeros));
    }
    out.push(("selector.ln.gain".into(), vec![d], InitKind::Ones));
    out.push(("selector.ln.bias".into(), vec![d], InitKind::Zeros));
    out.push((
        "selector.conv.kernel".into(),
        vec![sel.channels, d, sel.kernel_width],
        InitKind::Normal { fan_in: d * sel.kernel_width },
    ));
    out.push(("selector.conv.bias".into(), vec![sel.channels], InitKind::Zeros));
    out.push((
        "selector.proj.w".into(),
        vec![sel.channels * sel.pooled_len, config.n_layers],
        InitKind::Normal { fan_in: sel.channels * sel.pooled_len },
    ));
    out.push(("selector.proj.b".into(), vec![config.n_layers], InitKind::Zeros));
    for h in 0..config.head_count() {
        out.push((format!("head{:02}.w", h), vec![d, v], InitKind::Normal { fan_in: d }));
        out.push((format!("head{:02}.b", h), vec![v], InitKind::Zeros));
    }
    out
}

fn ids_from_layout(config: &ModelConfig) -> ModelIds {
    let mut next = 0usize;
    let mut take = || {
        let id = ParamId(next);
        next += 1;
        id
    };
    let w_in = take();
    let b_in = take();
    let pos = take();
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerIds {
            ln1_gain: take(),
            ln1_bias: take(),
            wq: take(),
            wk: take(),
            wv: take(),
            wo: take(),
            ln2_gain: take(),
            ln2_bias: take(),
            w1: take(),
            b1: take(),
            w2: take(),
            b2: take(),
        });
    }
    let selector = SelectorIds {
        ln_gain: take(),
        ln_bias: take(),
        conv_kernel: take(),
        conv_bias: take(),
        proj_w: take(),
        proj_b: take(),
    };
    let mut heads = Vec::with_capacity(config.head_count());
    for _ in 0..config.head_count() {
        heads.push(HeadIds { w: take(), b: take() });
    }
    ModelIds { w_in, b_in, pos, layers, selector, heads }
}

impl ModelParams {
    /// Fresh parameters; each tensor is drawn from one seeded stream in
    /// registration order, so a (config, seed) pair pins initialization.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
        config.validate()?;
        let mut rng = stream_from_seed(seed);
        let mut set = ParamSet::new();
        for (name, shape, kind) in layout(config) {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = match kind {
                InitKind::Normal { fan_in } => {
                    let scale = 1.0 / (fan_in as f64).sqrt();
                    (0..numel).map(|_| normal(&mut rng) * scale).collect()
                }
                InitKind::SmallNormal { scale } => {
                    (0..numel).map(|_| normal(&mut rng) * scale).collect()
                }
                InitKind::Zeros => vec![0.0; numel],
                InitKind::Ones => vec![1.0; numel],
            };
            set.push(name, Tensor::new(shape, data)?);
        }
        Ok(ModelParams { config: config.clone(), set, ids: ids_from_layout(config) })
    }

    /// Rebuild from a restored parameter set, validating that names and
    /// shapes match the layout implied by `config`.
    pub fn from_set(config: &ModelConfig, set: ParamSet) -> Result<ModelParams> {
        config.validate()?;
        let expected = layout(config);
        if expected.len() != set.len() {
            return Err(CoreError::Config(format!(
                "parameter set has {} entries, config implies {}",
                set.len(),
                expected.len()
            )));
        }
        for (i, (name, shape, _)) in expected.iter().enumerate() {
            let got = set.get(ParamId(i));
            if set.name(ParamId(i)) != name || &got.shape != shape {
                return Err(CoreError::Config(format!(
                    "parameter {} mismatch: expected `{}` {:?}, found `{}` {:?}",
                    i,
                    name,
                    shape,
                    set.name(ParamId(i)),
                    got.shape
                )));
            }
        }
        Ok(ModelParams { config: config.clone(), set, ids: ids_from_layout(config) })
    }

    /// Bind every parameter onto a tape as leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        self.bind_each(tape, |tape, _, tensor| tape.leaf(tensor.clone(), trainable))
    }

    /// Bind with a caller-chosen leaf per parameter (index, tensor) — lets
    /// gradient checks substitute one parameter for an externally owned Var.
    pub fn bind_each<F>(&self, tape: &mut Tape, mut leaf: F) -> ModelVars
    where
        F: FnMut(&mut Tape, usize, &Tensor) -> Var,
    {
        let all: Vec<Var> = self
            .set
            .iter()
            .enumerate()
            .map(|(i, (_, t))| leaf(tape, i, t))
            .collect();
        let at = |id: ParamId| all[id.0];
        let layers = self
            .ids
            .layers
            .iter()
            .map(|l| EncoderLayerVars {
                ln1_gain: at(l.ln1_gain),
                ln1_bias: at(l.ln1_bias),
                mha: MhaVars {
                    wq: at(l.wq),
                    wk: at(l.wk),
                    wv: at(l.wv),
                    wo: at(l.wo),
                    num_heads: self.config.num_heads,
                },
                ln2_gain: at(l.ln2_gain),
                ln2_bias: at(l.ln2_bias),
                ffn: FfnVars { w1: at(l.w1), b1: at(l.b1), w2: at(l.w2), b2: at(l.b2) },
            })
            .collect();
        let selector = SelectorVars {
            ln_gain: at(self.ids.selector.ln_gain),
            ln_bias: at(self.ids.selector.ln_bias),
            conv_kernel: at(self.ids.selector.conv_kernel),
            conv_bias: at(self.ids.selector.conv_bias),
            proj_w: at(self.ids.selector.proj_w),
            proj_b: at(self.ids.selector.proj_b),
            pooled_len: self.config.selector.pooled_len,
        };
        let heads = self
            .ids
            .heads
            .iter()
            .map(|h| HeadVars { w: at(h.w), b: at(h.b) })
            .collect();
        ModelVars {
            w_in: at(self.ids.w_in),
            b_in: at(self.ids.b_in),
            pos: at(self.ids.pos),
            layers,
            selector,
            heads,
            all,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w: Var,
    pub b: Var,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub w_in: Var,
    pub b_in: Var,
    pub pos: Var,
    pub layers: Vec<EncoderLayerVars>,
    pub selector: SelectorVars,
    pub heads: Vec<HeadVars>,
    /// All leaves in parameter-set order, for gradient collection.
    pub all: Vec<Var>,
}

// ── policies and traces ─────────────────────────────────────────────

/// Which layers to run for a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DropPolicy {
    /// All layers (the static stack).
    Full,
    /// Selector scores, keep the k best layers.
    InputDrivenTopK(usize),
    /// Selector scores, keep layers scoring above the threshold.
    InputDrivenThreshold(f64),
    /// Drop each layer independently with the given probability.
    RandomBernoulli(f64),
    /// Drop a uniformly random subset of exactly n layers.
    RandomExactN(usize),
    /// Run layers in order, exit at the first head whose mean output
    /// entropy (nats) falls below the threshold.
    EarlyExitEntropy(f64),
}

/// What one forward pass executed.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub mask: GateMask,
    pub exit_index: Option<usize>,
    pub executed_layers: usize,
    pub seq_len: usize,
    pub selector_used: bool,
}

// ── forward passes ──────────────────────────────────────────────────

/// Project features to d_model and add learned absolute positions. The
/// result feeds both the encoder stack and the selector.
pub fn frontend(tape: &mut Tape, features: &Tensor, vars: &ModelVars, config: &ModelConfig) -> Result<Var> {
    let (t, d_in) = features.dims2("frontend")?;
    if d_in != config.d_in {
        return Err(CoreError::Config(format!(
            "frontend: features have dim {}, model expects {}",
            d_in, config.d_in
        )));
    }
    if t == 0 || t > config.max_seq_len {
        return Err(CoreError::Config(format!(
            "frontend: sequence length {} out of 1..={}",
            t, config.max_seq_len
        )));
    }
    let x = tape.constant(features.clone());
    let proj = tape.matmul(x, vars.w_in)?;
    let proj = tape.add_row(proj, vars.b_in)?;
    let pos = tape.take_rows(vars.pos, 0, t)?;
    tape.add(proj, pos)
}

/// Gate values multiplying the sublayer branches: either an in-graph gate
/// vector (trains the selector through the straight-through estimator) or
/// plain bits with no graph presence.
#[derive(Debug, Clone, Copy)]
pub enum GateSource {
    InGraph(Var),
    Fixed,
}

/// One encoder layer under a gate bit. A zero bit returns the input
/// unchanged without recording any computation.
pub fn gated_layer_forward(
    tape: &mut Tape,
    y_prev: Var,
    bit: bool,
    gate: GateSource,
    layer_index: usize,
    layer: &EncoderLayerVars,
    valid_len: usize,
) -> Result<Var> {
    if !bit {
        return Ok(y_prev);
    }
    let normed = tape.layer_norm(y_prev, layer.ln1_gain, layer.ln1_bias, LAYER_NORM_EPS)?;
    let attn = nn::multi_head_attention(tape, normed, &layer.mha, valid_len)?;
    let attn = match gate {
        GateSource::InGraph(g) => tape.mul_gate(attn, g, layer_index)?,
        GateSource::Fixed => attn,
    };
    let mid = tape.add(y_prev, attn)?;
    let normed2 = tape.layer_norm(mid, layer.ln2_gain, layer.ln2_bias, LAYER_NORM_EPS)?;
    let ff = nn::ffn(tape, normed2, &layer.ffn)?;
    let ff = match gate {
        GateSource::InGraph(g) => tape.mul_gate(ff, g, layer_index)?,
        GateSource::Fixed => ff,
    };
    tape.add(mid, ff)
}

/// Run the stack under a mask; layers with a zero bit contribute nothing.
pub fn encoder_forward(
    tape: &mut Tape,
    x: Var,
    bits: &[bool],
    gate: GateSource,
    vars: &ModelVars,
    valid_len: usize,
) -> Result<Var> {
    if bits.len() != vars.layers.len() {
        return Err(CoreError::Contract(format!(
            "encoder_forward: mask length {} != {} layers",
            bits.len(),
            vars.layers.len()
        )));
    }
    let mut y = x;
    for (j, layer) in vars.layers.iter().enumerate() {
        y = gated_layer_forward(tape, y, bits[j], gate, j, layer, valid_len)?;
    }
    Ok(y)
}

fn apply_head(
    tape: &mut Tape,
    hidden: Var,
    head: &HeadVars,
    task: &TaskKind,
    valid_len: usize,
) -> Result<Var> {
    let pooled = match task {
        TaskKind::Ctc { .. } => hidden,
        TaskKind::Classification { .. } => tape.mean_rows(hidden, valid_len)?,
    };
    let logits = tape.matmul(pooled, head.w)?;
    tape.add_row(logits, head.b)
}

fn final_head(vars: &ModelVars) -> &HeadVars {
    vars.heads.last().expect("models always carry at least one head")
}

/// Policy-driven forward pass over one sample's frames (callers slice
/// padded batches down to each sample's true length first). Returns
/// pre-softmax logits: T×V per frame for CTC, 1×V per utterance for
/// classification.
pub fn model_forward(
    tape: &mut Tape,
    features: &Tensor,
    policy: DropPolicy,
    vars: &ModelVars,
    config: &ModelConfig,
    rng: &mut Stream,
) -> Result<(Var, ForwardTrace)> {
    let n = config.n_layers;
    let t = features.dims2("model_forward")?.0;

    if let DropPolicy::EarlyExitEntropy(tau) = policy {
        let (logits, exit, trace) = early_exit_forward(tape, features, tau, vars, config)?;
        let _ = exit;
        return Ok((logits, trace));
    }

    let x = frontend(tape, features, vars, config)?;
    let (mask, gate) = match policy {
        DropPolicy::Full => (GateMask::full(n), GateSource::Fixed),
        DropPolicy::InputDrivenTopK(k) => {
            if k == 0 || k > n {
                return Err(CoreError::Contract(format!(
                    "model_forward: top-k {} out of 1..={}",
                    k, n
                )));
            }
            let scores = gating::selector_forward(tape, x, &vars.selector, LAYER_NORM_EPS)?;
            let (gates, mask) = gating::topk_binarize(tape, scores, k)?;
            (mask, GateSource::InGraph(gates))
        }
        DropPolicy::InputDrivenThreshold(gamma) => {
            let scores = gating::selector_forward(tape, x, &vars.selector, LAYER_NORM_EPS)?;
            let (gates, mask) = gating::threshold_binarize(tape, scores, gamma)?;
            (mask, GateSource::InGraph(gates))
        }
        DropPolicy::RandomBernoulli(p_drop) => {
            (gating::random_gates_bernoulli(n, p_drop, rng)?, GateSource::Fixed)
        }
        DropPolicy::RandomExactN(n_dropped) => {
            (gating::random_gates_exact(n, n_dropped, rng)?, GateSource::Fixed)
        }
        DropPolicy::EarlyExitEntropy(_) => unreachable!("handled above"),
    };

    let hidden = encoder_forward(tape, x, &mask.bits, gate, vars, t)?;
    let logits = apply_head(tape, hidden, final_head(vars), &config.task, t)?;
    let executed = mask.popcount();
    let selector_used = matches!(
        policy,
        DropPolicy::InputDrivenTopK(_) | DropPolicy::InputDrivenThreshold(_)
    );
    Ok((
        logits,
        ForwardTrace {
            mask,
            exit_index: None,
            executed_layers: executed,
            seq_len: t,
            selector_used,
        },
    ))
}

fn ee_guard(vars: &ModelVars, config: &ModelConfig) -> Result<()> {
    if !config.ee_enabled || vars.heads.len() != config.n_layers {
        return Err(CoreError::Config(
            "early exit requires a model built with ee_enabled (one head per layer)".into(),
        ));
    }
    Ok(())
}

fn entropy_of_logits(tape: &mut Tape, logits: Var, valid_len: usize) -> Result<f64> {
    let probs = tape.row_softmax(logits)?;
    let rows = tape.value(probs).rows_cols().0.min(valid_len);
    metrics::avg_entropy(tape.value(probs), rows)
}

/// Run layers in order; after layer j, compute head-j logits and their mean
/// softmax entropy over valid frames, and return at the first j below the
/// threshold. When nothing qualifies the final head answers with exit N.
/// Layers beyond the exit never execute. A threshold at or below zero can
/// never fire (entropy is non-negative), so it degenerates to exiting at N.
pub fn early_exit_forward(
    tape: &mut Tape,
    features: &Tensor,
    tau_entropy: f64,
    vars: &ModelVars,
    config: &ModelConfig,
) -> Result<(Var, usize, ForwardTrace)> {
    ee_guard(vars, config)?;
    let n = config.n_layers;
    let t = features.dims2("early_exit_forward")?.0;
    let x = frontend(tape, features, vars, config)?;
    let mut y = x;
    for j in 1..=n {
        y = gated_layer_forward(tape, y, true, GateSource::Fixed, j - 1, &vars.layers[j - 1], t)?;
        let logits = apply_head(tape, y, &vars.heads[j - 1], &config.task, t)?;
        let entropy = entropy_of_logits(tape, logits, t)?;
        if entropy < tau_entropy || j == n {
            let mut bits = vec![false; n];
            for b in bits.iter_mut().take(j) {
                *b = true;
            }
            let trace = ForwardTrace {
                mask: GateMask { bits, origin: MaskOrigin::EarlyExit { exit: j } },
                exit_index: Some(j),
                executed_layers: j,
                seq_len: t,
                selector_used: false,
            };
            return Ok((logits, j, trace));
        }
    }
    unreachable!("loop returns at j == n")
}

/// Early-exit evaluation at a fixed exit: run layers 1..=exit and read that
/// exit's head, ignoring entropies.
pub fn forced_exit_forward(
    tape: &mut Tape,
    features: &Tensor,
    exit: usize,
    vars: &ModelVars,
    config: &ModelConfig,
) -> Result<(Var, ForwardTrace)> {
    ee_guard(vars, config)?;
    let n = config.n_layers;
    if exit == 0 || exit > n {
        return Err(CoreError::Contract(format!(
            "forced_exit_forward: exit {} out of 1..={}",
            exit, n
        )));
    }
    let t = features.dims2("forced_exit_forward")?.0;
    let x = frontend(tape, features, vars, config)?;
    let mut y = x;
    for j in 0..exit {
        y = gated_layer_forward(tape, y, true, GateSource::Fixed, j, &vars.layers[j], t)?;
    }
    let logits = apply_head(tape, y, &vars.heads[exit - 1], &config.task, t)?;
    let mut bits = vec![false; n];
    for b in bits.iter_mut().take(exit) {
        *b = true;
    }
    Ok((
        logits,
        ForwardTrace {
            mask: GateMask { bits, origin: MaskOrigin::EarlyExit { exit } },
            exit_index: Some(exit),
            executed_layers: exit,
            seq_len: t,
            selector_used: false,
        },
    ))
}

/// All exits' logits in one pass, for the early-exit joint training loss.
pub fn ee_all_exit_logits(
    tape: &mut Tape,
    features: &Tensor,
    vars: &ModelVars,
    config: &ModelConfig,
) -> Result<Vec<Var>> {
    ee_guard(vars, config)?;
    let t = features.dims2("ee_all_exit_logits")?.0;
    let x = frontend(tape, features, vars, config)?;
    let mut y = x;
    let mut out = Vec::with_capacity(config.n_layers);
    for j in 0..config.n_layers {
        y = gated_layer_forward(tape, y, true, GateSource::Fixed, j, &vars.layers[j], t)?;
        out.push(apply_head(tape, y, &vars.heads[j], &config.task, t)?);
    }
    Ok(out)
}
