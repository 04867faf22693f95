//! Named parameter storage, AdamW with decoupled weight decay, and the
//! linear-warmup / stepwise-exponential-decay learning-rate schedule.

use crate::autograd::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Ordered, named parameter store. Registration order is the canonical
/// order for binding, gradient collection, optimizer state and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

/// Index of a parameter within its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.entries.push((name.into(), tensor));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    /// Register every parameter as a leaf on `tape`, in order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect()
    }

    /// Pull gradients for previously bound leaves, aligned with this set.
    /// Parameters no path reached report `None`.
    pub fn collect_grads(&self, tape: &Tape, vars: &[Var]) -> Vec<Option<Vec<f64>>> {
        vars.iter().map(|&v| tape.grad_slice(v).map(|g| g.to_vec())).collect()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// AdamW hyperparameters. `base_lr` is the schedule peak; the effective
/// per-step rate is passed into [`adamw_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            base_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        OptimState { config, step: 0, m, v }
    }

    pub fn moments(&self, idx: usize) -> (&[f64], &[f64]) {
        (&self.m[idx], &self.v[idx])
    }

    pub fn set_moments(&mut self, idx: usize, m: Vec<f64>, v: Vec<f64>) -> Result<()> {
        if m.len() != self.m[idx].len() || v.len() != self.v[idx].len() {
            return Err(CoreError::shape("optim_state", "moment length mismatch"));
        }
        self.m[idx] = m;
        self.v[idx] = v;
        Ok(())
    }
}

/// One decoupled-weight-decay Adam update with bias correction. `grads` is
/// aligned with `params`; `None` entries count as zero gradient (the decay
/// still applies).
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &[Option<Vec<f64>>],
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(CoreError::Contract(format!(
            "adamw_step: {} grads for {} params",
            grads.len(),
            params.len()
        )));
    }
    if lr < 0.0 {
        return Err(CoreError::Contract("adamw_step: negative learning rate".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let AdamConfig { beta1, beta2, eps, weight_decay, .. } = state.config;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    for i in 0..params.len() {
        let p = params.get_mut(ParamId(i));
        if let Some(g) = &grads[i] {
            if g.len() != p.numel() {
                return Err(CoreError::shape(
                    "adamw_step",
                    format!("grad len {} vs param {}", g.len(), p.numel()),
                ));
            }
        }
        let zero = vec![0.0; p.numel()];
        let g = grads[i].as_deref().unwrap_or(&zero);
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..p.data.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p.data[j] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * p.data[j]);
        }
    }
    Ok(())
}

/// Linear warmup to `peak_lr` over `warmup_steps`, then stepwise exponential
/// decay by `decay_rate` every `decay_every` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub decay_rate: f64,
    pub decay_every: u64,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, warmup_steps: u64, decay_rate: f64, decay_every: u64) -> Result<Self> {
        if peak_lr < 0.0 {
            return Err(CoreError::Config("lr schedule: peak_lr must be >= 0".into()));
        }
        if warmup_steps == 0 || decay_every == 0 {
            return Err(CoreError::Config(
                "lr schedule: warmup_steps and decay_every must be positive".into(),
            ));
        }
        if !(decay_rate > 0.0 && decay_rate <= 1.0) {
            return Err(CoreError::Config("lr schedule: decay_rate must be in (0, 1]".into()));
        }
        Ok(LrSchedule { peak_lr, warmup_steps, decay_rate, decay_every })
    }
}

pub fn lr_at(schedule: &LrSchedule, step: u64) -> f64 {
    if step < schedule.warmup_steps {
        schedule.peak_lr * step as f64 / schedule.warmup_steps as f64
    } else {
        let periods = (step - schedule.warmup_steps) / schedule.decay_every;
        schedule.peak_lr * schedule.decay_rate.powi(periods as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> (ParamSet, OptimState) {
        let mut set = ParamSet::new();
        set.push("p", Tensor::scalar(value));
        let state = OptimState::new(&set, AdamConfig::default());
        (set, state)
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params() {
        let (mut set, mut state) = one_param(0.7);
        adamw_step(&mut set, &[None], &mut state, 0.5).unwrap();
        assert_eq!(set.get(ParamId(0)).data[0], 0.7);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn decoupled_decay_scales_param() {
        let mut set = ParamSet::new();
        set.push("p", Tensor::scalar(2.0));
        let mut state = OptimState::new(
            &set,
            AdamConfig { weight_decay: 1e-2, ..AdamConfig::default() },
        );
        adamw_step(&mut set, &[Some(vec![0.0])], &mut state, 1.0).unwrap();
        assert_eq!(set.get(ParamId(0)).data[0], 2.0 * (1.0 - 1e-2));
    }

    #[test]
    fn two_steps_match_hand_recurrence() {
        // single scalar, constant grad g=0.5, defaults, lr=0.1
        let (mut set, mut state) = one_param(1.0);
        let g = 0.5;
        let lr = 0.1;
        adamw_step(&mut set, &[Some(vec![g])], &mut state, lr).unwrap();
        adamw_step(&mut set, &[Some(vec![g])], &mut state, lr).unwrap();

        // hand-rolled recurrence
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut p = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p -= lr * mh / (vh.sqrt() + eps);
        }
        assert_eq!(set.get(ParamId(0)).data[0], p);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (mut set, mut state) = one_param(1.0);
        let err = adamw_step(&mut set, &[Some(vec![1.0, 2.0])], &mut state, 0.1);
        assert!(err.is_err());
    }

    #[test]
    fn schedule_ramps_then_decays() {
        let s = LrSchedule::new(0.4, 100, 0.96, 50).unwrap();
        assert_eq!(lr_at(&s, 0), 0.0);
        assert_eq!(lr_at(&s, 50), 0.2);
        assert_eq!(lr_at(&s, 100), 0.4); // continuous at the ramp endpoint
        assert!((lr_at(&s, 200) - 0.4 * 0.96 * 0.96).abs() < 1e-15);
        for step in 0..500 {
            assert!(lr_at(&s, step) >= 0.0);
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(LrSchedule::new(0.1, 0, 0.9, 10).is_err());
        assert!(LrSchedule::new(0.1, 10, 0.0, 10).is_err());
        assert!(LrSchedule::new(0.1, 10, 1.5, 10).is_err());
        assert!(LrSchedule::new(0.1, 10, 1.0, 10).is_ok());
    }
}
