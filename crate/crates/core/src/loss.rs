//! Training objectives: CTC negative log-likelihood computed by the log-space
//! forward recursion over the blank-interleaved label sequence, greedy CTC
//! decoding, cross-entropy, and the early-exit joint loss.
//!
//! The blank symbol is fixed at index 0 everywhere.

use crate::autograd::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::kernels::log_add_exp;
use crate::tensor::Tensor;

pub const BLANK: usize = 0;

/// One CTC scoring problem: per-frame log-probabilities (V includes blank at
/// index 0), a blank-free target sequence, and the number of valid frames.
#[derive(Debug, Clone)]
pub struct CtcInstance {
    pub log_probs: Tensor,
    pub targets: Vec<usize>,
    pub input_len: usize,
}

impl CtcInstance {
    pub fn validate(&self) -> Result<()> {
        let (t, v) = self.log_probs.dims2("ctc_instance")?;
        if self.input_len == 0 || self.input_len > t {
            return Err(CoreError::Contract(format!(
                "ctc: input_len {} out of 1..={}",
                self.input_len, t
            )));
        }
        for &label in &self.targets {
            if label == BLANK || label >= v {
                return Err(CoreError::Contract(format!(
                    "ctc: label {} outside 1..{}",
                    label, v
                )));
            }
        }
        for r in 0..self.input_len {
            let total: f64 = self.log_probs.row(r).iter().map(|lp| lp.exp()).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(CoreError::Contract(format!(
                    "ctc: frame {} probabilities sum to {}, expected 1",
                    r, total
                )));
            }
        }
        Ok(())
    }

    pub fn loss(&self) -> f64 {
        ctc_forward(&self.log_probs, &self.targets, self.input_len)
    }
}

/// Frames required for any alignment to exist: one per label plus one
/// separating blank per adjacent repeat.
pub fn ctc_min_frames(targets: &[usize]) -> usize {
    let repeats = targets.windows(2).filter(|w| w[0] == w[1]).count();
    targets.len() + repeats
}

fn extended_labels(targets: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * targets.len() + 1);
    ext.push(BLANK);
    for &l in targets {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

/// Log-space forward (alpha) recursion; returns the negative log-likelihood.
/// Infeasible instances come back as +inf, never NaN.
pub(crate) fn ctc_forward(log_probs: &Tensor, targets: &[usize], input_len: usize) -> f64 {
    if input_len < ctc_min_frames(targets).max(1) {
        return f64::INFINITY;
    }
    let ext = extended_labels(targets);
    let s_len = ext.len();
    let lp = |t: usize, k: usize| log_probs.get2(t, k);

    let mut alpha = vec![f64::NEG_INFINITY; s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    let mut prev = alpha.clone();
    for t in 1..input_len {
        for s in (0..s_len).rev() {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add_exp(acc, prev[s - 1]);
            }
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                acc = log_add_exp(acc, prev[s - 2]);
            }
            alpha[s] = acc + lp(t, ext[s]);
        }
        prev.copy_from_slice(&alpha);
    }
    let mut log_p = alpha[s_len - 1];
    if s_len > 1 {
        log_p = log_add_exp(log_p, alpha[s_len - 2]);
    }
    -log_p
}

/// Gradient of the CTC negative log-likelihood with respect to the per-frame
/// log-probabilities, via the alpha/beta recursions. Zero for infeasible
/// instances and for frames at or beyond `input_len`.
pub(crate) fn ctc_grad(log_probs: &Tensor, targets: &[usize], input_len: usize) -> Vec<f64> {
    let (t_total, v) = log_probs
        .dims2("ctc_grad")
        .expect("ctc node stores a 2-D tensor");
    let mut grad = vec![0.0; t_total * v];
    if input_len < ctc_min_frames(targets).max(1) {
        return grad;
    }
    let ext = extended_labels(targets);
    let s_len = ext.len();
    let t_len = input_len;
    let lp = |t: usize, k: usize| log_probs.get2(t, k);

    // full alpha table (includes lp at time t)
    let mut alpha = vec![f64::NEG_INFINITY; t_len * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                acc = log_add_exp(acc, alpha[(t - 1) * s_len + s - 1]);
            }
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                acc = log_add_exp(acc, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = acc + lp(t, ext[s]);
        }
    }
    let mut log_p = alpha[(t_len - 1) * s_len + s_len - 1];
    if s_len > 1 {
        log_p = log_add_exp(log_p, alpha[(t_len - 1) * s_len + s_len - 2]);
    }
    if log_p == f64::NEG_INFINITY {
        return grad;
    }

    // beta excludes lp at time t, so alpha_t(s) + beta_t(s) scores complete
    // paths through (t, s) and sums to log_p at every t.
    let mut beta = vec![f64::NEG_INFINITY; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[(t + 1) * s_len + s] + lp(t + 1, ext[s]);
            if s + 1 < s_len {
                acc = log_add_exp(acc, beta[(t + 1) * s_len + s + 1] + lp(t + 1, ext[s + 1]));
            }
            if s + 2 < s_len && ext[s + 2] != BLANK && ext[s + 2] != ext[s] {
                acc = log_add_exp(acc, beta[(t + 1) * s_len + s + 2] + lp(t + 1, ext[s + 2]));
            }
            beta[t * s_len + s] = acc;
        }
    }

    for t in 0..t_len {
        let mut per_label = vec![f64::NEG_INFINITY; v];
        for s in 0..s_len {
            let joint = alpha[t * s_len + s] + beta[t * s_len + s];
            per_label[ext[s]] = log_add_exp(per_label[ext[s]], joint);
        }
        for k in 0..v {
            if per_label[k] > f64::NEG_INFINITY {
                grad[t * v + k] = -((per_label[k] - log_p).exp());
            }
        }
    }
    grad
}

/// Differentiable CTC loss node. `feasible == false` marks instances whose
/// target cannot be aligned within `input_len` frames; those carry a +inf
/// loss and a zero gradient.
#[derive(Debug, Clone, Copy)]
pub struct CtcLoss {
    pub loss: Var,
    pub feasible: bool,
}

pub fn ctc_loss(tape: &mut Tape, log_probs: Var, targets: &[usize], input_len: usize) -> Result<CtcLoss> {
    let loss = tape.ctc(log_probs, targets, input_len)?;
    let feasible = input_len >= ctc_min_frames(targets).max(1);
    Ok(CtcLoss { loss, feasible })
}

/// Per-frame argmax, collapse consecutive repeats, remove blanks.
pub fn ctc_greedy_decode(log_probs: &Tensor, input_len: usize) -> Vec<usize> {
    let (t, _) = log_probs.rows_cols();
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for r in 0..t.min(input_len) {
        let row = log_probs.row(r);
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if best != prev && best != BLANK {
            out.push(best);
        }
        prev = best;
    }
    out
}

/// −log softmax(logits)[target], stabilized by max subtraction.
pub fn cross_entropy(tape: &mut Tape, logits: Var, target: usize) -> Result<Var> {
    let v = tape.value(logits).numel();
    if target >= v {
        return Err(CoreError::Contract(format!(
            "cross_entropy: target {} out of {} classes",
            target, v
        )));
    }
    let log_probs = tape.row_log_softmax(logits);
    let picked = tape.pick(log_probs, target)?;
    Ok(tape.scale(picked, -1.0))
}

#[derive(Debug, Clone, Copy)]
pub struct JointLoss {
    pub loss: Var,
    pub all_finite: bool,
}

/// Early-exit joint objective: the unweighted mean of the per-exit losses,
/// summed in exit order.
pub fn ee_joint_loss(tape: &mut Tape, per_exit: &[Var]) -> Result<JointLoss> {
    if per_exit.is_empty() {
        return Err(CoreError::Contract("ee_joint_loss: no exit losses".into()));
    }
    let mut all_finite = true;
    for &l in per_exit {
        let v = tape.value(l).item()?;
        if !v.is_finite() {
            all_finite = false;
        }
    }
    let mut acc = per_exit[0];
    for &l in &per_exit[1..] {
        acc = tape.add(acc, l)?;
    }
    let loss = tape.scale(acc, 1.0 / per_exit.len() as f64);
    Ok(JointLoss { loss, all_finite })
}

/// Mean of per-utterance losses, summed in utterance-index order.
pub fn batch_mean_loss(tape: &mut Tape, per_utterance: &[Var]) -> Result<Var> {
    if per_utterance.is_empty() {
        return Err(CoreError::Contract("batch_mean_loss: empty batch".into()));
    }
    let mut acc = per_utterance[0];
    for &l in &per_utterance[1..] {
        acc = tape.add(acc, l)?;
    }
    Ok(tape.scale(acc, 1.0 / per_utterance.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::finite_diff_check;
    use crate::rng::{normal, stream_from_seed};

    fn log_softmax_rows(rows: &[Vec<f64>]) -> Tensor {
        let t = Tensor::from_rows(rows).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(t);
        let y = tape.row_log_softmax(x);
        tape.value(y).clone()
    }

    #[test]
    fn single_frame_single_label() {
        let eps = 1e-4f64;
        let lp = Tensor::from_rows(&[vec![eps.ln(), (1.0 - eps).ln()]]).unwrap();
        let loss = ctc_forward(&lp, &[1], 1);
        assert!((loss - (-(1.0f64 - eps).ln())).abs() < 1e-12);
    }

    #[test]
    fn two_frames_uniform_matches_enumeration() {
        // alignments for "a" over 2 frames: (a,-), (-,a), (a,a) → p = 3/4
        let half = 0.5f64.ln();
        let lp = Tensor::from_rows(&[vec![half, half], vec![half, half]]).unwrap();
        let loss = ctc_forward(&lp, &[1], 2);
        assert!((loss - (-0.75f64.ln())).abs() < 1e-12, "loss {}", loss);
    }

    #[test]
    fn empty_target_is_all_blank_path() {
        let lp = log_softmax_rows(&[vec![0.3, -0.2, 1.0], vec![-0.5, 0.1, 0.4]]);
        let loss = ctc_forward(&lp, &[], 2);
        let expected = -(lp.get2(0, BLANK) + lp.get2(1, BLANK));
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn infeasible_target_gives_inf_not_nan() {
        let lp = log_softmax_rows(&[vec![0.0, 0.0]]);
        let mut tape = Tape::new();
        let x = tape.constant(lp);
        let out = ctc_loss(&mut tape, x, &[1, 1], 1).unwrap();
        assert!(!out.feasible);
        let v = tape.value(out.loss).item().unwrap();
        assert!(v.is_infinite() && v > 0.0);
    }

    #[test]
    fn padding_frames_do_not_change_loss() {
        let mut rng = stream_from_seed(9);
        let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| normal(&mut rng)).collect()).collect();
        let lp = log_softmax_rows(&rows);
        let base = ctc_forward(&lp, &[2, 1], 4);
        let mut garbled = rows.clone();
        garbled[4] = vec![9.0, -9.0, 3.0];
        garbled[5] = vec![-2.0, 8.0, 0.0];
        let lp2 = log_softmax_rows(&garbled);
        let other = ctc_forward(&lp2, &[2, 1], 4);
        assert_eq!(base, other);
    }

    #[test]
    fn ctc_gradient_matches_finite_differences() {
        // random 4×3 grid of free log-prob parameters
        let mut rng = stream_from_seed(21);
        let x0 = Tensor::new(vec![4, 3], (0..12).map(|_| normal(&mut rng)).collect()).unwrap();
        let err = finite_diff_check(
            |tape, x| {
                let lp = tape.row_log_softmax(x);
                tape.ctc(lp, &[1, 2], 4)
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "relative error {}", err);
    }

    #[test]
    fn ctc_probability_in_unit_interval() {
        let mut rng = stream_from_seed(33);
        for _ in 0..50 {
            let t = 2 + (normal(&mut rng).abs() * 2.0) as usize % 5;
            let rows: Vec<Vec<f64>> = (0..t.max(2))
                .map(|_| (0..3).map(|_| normal(&mut rng)).collect())
                .collect();
            let lp = log_softmax_rows(&rows);
            let loss = ctc_forward(&lp, &[1], rows.len());
            let p = (-loss).exp();
            assert!(p > 0.0 && p <= 1.0, "p = {}", p);
        }
    }

    #[test]
    fn greedy_decode_collapses_then_removes_blanks() {
        // argmax path [a, a, blank, a, b] → a a b
        let neg = -5.0;
        let lp = Tensor::from_rows(&[
            vec![neg, 0.0, neg],
            vec![neg, 0.0, neg],
            vec![0.0, neg, neg],
            vec![neg, 0.0, neg],
            vec![neg, neg, 0.0],
        ])
        .unwrap();
        assert_eq!(ctc_greedy_decode(&lp, 5), vec![1, 1, 2]);

        let all_blank = Tensor::from_rows(&[vec![0.0, neg], vec![0.0, neg]]).unwrap();
        assert!(ctc_greedy_decode(&all_blank, 2).is_empty());
    }

    #[test]
    fn cross_entropy_uniform_is_log_v() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::vector(vec![0.0; 5]));
        let l = cross_entropy(&mut tape, logits, 3).unwrap();
        let v = tape.value(l).item().unwrap();
        assert!((v - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_target() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::vector(vec![50.0, 0.0, 0.0]));
        let l = cross_entropy(&mut tape, logits, 0).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-20);
    }

    #[test]
    fn cross_entropy_hand_value() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let l = cross_entropy(&mut tape, logits, 2).unwrap();
        let expected = -(3.0f64.exp() / (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp())).ln();
        assert!((tape.value(l).item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        assert!(cross_entropy(&mut tape, logits, 2).is_err());
    }

    #[test]
    fn joint_loss_is_mean_of_exits() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(0.0));
        let b = tape.constant(Tensor::scalar(2.0));
        let j = ee_joint_loss(&mut tape, &[a, b]).unwrap();
        assert!(j.all_finite);
        assert_eq!(tape.value(j.loss).item().unwrap(), 1.0);

        let mut tape2 = Tape::new();
        let l = tape2.constant(Tensor::scalar(1.25));
        let j2 = ee_joint_loss(&mut tape2, &[l, l, l]).unwrap();
        assert_eq!(tape2.value(j2.loss).item().unwrap(), 1.25);
    }

    #[test]
    fn joint_loss_flags_infinite_exit() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(f64::INFINITY));
        let b = tape.constant(Tensor::scalar(1.0));
        let j = ee_joint_loss(&mut tape, &[a, b]).unwrap();
        assert!(!j.all_finite);
        assert!(tape.value(j.loss).item().unwrap().is_infinite());
    }

    #[test]
    fn min_frames_counts_adjacent_repeats() {
        assert_eq!(ctc_min_frames(&[]), 0);
        assert_eq!(ctc_min_frames(&[1, 2, 3]), 3);
        assert_eq!(ctc_min_frames(&[1, 1]), 3);
        assert_eq!(ctc_min_frames(&[2, 2, 2]), 5);
    }
}
