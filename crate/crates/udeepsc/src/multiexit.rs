//! Learnable certainty module (LCM), ground-truth certainty targets, the
//! two-phase multi-exit loss, and the runtime exit decision.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, ParamSet, Session};
use crate::scalar::{s, Scalar};
use ndarray::Array2;

/// Per-task certainty predictor: a small MLP over the mean-pooled query
/// state and the noise variance, squashed by a sigmoid. One LCM per task,
/// shared across all decoder layers of that task.
#[derive(Debug, Clone)]
pub struct Lcm {
    pub hidden: Linear,
    pub out: Linear,
}

impl Lcm {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Lcm {
            hidden: Linear::new(params, init, &format!("{name}.h"), dim + 1, hidden),
            out: Linear::new(params, init, &format!("{name}.out"), hidden, 1),
        }
    }

    /// Certainty in (0,1) per sample from one decoder tap.
    pub fn predict<T: Scalar>(
        &self,
        sess: &mut Session<T>,
        tap: Var,
        q_lens: &[usize],
        sigma2: f64,
    ) -> Var {
        let total: usize = q_lens.iter().sum();
        let ones = sess.tape.constant(Array2::from_elem((total, 1), T::one()));
        let pooled = sess.tape.segment_masked_mean(tap, ones, q_lens);
        let sig = sess
            .tape
            .constant(Array2::from_elem((q_lens.len(), 1), s::<T>(sigma2)));
        let joint = sess.tape.concat_cols(&[pooled, sig]);
        let h = self.hidden.forward(sess, joint);
        let h = sess.tape.gelu(h);
        let y = self.out.forward(sess, h);
        sess.tape.sigmoid(y)
    }
}

/// Ground-truth certainty for classification: 1 when the head's argmax
/// matches the label (argmax ties resolve to the lowest class index).
pub fn certainty_target_classification(logits: &[f64], label: usize) -> f64 {
    if crate::tasks::argmax(logits) == label {
        1.0
    } else {
        0.0
    }
}

/// Ground-truth certainty for reconstruction: 1 - tanh of the error norm,
/// normalized by sqrt(element count) so the target is resolution-invariant.
pub fn certainty_target_reconstruction(pred: &Array2<f64>, label: &Array2<f64>) -> Result<f64> {
    if pred.dim() != label.dim() {
        return Err(Error::Dimension(format!(
            "certainty shapes {:?} vs {:?}",
            pred.dim(),
            label.dim()
        )));
    }
    let err = (pred - label).mapv(|d| d * d).sum().sqrt();
    let norm = (pred.len() as f64).sqrt();
    Ok(1.0 - (err / norm).tanh())
}

/// Ground-truth certainty for token reconstruction: the fraction of
/// positions the head decodes correctly (the per-token analog of the
/// classification indicator).
pub fn certainty_target_tokens(logits: &Array2<f64>, tokens: &[usize]) -> Result<f64> {
    if logits.nrows() != tokens.len() {
        return Err(Error::Dimension(format!(
            "{} logit rows vs {} tokens",
            logits.nrows(),
            tokens.len()
        )));
    }
    let correct = tokens
        .iter()
        .enumerate()
        .filter(|(r, &t)| crate::tasks::argmax(&logits.row(*r).to_vec()) == t)
        .count();
    Ok(correct as f64 / tokens.len().max(1) as f64)
}

/// LCM training loss: squared error between prediction and target.
pub fn lcm_loss(c: f64, c_hat: f64) -> f64 {
    (c - c_hat) * (c - c_hat)
}

/// Two-phase multi-exit loss over per-layer (task, LCM) loss pairs:
/// phase 1 trains only the deepest head, phase 2 the weighted sum of all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    One,
    Two,
}

impl Phase {
    /// Alternation by step parity: odd steps run phase 1.
    pub fn for_step(step: u64) -> Phase {
        if step % 2 == 1 {
            Phase::One
        } else {
            Phase::Two
        }
    }
}

/// Plain multi-exit loss for oracle tests.
pub fn multiexit_loss_plain(
    task_losses: &[f64],
    lcm_losses: &[f64],
    phase: Phase,
    weights: &[f64],
) -> f64 {
    assert_eq!(task_losses.len(), lcm_losses.len());
    assert_eq!(task_losses.len(), weights.len());
    assert!(!task_losses.is_empty());
    match phase {
        Phase::One => {
            let n = task_losses.len() - 1;
            weights[n] * (task_losses[n] + lcm_losses[n])
        }
        Phase::Two => task_losses
            .iter()
            .zip(lcm_losses)
            .zip(weights)
            .map(|((t, l), w)| w * (t + l))
            .sum(),
    }
}

/// Tape multi-exit loss. In phase 1 the caller should only have evaluated
/// the last layer's pair; earlier entries must be None.
pub fn multiexit_loss_tape<T: Scalar>(
    sess: &mut Session<T>,
    pairs: &[Option<(Var, Var)>],
    phase: Phase,
    weights: &[f64],
) -> Var {
    assert_eq!(pairs.len(), weights.len());
    let mut acc: Option<Var> = None;
    let take = |i: usize| match phase {
        Phase::One => i + 1 == pairs.len(),
        Phase::Two => true,
    };
    for (i, pair) in pairs.iter().enumerate() {
        if !take(i) {
            continue;
        }
        let (task_loss, lcm_loss) = pair.expect("loss pair evaluated for active layer");
        let summed = sess.tape.add(task_loss, lcm_loss);
        let weighted = sess.tape.scale(summed, s::<T>(weights[i]));
        acc = Some(match acc {
            Some(a) => sess.tape.add(a, weighted),
            None => weighted,
        });
    }
    acc.expect("at least one exit layer")
}

/// First layer whose certainty clears the threshold; falls back to the last
/// layer. The iterator is polled lazily, so layers past the exit are never
/// computed.
pub fn first_exit(
    certainties: impl Iterator<Item = f64>,
    threshold: f64,
    n_layers: usize,
) -> usize {
    assert!(n_layers >= 1);
    for (i, c) in certainties.take(n_layers).enumerate() {
        if c > threshold {
            return i + 1;
        }
    }
    n_layers
}
