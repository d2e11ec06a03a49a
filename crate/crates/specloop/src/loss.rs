//! Distillation losses for the drafter, with closed-form gradients with
//! respect to the drafter logits.
//!
//! Three loss families are used by the learner:
//!
//! * accepted-token alignment — KL between the target distribution `p` and
//!   the drafter softmax `q`, in either direction (`FKL` = KL(p‖q),
//!   mass-covering; `RKL` = KL(q‖p), mode-seeking);
//! * next-token prediction — cross-entropy against the token that was
//!   actually committed;
//! * discard alignment for rejected positions — forward KL restricted to the
//!   target's top-k support (renormalized on both sides), which concentrates
//!   the corrective signal on the tokens the target actually favors.
//!
//! Probabilities are floored at [`PROB_FLOOR`](crate::model::PROB_FLOOR)
//! before any logarithm, so sparse targets cannot produce infinities.

use crate::error::{Error, Result};
use crate::model::{floored_ln, softmax, top_k_of};

/// Direction of the accepted-token KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlDirection {
    /// KL(p_target ‖ q_draft): gradient `q - p`.
    Forward,
    /// KL(q_draft ‖ p_target): gradient `q_j ((ln q_j - ln p_j) - loss)`.
    Reverse,
}

/// A scalar loss plus its gradient with respect to the drafter logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn check_lens(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch { expected: p.len(), got: q.len() });
    }
    Ok(())
}

/// Exact KL(p ‖ q) with the 0·ln 0 = 0 convention. Reports an explicit
/// overflow error when `q` has zero mass where `p` does not (cannot happen
/// when `q` comes from a softmax).
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_lens(p, q)?;
    let mut sum = 0.0;
    for (&pi, &qi) in p.iter().zip(q.iter()) {
        if pi > 0.0 {
            if qi == 0.0 {
                return Err(Error::KlOverflow);
            }
            sum += pi * (pi / qi).ln();
        }
    }
    Ok(sum)
}

/// Accepted-token alignment loss and gradient w.r.t. `logits`.
pub fn accepted_loss_grad(target: &[f64], logits: &[f64], dir: KlDirection) -> Result<LossGrad> {
    check_lens(target, logits)?;
    let q = softmax(logits);
    match dir {
        KlDirection::Forward => {
            let mut loss = 0.0;
            for (&pi, &qi) in target.iter().zip(q.iter()) {
                if pi > 0.0 {
                    loss += pi * (floored_ln(pi) - floored_ln(qi));
                }
            }
            let grad = q.iter().zip(target.iter()).map(|(&qi, &pi)| qi - pi).collect();
            Ok(LossGrad { loss, grad })
        }
        KlDirection::Reverse => {
            let mut loss = 0.0;
            let log_ratio: Vec<f64> = q
                .iter()
                .zip(target.iter())
                .map(|(&qi, &pi)| floored_ln(qi) - floored_ln(pi))
                .collect();
            for (&qi, &lr) in q.iter().zip(log_ratio.iter()) {
                if qi > 0.0 {
                    loss += qi * lr;
                }
            }
            let grad = q
                .iter()
                .zip(log_ratio.iter())
                .map(|(&qi, &lr)| qi * (lr - loss))
                .collect();
            Ok(LossGrad { loss, grad })
        }
    }
}

/// Cross-entropy against the committed token.
pub fn ntp_loss_grad(realized: u32, logits: &[f64]) -> Result<LossGrad> {
    if realized as usize >= logits.len() {
        return Err(Error::TokenOutOfRange { token: realized, vocab: logits.len() });
    }
    let q = softmax(logits);
    let loss = -floored_ln(q[realized as usize]);
    let mut grad = q;
    grad[realized as usize] -= 1.0;
    Ok(LossGrad { loss, grad })
}

/// Discard loss for rejected positions: restrict both distributions to the
/// target's `topk` highest-probability tokens (the target argmax is always
/// in the support), renormalize, and take forward KL. The gradient w.r.t.
/// the full logit vector is `q̃ - p̃` inside the support, zero outside
/// (`q̃` being the softmax of the restricted logits). `topk == 0` or
/// `topk >= vocab` means no restriction, which is exactly the forward-KL
/// accepted loss.
pub fn discard_loss_grad(target: &[f64], logits: &[f64], topk: usize) -> Result<LossGrad> {
    check_lens(target, logits)?;
    let v = target.len();
    if topk == 0 || topk >= v {
        return accepted_loss_grad(target, logits, KlDirection::Forward);
    }
    let support: Vec<usize> = top_k_of(target, topk).into_iter().map(|(i, _)| i as usize).collect();
    let mass: f64 = support.iter().map(|&i| target[i]).sum();
    if !(mass > 0.0) {
        return Err(Error::InvalidArgument(
            "discard loss requires positive target mass on the restricted support".into(),
        ));
    }
    let p_restricted: Vec<f64> = support.iter().map(|&i| target[i] / mass).collect();
    let z_restricted: Vec<f64> = support.iter().map(|&i| logits[i]).collect();
    let q_restricted = softmax(&z_restricted);

    let mut loss = 0.0;
    for (&pi, &qi) in p_restricted.iter().zip(q_restricted.iter()) {
        if pi > 0.0 {
            loss += pi * (floored_ln(pi) - floored_ln(qi));
        }
    }
    let mut grad = vec![0.0; v];
    for ((&i, &qi), &pi) in support.iter().zip(q_restricted.iter()).zip(p_restricted.iter()) {
        grad[i] = qi - pi;
    }
    Ok(LossGrad { loss, grad })
}
