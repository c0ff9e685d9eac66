use alloc::vec::Vec;

use crate::math::{self, LOG_EPS};
use crate::numerics::{cross_entropy, kl_divergence, kl_rows, softmax, Tape, Var};
use crate::{Error, Result};

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::invalid(alloc::format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(alloc::format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// `τ² · KL(softmax(t/τ) ‖ softmax(s/τ))` on one pair of logit rows.
pub fn kd_loss(teacher_logits: &[f64], student_logits: &[f64], tau: f64) -> Result<f64> {
    check_temperature(tau)?;
    let p = softmax(teacher_logits, tau)?;
    let q = softmax(student_logits, tau)?;
    Ok(tau * tau * kl_divergence(&p, &q)?)
}

pub fn rec_loss(pred: &[f64], target: usize) -> Result<f64> {
    if target == 0 {
        return Err(Error::invalid("target 0 is padding"));
    }
    cross_entropy(pred, target)
}

/// `α · kd + (1 − α) · rec`.
pub fn joint_loss(kd: f64, rec: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * kd + (1.0 - alpha) * rec)
}

/// Tape form of [`joint_loss`].
pub fn joint_loss_var(tape: &mut Tape, kd: Var, rec: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    let a = tape.scale(kd, alpha);
    let b = tape.scale(rec, 1.0 - alpha);
    tape.add(a, b)
}

/// Mean over rows of the temperature-scaled KL between constant teacher
/// targets `p` (already softened at `tau`) and the student rows `logits`,
/// both `[B, V+1]` with column 0 excluded.
pub fn kd_loss_var(tape: &mut Tape, p: &[f64], logits: Var, tau: f64) -> Result<Var> {
    check_temperature(tau)?;
    let (rows, width) = (tape.value(logits).rows(), tape.value(logits).cols());
    let mask = crate::teacher::pad_column_mask(rows, width);
    let q = tape.softmax(logits, tau, Some(&mask))?;
    let kl = kl_rows(tape, p, q)?;
    Ok(tape.scale(kl, tau * tau))
}

/// Softened teacher targets from teacher logits, `[B, width]` row-major with
/// column 0 forced to zero.
pub fn soften_logits(logits: &[f64], width: usize, tau: f64) -> Result<Vec<f64>> {
    check_temperature(tau)?;
    if width < 2 || logits.len() % width != 0 {
        return Err(Error::invalid("logit rows do not match the vocabulary width"));
    }
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(width) {
        out.push(0.0);
        out.extend(softmax(&row[1..], tau)?);
    }
    Ok(out)
}

/// Same as [`soften_logits`] when only cached probabilities are available:
/// logits are recovered as `ln(max(p, 1e-12))`.
pub fn soften_probs(probs: &[f64], width: usize, tau: f64) -> Result<Vec<f64>> {
    let logits: Vec<f64> = probs.iter().map(|&p| math::ln(p.max(LOG_EPS))).collect();
    soften_logits(&logits, width, tau)
}
