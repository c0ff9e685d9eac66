//! Probability-vector helpers on plain slices, plus their tape
//! counterparts used by the models.

use alloc::vec;
use alloc::vec::Vec;

use super::tape::{softmax_row, Tape, Var};
use crate::math::{self, LOG_EPS};
use crate::{Error, Result};

/// Tolerance for "sums to one" preconditions.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Temperature softmax with max subtraction.
pub fn softmax(v: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("softmax temperature must be positive"));
    }
    let mut out = vec![0.0; v.len()];
    softmax_row(v, None, temperature, &mut out);
    Ok(out)
}

fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    let s: f64 = p.iter().sum();
    if p.is_empty() || (s - 1.0).abs() > SIMPLEX_TOL || p.iter().any(|&x| x < 0.0) {
        return Err(Error::invalid(alloc::format!("{what} is not a probability vector (sum {s})")));
    }
    Ok(())
}

/// `-ln(pred[target] + 1e-12)`.
pub fn cross_entropy(pred: &[f64], target: usize) -> Result<f64> {
    check_simplex(pred, "prediction")?;
    let p = *pred.get(target).ok_or(Error::Index { index: target, len: pred.len() })?;
    Ok(-math::ln(p + LOG_EPS))
}

/// `Σ p_i ln(p_i / max(q_i, 1e-12))`, with `0 · ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(alloc::format!("length mismatch {} vs {}", p.len(), q.len())));
    }
    check_simplex(p, "p")?;
    check_simplex(q, "q")?;
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (math::ln(pi) - math::ln(qi.max(LOG_EPS))))
        .sum())
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * math::ln(x)).sum::<f64>()
}

/// Mean cross-entropy of probability rows `probs [B, V]` against one target
/// per row.
pub fn cross_entropy_rows(tape: &mut Tape, probs: Var, targets: &[usize]) -> Result<Var> {
    let v = tape.value(probs);
    let (rows, cols) = (v.rows(), v.cols());
    if targets.len() != rows {
        return Err(Error::shape("cross_entropy", alloc::format!("{rows} rows, {} targets", targets.len())));
    }
    let mut idx = Vec::with_capacity(rows);
    for (r, &t) in targets.iter().enumerate() {
        if t >= cols {
            return Err(Error::Index { index: t, len: cols });
        }
        idx.push(r * cols + t);
    }
    let picked = tape.pick(probs, idx)?;
    let logs = tape.ln_eps(picked, LOG_EPS);
    let m = tape.mean(logs);
    Ok(tape.scale(m, -1.0))
}

/// Mean over rows of `KL(p_r ‖ q_r)` where `p` is a constant probability
/// matrix (row-major, same layout as `q`). Gradient reaches `q` only.
pub fn kl_rows(tape: &mut Tape, p: &[f64], q: Var) -> Result<Var> {
    let qv = tape.value(q);
    if p.len() != qv.len() {
        return Err(Error::invalid(alloc::format!("length mismatch {} vs {}", p.len(), qv.len())));
    }
    let rows = qv.rows() as f64;
    let constant: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| x * math::ln(x)).sum();
    let lq = tape.ln_clamp(q, LOG_EPS);
    let cross = tape.dot_const(lq, p.to_vec())?;
    // (constant - cross) / rows
    let neg = tape.scale(cross, -1.0 / rows);
    let c = tape.constant(super::Tensor::scalar(constant / rows));
    tape.add(neg, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0, 0.0], 1.0).unwrap();
        assert!(close(s[0], 0.5, 1e-15) && close(s[1], 0.5, 1e-15));
        let s = softmax(&[core::f64::consts::LN_2, 0.0], 1.0).unwrap();
        assert!(close(s[0], 2.0 / 3.0, 1e-12) && close(s[1], 1.0 / 3.0, 1e-12));
    }

    #[test]
    fn softmax_rejects_bad_arguments() {
        assert!(softmax(&[], 1.0).is_err());
        assert!(softmax(&[1.0], 0.0).is_err());
        assert!(softmax(&[1.0], -2.0).is_err());
    }

    #[test]
    fn higher_temperature_raises_entropy() {
        let mut rng = crate::rng::seeded(11);
        let v: Vec<f64> = (0..100).map(|_| crate::rng::normal(&mut rng) * 3.0).collect();
        let cold = entropy(&softmax(&v, 1.0).unwrap());
        let warm = entropy(&softmax(&v, 5.0).unwrap());
        assert!(warm >= cold, "{warm} < {cold}");
    }

    #[test]
    fn cross_entropy_examples() {
        assert!(cross_entropy(&[0.0, 1.0, 0.0], 1).unwrap().abs() <= 1e-9);
        assert!(close(cross_entropy(&[0.25; 4], 3).unwrap(), 4f64.ln(), 1e-9));
        assert!(close(cross_entropy(&[0.7, 0.2, 0.1], 1).unwrap(), 1.6094379124341003, 1e-9));
        assert!(matches!(cross_entropy(&[0.5, 0.5], 2), Err(Error::Index { .. })));
    }

    #[test]
    fn kl_examples() {
        assert!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap().abs() <= 1e-12);
        assert!(close(kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 2f64.ln(), 1e-12));
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    // Oracle: naive summation with the terms accumulated in sorted order
    // by magnitude, independent of the iterator pipeline above.
    #[test]
    fn kl_matches_sorted_summation_oracle() {
        let mut rng = crate::rng::seeded(5);
        let raw = |rng: &mut crate::rng::Rng| -> Vec<f64> {
            let v: Vec<f64> = (0..10).map(|_| crate::rng::normal(rng)).collect();
            softmax(&v, 1.0).unwrap()
        };
        for _ in 0..20 {
            let p = raw(&mut rng);
            let q = raw(&mut rng);
            let mut terms: Vec<f64> = (0..10).map(|i| p[i] * (p[i] / q[i]).ln()).collect();
            terms.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap());
            let mut s = 0.0;
            let mut comp = 0.0;
            for t in terms {
                let y = t - comp;
                let u = s + y;
                comp = (u - s) - y;
                s = u;
            }
            assert!(close(kl_divergence(&p, &q).unwrap(), s, 1e-9));
        }
    }

    #[test]
    fn tape_losses_agree_with_slice_versions() {
        let logits = [0.3, -1.2, 2.0, 0.1, 0.7, -0.4];
        let mut tape = Tape::new();
        let x = tape.constant(super::super::Tensor::new([2, 3], logits.to_vec()).unwrap());
        let p = tape.softmax(x, 1.0, None).unwrap();
        let ce = cross_entropy_rows(&mut tape, p, &[2, 0]).unwrap();
        let r0 = softmax(&logits[..3], 1.0).unwrap();
        let r1 = softmax(&logits[3..], 1.0).unwrap();
        let expect = (cross_entropy(&r0, 2).unwrap() + cross_entropy(&r1, 0).unwrap()) / 2.0;
        assert!(close(tape.scalar(ce), expect, 1e-14));

        let target = [0.2, 0.5, 0.3, 0.6, 0.1, 0.3];
        let kl = kl_rows(&mut tape, &target, p).unwrap();
        let expect = (kl_divergence(&target[..3], &r0).unwrap() + kl_divergence(&target[3..], &r1).unwrap()) / 2.0;
        assert!(close(tape.scalar(kl), expect, 1e-14));
    }
}
