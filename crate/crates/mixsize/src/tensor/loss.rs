//! Classification loss.

use crate::elem::Elem;
use crate::tensor::{finite_guard, Tape, Tensor};
use crate::Result;

/// Mean softmax cross-entropy of `logits: [N,K]` against class indices.
///
/// Stabilized with the log-sum-exp shift, so large logits stay finite.
pub fn softmax_cross_entropy<T: Elem>(
    tape: &Tape,
    logits: &Tensor<T>,
    targets: &[usize],
) -> Result<Tensor<T>> {
    let &[n, k] = logits.shape() else {
        return Err(crate::shape_err!(
            "softmax_cross_entropy: logits must be 2-D, got {:?}",
            logits.shape()
        ));
    };
    if targets.len() != n {
        return Err(crate::shape_err!(
            "softmax_cross_entropy: {n} rows but {} targets",
            targets.len()
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(crate::domain_err!(
            "softmax_cross_entropy: target {bad} out of range for {k} classes"
        ));
    }

    // softmax probabilities are saved for the backward pass
    let mut probs = vec![T::zero(); n * k];
    let mut total = 0.0f64;
    {
        let ld = logits.data();
        for (row, (lrow, prow)) in ld.chunks_exact(k).zip(probs.chunks_exact_mut(k)).enumerate()
        {
            let max = lrow.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (p, &l) in prow.iter_mut().zip(lrow) {
                let e = (l - max).exp();
                *p = e;
                denom += e;
            }
            let inv = T::one() / denom;
            for p in prow.iter_mut() {
                *p *= inv;
            }
            let t = targets[row];
            // -log softmax = log(denom) - (l_t - max)
            total += denom.to_f64().ln() - (lrow[t] - max).to_f64();
        }
    }
    let mean = total / n as f64;

    let track = tape.is_recording() && logits.requires_grad();
    let y = Tensor::from_op(vec![1], vec![T::from_f64(mean)], track);
    finite_guard("softmax_cross_entropy", &y)?;
    if track {
        let logits = logits.clone();
        let targets = targets.to_vec();
        let y_h = y.clone();
        tape.push(Box::new(move || {
            let Some(dy) = y_h.grad() else { return };
            let scale = dy[0] / T::from_f64(n as f64);
            let mut dl = probs;
            for (row, prow) in dl.chunks_exact_mut(k).enumerate() {
                prow[targets[row]] -= T::one();
                for p in prow.iter_mut() {
                    *p *= scale;
                }
            }
            logits.accumulate_grad(&dl);
        }));
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let tape = Tape::inactive();
        let logits = Tensor::<f64>::zeros(&[3, 5]);
        let loss = softmax_cross_entropy(&tape, &logits, &[0, 2, 4]).unwrap();
        assert!((loss.item().unwrap() - (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn shift_invariant_and_finite_for_huge_logits() {
        let tape = Tape::inactive();
        let a = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::new(&[1, 3], vec![1001.0, 1002.0, 1003.0]).unwrap();
        let la: f64 = softmax_cross_entropy(&tape, &a, &[1]).unwrap().item().unwrap();
        let lb: f64 = softmax_cross_entropy(&tape, &b, &[1]).unwrap().item().unwrap();
        assert!(la.is_finite() && lb.is_finite());
        assert!((la - lb).abs() < 1e-12);
    }

    #[test]
    fn gradient_is_probs_minus_onehot_over_n() {
        let tape = Tape::new();
        let logits =
            Tensor::param(&[2, 2], vec![0.0f64, 0.0, 1.0, -1.0]).unwrap();
        let loss = softmax_cross_entropy(&tape, &logits, &[0, 1]).unwrap();
        tape.backward(&loss).unwrap();
        let g = logits.grad().unwrap();
        // row 0: p = [.5,.5], target 0 -> [ -.25, .25 ] after /N
        assert!((g[0] + 0.25).abs() < 1e-12);
        assert!((g[1] - 0.25).abs() < 1e-12);
        // row 1: p = [σ(2), 1-σ(2)] with target 1
        let p0 = (1.0f64).exp() / ((1.0f64).exp() + (-1.0f64).exp());
        assert!((g[2] - p0 / 2.0).abs() < 1e-12);
        assert!((g[3] + p0 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn bad_target_rejected() {
        let tape = Tape::inactive();
        let logits = Tensor::<f64>::zeros(&[1, 3]);
        assert!(softmax_cross_entropy(&tape, &logits, &[3]).is_err());
    }
}
