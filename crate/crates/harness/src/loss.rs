//! Softmax cross-entropy over a logits batch.

use rre_core::tensor::Tensor;

/// Mean cross-entropy of `[B, K]` logits against integer targets, plus the
/// gradient with respect to the logits (already divided by the batch size).
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> (f64, Tensor) {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    assert_eq!(b, targets.len(), "one target per sample");
    let mut grad = Tensor::zeros(&[b, k]);
    let mut loss = 0.0;
    for i in 0..b {
        let row = &logits.data()[i * k..(i + 1) * k];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let mut z = 0.0;
        for &v in row {
            z += (v - m).exp();
        }
        let log_z = m + z.ln();
        loss += log_z - row[targets[i]];
        let g = &mut grad.data_mut()[i * k..(i + 1) * k];
        for (j, &v) in row.iter().enumerate() {
            g[j] = ((v - log_z).exp() - if j == targets[i] { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    (loss / b as f64, grad)
}

/// Number of rows whose argmax equals the target.
pub fn count_correct(logits: &Tensor, targets: &[usize]) -> usize {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let mut correct = 0;
    for i in 0..b {
        let row = &logits.data()[i * k..(i + 1) * k];
        let mut best = 0usize;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == targets[i] {
            correct += 1;
        }
    }
    correct
}

#[cfg(test)]
mod tests {
    use super::*;
    use rre_core::grad::finite_difference_grad;
    use rre_core::rng::Rng;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::zeros(&[2, 4]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 3]);
        assert!((loss - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(81);
        let logits =
            Tensor::from_vec(&[3, 5], (0..15).map(|_| rng.normal()).collect()).unwrap();
        let targets = [1usize, 4, 0];
        let (_, analytic) = softmax_cross_entropy(&logits, &targets);
        let mut f = |t: &Tensor| softmax_cross_entropy(t, &targets).0;
        let numeric = finite_difference_grad(&mut f, &logits, 1e-6);
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!((a - n).abs() < 1e-8, "{a} vs {n}");
        }
    }

    #[test]
    fn count_correct_counts() {
        let logits = Tensor::from_vec(&[2, 3], vec![1.0, 5.0, 2.0, 0.0, -1.0, 3.0]).unwrap();
        assert_eq!(count_correct(&logits, &[1, 2]), 2);
        assert_eq!(count_correct(&logits, &[0, 2]), 1);
    }
}
