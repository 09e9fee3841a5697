//! Softmax utilities and cross-entropy over logits.

use crate::nd::NdArray;
use crate::scalar::Scalar;

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(logits: &NdArray<T>) -> NdArray<T> {
    assert_eq!(logits.shape().len(), 2, "softmax_rows needs [B, K]");
    let mut out = logits.clone();
    let k = logits.shape()[1];
    for i in 0..logits.shape()[0] {
        let row = &mut out.data_mut()[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_rows<T: Scalar>(logits: &NdArray<T>) -> NdArray<T> {
    assert_eq!(logits.shape().len(), 2, "log_softmax_rows needs [B, K]");
    let mut out = logits.clone();
    let k = logits.shape()[1];
    for i in 0..logits.shape()[0] {
        let row = &mut out.data_mut()[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for v in row.iter_mut() {
            *v = *v - lse;
        }
    }
    out
}

/// Mean cross-entropy between row softmaxes and integer targets.
///
/// Returns the scalar loss and the gradient with respect to the logits,
/// `(softmax - onehot) / B`. Each gradient row sums to zero.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &NdArray<T>,
    targets: &[usize],
) -> (T, NdArray<T>) {
    assert_eq!(logits.shape().len(), 2, "softmax_cross_entropy needs [B, K]");
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    assert_eq!(targets.len(), b, "one target per row");
    let log_probs = log_softmax_rows(logits);
    let mut loss = T::zero();
    let mut grad = softmax_rows(logits);
    let inv_b = T::one() / T::from_f64_lossy(b as f64);
    for (i, &t) in targets.iter().enumerate() {
        assert!(t < k, "target {t} out of range for {k} classes");
        loss -= log_probs.data()[i * k + t];
        let row = &mut grad.data_mut()[i * k..(i + 1) * k];
        row[t] -= T::one();
        for v in row.iter_mut() {
            *v = *v * inv_b;
        }
    }
    (loss * inv_b, grad)
}

/// Row-wise entropy of the softmax distribution, `-sum p log p`.
pub fn softmax_entropy_rows<T: Scalar>(logits: &NdArray<T>) -> Vec<T> {
    let probs = softmax_rows(logits);
    let logp = log_softmax_rows(logits);
    let k = logits.shape()[1];
    (0..logits.shape()[0])
        .map(|i| {
            let mut h = T::zero();
            for j in 0..k {
                let p = probs.data()[i * k + j];
                if p > T::zero() {
                    h -= p * logp.data()[i * k + j];
                }
            }
            h
        })
        .collect()
}
