use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Mean categorical cross-entropy of `logits [B,K]` and its gradient
/// `(softmax − onehot) / B`.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let &[b, k] = logits.shape() else {
        return Err(Error::shape("softmax_cross_entropy", "rank", 2, logits.rank()));
    };
    if labels.len() != b {
        return Err(Error::shape("softmax_cross_entropy", "labels", b, labels.len()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let bf = T::from_usize(b).unwrap();
    let mut grad = logits.clone();
    let mut loss = T::zero();
    for (row, &label) in grad.data_mut().chunks_mut(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
        loss = loss + (lse - row[label]);
        for z in row.iter_mut() {
            *z = (*z - lse).exp() / bf;
        }
        row[label] = row[label] - T::one() / bf;
    }
    Ok((loss / bf, grad))
}
