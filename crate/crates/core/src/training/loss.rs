use super::{Result, TrainError};
use crate::model::{cross_entropy_rows, softmax_rows};
use crate::tensor::{Scalar, Tensor};

/// `p_i = exp(z_i - max z) / Σ_j exp(z_j - max z)`.
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(TrainError::ShapeMismatch("softmax of an empty row".into()));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(TrainError::NonFiniteInput);
    }
    Ok(softmax_rows(logits, logits.len()))
}

/// `-(1/B) Σ_b ln(clamp(p_b[y_b], 1e-7, 1))` for `B × n` probabilities and
/// one-hot targets.
pub fn categorical_cross_entropy<T: Scalar>(probabilities: &Tensor<T>, onehot: &Tensor<T>) -> Result<f64> {
    match (probabilities.shape(), onehot.shape()) {
        ([b, n], [b2, n2]) if b == b2 && n == n2 && *b > 0 && *n > 0 => {
            Ok(cross_entropy_rows(probabilities.data(), onehot.data(), *n))
        }
        (p, y) => Err(TrainError::ShapeMismatch(format!(
            "probabilities {p:?} vs labels {y:?}"
        ))),
    }
}
