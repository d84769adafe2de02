use crate::tensor::{Scalar, COSINE_NORM_EPS};
use crate::{Error, Result};

/// `1 - cos(a, b)`, or `None` when either vector has norm at or below
/// [`COSINE_NORM_EPS`].
pub fn cosine_distance<T: Scalar>(a: &[T], b: &[T]) -> Option<T> {
    let na = a.iter().map(|&v| v * v).sum::<T>().sqrt();
    let nb = b.iter().map(|&v| v * v).sum::<T>().sqrt();
    let eps = T::from_f64(COSINE_NORM_EPS);
    if na <= eps || nb <= eps {
        return None;
    }
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    Some(T::one() - dot / (na * nb))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<T> {
    pub loss: T,
    pub distances: Vec<T>,
    /// Patches scored with the neutral distance 1 because of a zero norm.
    pub degenerate: usize,
}

/// Mean cosine distance between predicted and target patches, both given
/// as flat row-major `[masked, dim]` arrays.
pub fn tobo_loss<T: Scalar>(pred: &[T], target: &[T], dim: usize) -> Result<LossValue<T>> {
    if dim == 0 || pred.is_empty() {
        return Err(Error::Mask("loss over an empty masked set".into()));
    }
    if pred.len() != target.len() || !pred.len().is_multiple_of(dim) {
        return Err(Error::Input(format!(
            "{} predicted and {} target values for patch dimension {dim}",
            pred.len(),
            target.len()
        )));
    }
    let mut degenerate = 0;
    let distances: Vec<T> = pred
        .chunks(dim)
        .zip(target.chunks(dim))
        .map(|(a, b)| {
            cosine_distance(a, b).unwrap_or_else(|| {
                degenerate += 1;
                T::one()
            })
        })
        .collect();
    let loss = distances.iter().copied().sum::<T>() / T::from_f64(distances.len() as f64);
    Ok(LossValue {
        loss,
        distances,
        degenerate,
    })
}
