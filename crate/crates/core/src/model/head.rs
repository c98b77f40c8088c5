//! Matching Networks head: query-normalized cosine and the softmax-weighted
//! vote over support labels.

use crate::autodiff::{cosine_u_parts, softmax_row, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineU<T> {
    pub value: T,
    /// The query norm fell below the floor and was clamped.
    pub clamped: bool,
}

/// `query · support / max(‖query‖, 1e-8)`. Only the query norm divides.
pub fn cosine_u<T: Scalar>(query: &[T], support: &[T]) -> Result<CosineU<T>> {
    if query.len() != support.len() {
        return Err(Error::Shape(format!(
            "cosine operands differ in length: {} vs {}",
            query.len(),
            support.len()
        )));
    }
    let (value, _, clamped) = cosine_u_parts(query, support);
    Ok(CosineU { value, clamped })
}

fn check_labels(labels: &[usize], way: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= way) {
        Some(&label) => Err(Error::LabelOutOfRange { label, way }),
        None => Ok(()),
    }
}

/// Class distribution for one query: softmax over its similarities to the
/// support examples, summed per support label.
pub fn matching_probabilities<T: Scalar>(similarities: &[T], support_labels: &[usize], way: usize) -> Result<Vec<T>> {
    if similarities.len() != support_labels.len() {
        return Err(Error::Shape(format!(
            "{} similarities for {} support labels",
            similarities.len(),
            support_labels.len()
        )));
    }
    check_labels(support_labels, way)?;
    let weights = softmax_row(similarities);
    let mut probs = vec![T::zero(); way];
    for (w, &label) in weights.into_iter().zip(support_labels) {
        probs[label] = probs[label] + w;
    }
    Ok(probs)
}

/// `[S, way]` one-hot matrix of support labels.
pub(crate) fn one_hot<T: Scalar>(labels: &[usize], way: usize) -> Result<Tensor<T>> {
    check_labels(labels, way)?;
    let mut data = vec![T::zero(); labels.len() * way];
    for (i, &l) in labels.iter().enumerate() {
        data[i * way + l] = T::one();
    }
    Tensor::new([labels.len(), way], data)
}

/// Tape version over a `[Q, S]` similarity matrix, giving `[Q, way]`.
pub(crate) fn vote<T: Scalar>(tape: &mut Tape<T>, similarities: Var, support_labels: &[usize], way: usize) -> Result<Var> {
    let onehot = tape.constant(one_hot(support_labels, way)?);
    let weights = tape.softmax(similarities)?;
    tape.matmul(weights, onehot)
}
