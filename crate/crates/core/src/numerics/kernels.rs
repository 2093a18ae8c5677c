//! Value-level kernels shared by the tape's forward pass and by callers that
//! only need numbers (metrics, export, tests).

use crate::error::{MianError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(MianError::Empty("softmax"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(MianError::NonFinite("softmax input".into()));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out, None);
    Ok(out)
}

/// Softmax over the positions where `valid` is true; the rest become exactly zero.
/// Callers guarantee at least one valid position.
pub(crate) fn softmax_in_place<T: Scalar>(v: &mut [T], valid: Option<&[bool]>) {
    let keep = |i: usize| valid.is_none_or(|m| m[i]);
    let mut max = T::neg_infinity();
    for (i, &x) in v.iter().enumerate() {
        if keep(i) && x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for (i, x) in v.iter_mut().enumerate() {
        if keep(i) {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = T::zero();
        }
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta` with the population variance of `x`.
///
/// The scale `gamma` here is the normalization gain; it is unrelated to the
/// attention score function that shares the same letter in the model's
/// notation.
pub fn layer_norm<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], eps: T) -> Result<Vec<T>> {
    if x.len() != gamma.len() || x.len() != beta.len() {
        return Err(MianError::ShapeMismatch {
            op: "layer_norm",
            left: (1, x.len()),
            right: (gamma.len(), beta.len()),
        });
    }
    if x.is_empty() {
        return Err(MianError::Empty("layer_norm"));
    }
    if eps <= T::zero() {
        return Err(MianError::Config("layer_norm eps must be positive".into()));
    }
    let mut out = vec![T::zero(); x.len()];
    layer_norm_row(x, gamma, beta, eps, &mut out);
    Ok(out)
}

/// Writes the normalized row into `out` and returns `1/sqrt(var + eps)`.
pub(crate) fn layer_norm_row<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], eps: T, out: &mut [T]) -> T {
    let n = T::from_usize(x.len()).unwrap();
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = gamma[i] * ((x[i] - mean) * inv_std) + beta[i];
    }
    inv_std
}

pub fn activation<T: Scalar>(x: &[T], kind: Activation) -> Vec<T> {
    x.iter().map(|&v| activate(v, kind)).collect()
}

#[inline]
pub(crate) fn activate<T: Scalar>(v: T, kind: Activation) -> T {
    match kind {
        Activation::Relu => v.max(T::zero()),
        Activation::Tanh => v.tanh(),
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `ln(exp(a) + exp(b))` without overflow.
#[inline]
pub(crate) fn log_sum_exp2<T: Scalar>(a: T, b: T) -> T {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}
