//! Small helpers on flat parameter slices.

use crate::scalar::Scalar;

pub fn l2_norm<S: Scalar>(v: &[S]) -> S {
    v.iter().map(|&x| x * x).sum::<S>().sqrt()
}

pub fn linf_norm<S: Scalar>(v: &[S]) -> S {
    v.iter().fold(S::zero(), |m, &x| m.max(x.abs()))
}

/// `out = a + b` element-wise.
pub fn add<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

/// `a += scale * b` in place.
pub fn axpy<S: Scalar>(a: &mut [S], scale: S, b: &[S]) {
    for (x, &y) in a.iter_mut().zip(b) {
        *x += scale * y;
    }
}

/// Signum with `sign(0) = 0`.
pub fn sign<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        S::one()
    } else if x < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

pub fn max_abs_diff<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter()
        .zip(b)
        .fold(S::zero(), |m, (&x, &y)| m.max((x - y).abs()))
}
