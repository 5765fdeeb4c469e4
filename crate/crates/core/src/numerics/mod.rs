//! Dense tensors, reverse-mode differentiation and seeded randomness.

pub mod linalg;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use rng::{fnv1a, splitmix64, Rng};
pub use scalar::Scalar;
pub use tape::{AttentionShape, CustomOp, Gradients, Tape, Var};
pub use tensor::{ParamKey, ParamStore, Tensor};

/// Central finite-difference gradient of `f` at `x` with step `h`.
///
/// Used by the gradient-check tests; kept here so every module checks its
/// ops against the same routine.
pub fn finite_difference<T: Scalar>(x: &[T], h: T, mut f: impl FnMut(&[T]) -> T) -> Vec<T> {
    let mut probe = x.to_vec();
    let two = T::one() + T::one();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (two * h)
        })
        .collect()
}

/// Largest relative difference between two gradient vectors, with the
/// denominator floored at `floor` so entries near zero compare absolutely.
pub fn max_relative_error<T: Scalar>(analytic: &[T], numeric: &[T], floor: T) -> T {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(T::zero(), T::max)
}
