//! Scalar abstraction over the two float widths the kernel runs at:
//! `f32` for training, `f64` for finite-difference gradient checks.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

pub trait Real:
    num_traits::Float + AddAssign + SubAssign + MulAssign + Debug + Default + Send + Sync + 'static
{
    fn erf(self) -> Self;
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn from_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Dot product with eight independent accumulators. The fixed lane layout
/// keeps the reduction order identical run to run while letting the
/// compiler vectorize.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for (ca, cb) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        for lane in 0..8 {
            acc[lane] = acc[lane] + ca[lane] * cb[lane];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in a[chunks * 8..].iter().zip(&b[chunks * 8..]) {
        tail = tail + x * y;
    }
    let head = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    head + tail
}

/// `out[i] += scale * x[i]`.
pub fn axpy<T: Real>(out: &mut [T], scale: T, x: &[T]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, &xi) in out.iter_mut().zip(x) {
        *o += scale * xi;
    }
}
