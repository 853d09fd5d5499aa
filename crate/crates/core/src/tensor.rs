//! Dense row-major tensors over f32/f64.
//!
//! `Tensor` is plain storage: parameters, activations snapshots, dataset
//! images. Differentiable computation happens on [`crate::tape::Tape`], which
//! copies tensor data into tape nodes. The element type is generic so the
//! same forward code can run in f64 when a finite-difference oracle needs a
//! low-noise shadow evaluation.

use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Float element of a tensor. Implemented for `f32` (production) and `f64`
/// (shadow evaluation in gradient checks).
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + Default
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn is_nan(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn maximum(self, other: Self) -> Self {
                self.max(other)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn is_nan(self) -> bool {
                <$t>::is_nan(self)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Dense n-dimensional array, row-major. Carries an optional gradient buffer
/// of the same shape plus a `requires_grad` flag consumed when the tensor is
/// registered on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "extents must be positive".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("product of extents != data length {}", data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::ZERO; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::ONE)
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    /// Truncated normal init: N(0, std²) resampled while |x| > 2·std.
    pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut x = rng.normal() * std;
            while x.abs() > 2.0 * std {
                x = rng.normal() * std;
            }
            data.push(T::from_f64(x));
        }
        Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        match self.grad.as_mut() {
            Some(g) => g.iter_mut().for_each(|v| *v = T::ZERO),
            None => self.grad = Some(vec![T::ZERO; self.data.len()]),
        }
    }

    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                left: self.shape.clone(),
                right: vec![delta.len()],
            });
        }
        let g = self
            .grad
            .get_or_insert_with(|| vec![T::ZERO; self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += *di;
        }
        Ok(())
    }

    /// Row view for rank-2 tensors.
    pub fn row(&self, r: usize) -> &[T] {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn at2(&self, r: usize, c: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Tensor<f32> {
    /// Order-sensitive 64-bit fingerprint of shape and raw little-endian
    /// bytes. Used by the freeze invariants to detect any mutation.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut absorb = |w: u64| {
            h ^= w;
            h = crate::rng::mix64(h.wrapping_mul(0x100_0000_01b3));
        };
        absorb(self.shape.len() as u64);
        for &d in &self.shape {
            absorb(d as u64);
        }
        for v in &self.data {
            absorb(v.to_bits() as u64);
        }
        h
    }
}

/// Inverted dropout mask: entries are 0 with probability `rate`, otherwise
/// 1/(1−rate), so the expectation of each entry is 1.
pub fn dropout_mask<T: Scalar>(shape: &[usize], rate: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    let numel: usize = shape.iter().product();
    if rate == 0.0 {
        return Ok(Tensor::ones(shape));
    }
    let keep_scale = T::from_f64(1.0 / (1.0 - rate));
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        if rng.next_f64() < rate {
            data.push(T::ZERO);
        } else {
            data.push(keep_scale);
        }
    }
    Tensor::from_vec(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_shapes() {
        assert!(Tensor::<f32>::from_vec(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::<f32>::zeros(&[3]).with_grad();
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_mask_rate_zero_is_ones() {
        let mut rng = Rng::new(7);
        let m: Tensor<f32> = dropout_mask(&[4, 4], 0.0, &mut rng).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
        // rate 0 must not consume rng state
        assert_eq!(rng.next_u64(), Rng::new(7).next_u64());
    }

    #[test]
    fn dropout_mask_rejects_rate_one() {
        let mut rng = Rng::new(7);
        assert!(dropout_mask::<f32>(&[2], 1.0, &mut rng).is_err());
        assert!(dropout_mask::<f32>(&[2], -0.1, &mut rng).is_err());
    }

    #[test]
    fn dropout_mask_mean_near_one() {
        let mut rng = Rng::new(42);
        let m: Tensor<f32> = dropout_mask(&[100_000], 0.5, &mut rng).unwrap();
        let mean = m.data().iter().map(|&v| v as f64).sum::<f64>() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn fingerprint_detects_single_bit_change() {
        let mut rng = Rng::new(3);
        let t = Tensor::<f32>::trunc_normal(&[8, 8], 0.02, &mut rng);
        let fp = t.fingerprint();
        let mut t2 = t.clone();
        t2.data_mut()[17] += 1e-7;
        assert_ne!(fp, t2.fingerprint());
        assert_eq!(fp, t.fingerprint());
    }
}
