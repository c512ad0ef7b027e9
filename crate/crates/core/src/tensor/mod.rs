//! Minimal differentiable computation layer: n-dimensional arrays, a fixed
//! primitive operator set, and a reverse-mode gradient sweep.
//!
//! `Tensor<T>` is an immutable n-d value (cheap to clone, safe to share).
//! Differentiation happens on a [`Tape`]: one tape per training step, ops
//! record nodes, and a single backward sweep from a scalar loss produces a
//! gradient per `requires_grad` leaf.

mod param;
pub mod resize;
mod tape;

pub use param::{Param, ParamContainer, ParamId};
pub use tape::{GradMap, Tape, Var};

use std::fmt::Debug;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};

/// Element type of tensors. Training defaults to `f32`; gradient checks run
/// at `f64`.
pub trait Elem:
    num_traits::Float + num_traits::FromPrimitive + Default + Debug + Send + Sync + 'static
{
    const DTYPE: &'static str;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Fast exponential for hot loops. Exact (`exp`) at f64 so the 64-bit
    /// gradient checks see true libm values; a vectorizable ~1 ulp
    /// range-reduction polynomial at f32.
    fn fast_exp(self) -> Self;

    /// Row-major general matrix multiply `c = a @ b` with arbitrary strides,
    /// accumulating into `c` scaled by `beta`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    fn to_le_bytes(self) -> Vec<u8>;
    fn from_le_bytes(bytes: &[u8]) -> Self;
    fn byte_width() -> usize;
}

impl Elem for f32 {
    const DTYPE: &'static str = "f32";

    fn of(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn fast_exp(self) -> Self {
        // Cephes-style: split x = n*ln2 + r, evaluate a degree-5 polynomial
        // on r, reassemble the exponent through the float bit layout.
        // Underflows to exactly zero (softmax masking depends on it).
        if self < -87.0 {
            return 0.0;
        }
        let x = self.min(88.7);
        let n = (x * std::f32::consts::LOG2_E).round();
        let r = x - n * 0.693_359_375 - n * -2.121_944_4e-4;
        let p = 1.0
            + r * (1.0
                + r * (0.5 + r * (0.166_666_67 + r * (0.041_666_67 + r * 0.008_333_334))));
        let bits = (((n as i32) + 127) << 23) as u32;
        p * f32::from_bits(bits)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        debug_assert!(c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn to_le_bytes(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_bytes(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().unwrap())
    }
    fn byte_width() -> usize {
        4
    }
}

impl Elem for f64 {
    const DTYPE: &'static str = "f64";

    fn of(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn fast_exp(self) -> Self {
        self.exp()
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        debug_assert!(c.len() >= m * n);
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn to_le_bytes(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_bytes(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().unwrap())
    }
    fn byte_width() -> usize {
        8
    }
}

/// An immutable n-dimensional array. Scalars have an empty shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Elem> Tensor<T> {
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(crate::invalid_arg!(
                "element count {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: Arc::new(vec![value]),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![T::zero(); numel]),
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
        }
    }

    /// Normal(0, std^2) samples.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::of(sample_standard_normal(rng) * std))
            .collect();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    /// One-hot encoding of `indices` with the class axis appended last.
    pub fn one_hot(indices: &[usize], depth: usize, lead_shape: &[usize]) -> Result<Self> {
        let lead: usize = lead_shape.iter().product();
        if indices.len() != lead {
            return Err(crate::invalid_arg!(
                "one_hot: {} indices for lead shape {:?}",
                indices.len(),
                lead_shape
            ));
        }
        let mut data = vec![T::zero(); lead * depth];
        for (i, &c) in indices.iter().enumerate() {
            if c >= depth {
                return Err(crate::invalid_arg!("one_hot: index {c} >= depth {depth}"));
            }
            data[i * depth + c] = T::one();
        }
        let mut shape = lead_shape.to_vec();
        shape.push(depth);
        Self::from_vec(data, &shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable element access; clones the buffer if shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        let v: &mut Vec<T> = Arc::make_mut(&mut self.data);
        v.as_mut_slice()
    }

    pub fn scalar_value(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(crate::invalid_arg!(
                "expected scalar, got shape {:?}",
                self.shape
            ));
        }
        Ok(self.data[0])
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map<F: Fn(T) -> T>(&self, f: F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Root-mean-square of all elements.
    pub fn rms(&self) -> f64 {
        if self.numel() == 0 {
            return 0.0;
        }
        let ss: f64 = self.data.iter().map(|x| x.as_f64() * x.as_f64()).sum();
        (ss / self.numel() as f64).sqrt()
    }
}

/// Box-Muller standard normal draw from a uniform RNG.
pub fn sample_standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_count() {
        assert!(Tensor::<f32>::from_vec(vec![1.0, 2.0, 3.0], &[2, 2]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let t = Tensor::<f64>::scalar(4.0);
        assert!(t.shape().is_empty());
        assert_eq!(t.numel(), 1);
        assert_eq!(t.scalar_value().unwrap(), 4.0);
    }

    #[test]
    fn one_hot_rejects_out_of_range() {
        assert!(Tensor::<f32>::one_hot(&[0, 3], 3, &[2]).is_err());
        let t = Tensor::<f32>::one_hot(&[2, 0], 3, &[2]).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }
}
