//! Dense row-major tensors over `f32` (training) or `f64` (gradient checks).

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// Lower clamp applied before every logarithm in the cross-entropy terms.
pub const LOG_EPS: f64 = 1e-7;

/// Floating point element type of a [`Tensor`].
pub trait Element:
    Float + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * a·b + beta * c` over strided row/column layouts.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m×k`, `k×n` and `m×n`
    /// matrices that do not overlap `c`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Element for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Element for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Initial contents for [`Tensor::new`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    Zeros,
    Constant(f64),
    Uniform { lo: f64, hi: f64, seed: u64 },
    Normal { mean: f64, std: f64, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Scale(f64),
    /// `ln(clamp(x, LOG_EPS, 1 - LOG_EPS))`.
    LogClamped,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn check_extents(shape: &[usize]) -> Result<usize> {
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(Error::InvalidShape(format!(
            "extent {pos} of {shape:?} is zero"
        )));
    }
    Ok(shape.iter().product())
}

#[inline]
pub(crate) fn log_clamped<T: Element>(x: T) -> T {
    let lo = T::of(LOG_EPS);
    let hi = T::one() - lo;
    // comparisons keep NaN, unlike max/min
    let c = if x < lo { lo } else if x > hi { hi } else { x };
    c.ln()
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], fill: Fill) -> Result<Self> {
        let len = check_extents(shape)?;
        let data = match fill {
            Fill::Zeros => vec![T::zero(); len],
            Fill::Constant(c) => vec![T::of(c); len],
            Fill::Uniform { lo, hi, seed } => {
                if !(lo < hi) {
                    return Err(Error::Contract(format!("uniform range [{lo}, {hi}) is empty")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let dist = Uniform::new(lo, hi).map_err(|e| Error::Contract(e.to_string()))?;
                (0..len).map(|_| T::of(dist.sample(&mut rng))).collect()
            }
            Fill::Normal { mean, std, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let dist = Normal::new(mean, std).map_err(|e| Error::Contract(e.to_string()))?;
                (0..len).map(|_| T::of(dist.sample(&mut rng))).collect()
            }
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, Fill::Zeros)
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_extents(shape)?;
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_extents(shape)?;
        if len != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn zip_map(&self, other: &Tensor<T>, op: BinaryOp) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{op:?} of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let f: fn(T, T) -> T = match op {
            BinaryOp::Add => |a, b| a + b,
            BinaryOp::Sub => |a, b| a - b,
            BinaryOp::Mul => |a, b| a * b,
        };
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn map(&self, op: UnaryOp) -> Self {
        let data = match op {
            UnaryOp::Scale(k) => {
                let k = T::of(k);
                self.data.iter().map(|&v| v * k).collect()
            }
            UnaryOp::LogClamped => self.data.iter().map(|&v| log_clamped(v)).collect(),
            UnaryOp::Square => self.data.iter().map(|&v| v * v).collect(),
        };
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn reduce(&self, mode: Reduce) -> Tensor<T> {
        let sum: T = self.data.iter().copied().sum();
        match mode {
            Reduce::Sum => Tensor::scalar(sum),
            Reduce::Mean => Tensor::scalar(sum / T::of(self.data.len() as f64)),
        }
    }

    /// Joins tensors that agree on every extent except `axis`.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Self> {
        let shapes: Vec<&[usize]> = parts.iter().map(|p| p.shape()).collect();
        let out_shape = concat_shape(&shapes, axis)?;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for part in parts {
                let block = part.shape[axis] * inner;
                data.extend_from_slice(&part.data[o * block..(o + 1) * block]);
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Inverse of [`Tensor::concat`]: cuts `axis` into consecutive pieces.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Self>> {
        if axis >= self.rank() || sizes.iter().sum::<usize>() != self.shape[axis] {
            return Err(Error::Shape(format!(
                "cannot split {:?} along axis {axis} into {sizes:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis] * inner;
        let mut offset = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &size in sizes {
            let mut shape = self.shape.clone();
            shape[axis] = size;
            check_extents(&shape)?;
            let mut data = Vec::with_capacity(outer * size * inner);
            for o in 0..outer {
                let start = o * full + offset * inner;
                data.extend_from_slice(&self.data[start..start + size * inner]);
            }
            out.push(Tensor { shape, data });
            offset += size;
        }
        Ok(out)
    }
}

pub(crate) fn concat_shape(shapes: &[&[usize]], axis: usize) -> Result<Vec<usize>> {
    let first = shapes
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    if axis >= first.len() {
        return Err(Error::Shape(format!(
            "concat axis {axis} out of range for rank {}",
            first.len()
        )));
    }
    let mut out = first.to_vec();
    out[axis] = 0;
    for shape in shapes {
        let compatible = shape.len() == first.len()
            && shape
                .iter()
                .zip(first.iter())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::Shape(format!(
                "concat along axis {axis}: {shape:?} incompatible with {first:?}"
            )));
        }
        out[axis] += shape[axis];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_and_constant_fills() {
        let z = Tensor::<f32>::new(&[2, 3], Fill::Zeros).unwrap();
        assert_eq!(z.len(), 6);
        assert!(z.data().iter().all(|&v| v == 0.0));
        let c = Tensor::<f32>::new(&[4], Fill::Constant(1.5)).unwrap();
        assert_eq!(c.data(), &[1.5, 1.5, 1.5, 1.5]);
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(matches!(
            Tensor::<f32>::new(&[3, 0], Fill::Zeros),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn seeded_fills_are_reproducible() {
        let fill = Fill::Uniform {
            lo: 0.0,
            hi: 1.0,
            seed: 7,
        };
        let a = Tensor::<f32>::new(&[1000], fill).unwrap();
        let b = Tensor::<f32>::new(&[1000], fill).unwrap();
        assert_eq!(a.data(), b.data());
        let n = Fill::Normal {
            mean: 0.0,
            std: 1.0,
            seed: 3,
        };
        assert_eq!(
            Tensor::<f64>::new(&[64], n).unwrap(),
            Tensor::<f64>::new(&[64], n).unwrap()
        );
    }

    #[test]
    fn uniform_mean_is_centered() {
        let t = Tensor::<f64>::new(
            &[1_000_000],
            Fill::Uniform {
                lo: 0.0,
                hi: 1.0,
                seed: 11,
            },
        )
        .unwrap();
        let mean = t.reduce(Reduce::Mean).item().unwrap();
        assert!((0.49..=0.51).contains(&mean), "mean {mean}");
    }

    #[test]
    fn arithmetic() {
        let a = Tensor::<f32>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.zip_map(&b, BinaryOp::Add).unwrap().data(), &[4.0, 6.0]);
        let z = Tensor::<f32>::zeros(&[2]).unwrap();
        assert_eq!(a.zip_map(&z, BinaryOp::Mul).unwrap(), z);
        let c = Tensor::<f32>::zeros(&[3]).unwrap();
        assert!(matches!(a.zip_map(&c, BinaryOp::Sub), Err(Error::Shape(_))));
    }

    #[test]
    fn log_clamp_convention() {
        let t = Tensor::<f64>::from_vec(&[1], vec![0.0]).unwrap();
        let v = t.map(UnaryOp::LogClamped).item().unwrap();
        assert!((v - (1e-7f64).ln()).abs() < 1e-12);
        assert!((v + 16.118).abs() < 1e-3);
    }

    #[test]
    fn reductions() {
        let t = Tensor::<f32>::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.reduce(Reduce::Sum).item().unwrap(), 6.0);
        let c = Tensor::<f32>::new(&[5, 7], Fill::Constant(2.5)).unwrap();
        assert_eq!(c.reduce(Reduce::Mean).item().unwrap(), 2.5);
    }

    #[test]
    fn concat_shapes() {
        let a = Tensor::<f32>::zeros(&[8, 4, 4, 4]).unwrap();
        let b = Tensor::<f32>::zeros(&[8, 4, 4, 4]).unwrap();
        let c = Tensor::concat(&[&a, &b], 0).unwrap();
        assert_eq!(c.shape(), &[16, 4, 4, 4]);
        assert_eq!(Tensor::concat(&[&a], 0).unwrap(), a);
        let bad = Tensor::<f32>::zeros(&[8, 4, 4, 5]).unwrap();
        assert!(Tensor::concat(&[&a, &bad], 0).is_err());
    }
}
