//! Dense row-major tensors of `f32` or `f64`.
//!
//! [`Tensor`] is a plain value; differentiation lives in [`crate::autograd`],
//! which wraps tensors in graph nodes.

use std::fmt::Debug;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar type usable in tensors: `f32` for training and inference, `f64`
/// for gradient checking.
pub trait Element:
    Float + Default + Debug + AddAssign + SubAssign + MulAssign + DivAssign + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;

    /// `c = alpha * a · b + beta * c` with explicit row/column strides.
    /// Slice lengths are checked against the strides before the kernel runs.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );
}

fn extent(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_element {
    ($t:ty, $kernel:ident) => {
        impl Element for $t {
            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                assert!(a.len() >= extent(m, k, rsa, csa), "gemm: lhs too short");
                assert!(b.len() >= extent(k, n, rsb, csb), "gemm: rhs too short");
                assert!(c.len() >= extent(m, n, rsc, csc), "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index the kernel touches is bounded by the
                // extents asserted above.
                unsafe {
                    matrixmultiply::$kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    );
                }
            }
        }
    };
}

impl_element!(f32, sgemm);
impl_element!(f64, dgemm);

/// N-dimensional dense array. 4-D values are laid out as (batch, channels,
/// height, width).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::from_vec", "element count", n, data.len()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Converts from `f64` values, e.g. literals in tests.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::of(v)).collect())
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

    /// Returns (batch, channels, height, width) or a shape error naming `op`.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::shape(op, "rank", "4 (B,C,H,W)", &self.shape)),
        }
    }

    pub fn at4(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        let (_, cs, hs, ws) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((b * cs + c) * hs + y) * ws + x]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", "element count", self.data.len(), n));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Integer label maps, shaped (H, W) for one sample or (B, H, W) for a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(shape: &[usize], data: Vec<u8>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || !(2..=3).contains(&shape.len()) {
            return Err(Error::shape(
                "LabelMap::new",
                "shape",
                "(H,W) or (B,H,W) matching data length",
                (shape, data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            shape: vec![height, width],
            data: vec![label; height * width],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn height(&self) -> usize {
        self.shape[self.shape.len() - 2]
    }

    pub fn width(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn batch(&self) -> usize {
        if self.shape.len() == 3 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width() + x]
    }

    /// Stacks equally-sized (H, W) maps into one (B, H, W) map.
    pub fn stack(maps: &[&LabelMap]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Config("cannot stack zero label maps".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(maps.len() * h * w);
        for m in maps {
            if m.height() != h || m.width() != w || m.shape.len() != 2 {
                return Err(Error::shape("LabelMap::stack", "map", [h, w], m.shape()));
            }
            data.extend_from_slice(&m.data);
        }
        Self::new(&[maps.len(), h, w], data)
    }

    /// Checks every label is below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().position(|&v| v as usize >= num_classes) {
            Some(pixel) => Err(Error::InvalidLabel {
                pixel,
                value: self.data[pixel],
                num_classes,
            }),
            None => Ok(()),
        }
    }
}

/// Per-pixel argmax over the channel dimension of (B, C, H, W) scores.
pub fn argmax_channels<T: Element>(scores: &Tensor<T>) -> Result<LabelMap> {
    let (b, c, h, w) = scores.dims4("argmax_channels")?;
    if c > 256 {
        return Err(Error::Config(format!("{c} classes exceed the 8-bit label range")));
    }
    let hw = h * w;
    let mut out = vec![0u8; b * hw];
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let mut best = 0;
            let mut best_v = scores.data()[base + p];
            for ci in 1..c {
                let v = scores.data()[base + ci * hw + p];
                if v > best_v {
                    best_v = v;
                    best = ci;
                }
            }
            out[bi * hw + p] = best as u8;
        }
    }
    if b == 1 {
        LabelMap::new(&[h, w], out)
    } else {
        LabelMap::new(&[b, h, w], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    fn gemm_matches_naive() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, 1.0, &a, 3, 1, &b, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        let t = Tensor::<f32>::from_f64(&[1, 2, 1, 2], &[1.0, 0.0, 1.0, 2.0]).unwrap();
        let m = argmax_channels(&t).unwrap();
        assert_eq!(m.data(), &[0, 1]);
    }

    #[test]
    fn label_validation_names_pixel() {
        let m = LabelMap::new(&[1, 3], vec![0, 2, 3]).unwrap();
        match m.validate(3) {
            Err(Error::InvalidLabel { pixel, value, .. }) => assert_eq!((pixel, value), (2, 3)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
