//! Dense row-major tensors over 64-bit reals.
//!
//! The tensor is the single data carrier of the crate: features, weights
//! and gradients are all `Tensor`s. Layout is row-major with between one
//! and four axes; feature maps use the axis order (channels, height,
//! width). Values are f64 throughout so gradient checks can run at tight
//! tolerances.

use crate::error::{DdsmError, Result};

pub const MAX_AXES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_AXES {
            return Err(DdsmError::Shape(format!(
                "tensor must have 1..={MAX_AXES} axes, got {}",
                shape.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(DdsmError::Shape(format!("zero extent in shape {shape:?}")));
        }
        let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        match count {
            Some(n) if n == data.len() => Ok(Self { shape, data }),
            Some(n) => Err(DdsmError::Shape(format!(
                "shape {shape:?} wants {n} elements, data has {}",
                data.len()
            ))),
            None => Err(DdsmError::Shape(format!("shape {shape:?} overflows"))),
        }
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let count = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; count])
    }

    pub fn constant(shape: &[usize], value: f64) -> Result<Self> {
        let count = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; count])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let count = shape.iter().product();
        Self::new(shape.to_vec(), (0..count).map(|i| f(i)).collect())
    }

    /// Every element drawn uniformly from [lo, hi), in row-major order.
    pub fn uniform(shape: &[usize], rng: &mut crate::rng::Rng, lo: f64, hi: f64) -> Result<Self> {
        Self::from_fn(shape, |_| rng.uniform(lo, hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same data under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    // Flat offsets for the common layouts. Callers index with the axis
    // order fixed by the global (C, H, W) convention.

    #[inline]
    pub fn idx2(&self, i: usize, j: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        i * self.shape[1] + j
    }

    #[inline]
    pub fn idx3(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (c * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn idx4(&self, c: usize, y: usize, x: usize, n: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((c * self.shape[1] + y) * self.shape[2] + x) * self.shape[3] + n
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[self.idx2(i, j)]
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx3(c, y, x)]
    }

    #[inline]
    pub fn at4(&self, c: usize, y: usize, x: usize, n: usize) -> f64 {
        self.data[self.idx4(c, y, x, n)]
    }

    #[inline]
    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx2(i, j);
        self.data[k] = v;
    }

    #[inline]
    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let k = self.idx3(c, y, x);
        self.data[k] = v;
    }

    #[inline]
    pub fn set4(&mut self, c: usize, y: usize, x: usize, n: usize, v: f64) {
        let k = self.idx4(c, y, x, n);
        self.data[k] = v;
    }

    #[inline]
    pub fn add3(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let k = self.idx3(c, y, x);
        self.data[k] += v;
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// Elementwise difference; shapes must match.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn scaled(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// In-place `self += other`; shapes must match.
    pub fn accumulate(&mut self, other: &Tensor) -> Result<()> {
        self.check_same_shape(other, "accumulate")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Concatenate along the channel axis; both tensors must be (C, H, W).
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 3 || b.len() != 3 || a[1..] != b[1..] {
            return Err(DdsmError::Shape(format!(
                "concat_channels wants (C,H,W) tensors with equal extents, got {a:?} and {b:?}"
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor::new(vec![a[0] + b[0], a[1], a[2]], data)
    }

    /// Split a (C, H, W) tensor into its first `c0` and remaining channels.
    pub fn split_channels(&self, c0: usize) -> Result<(Tensor, Tensor)> {
        let s = self.shape();
        if s.len() != 3 || c0 == 0 || c0 >= s[0] {
            return Err(DdsmError::Shape(format!(
                "split_channels at {c0} does not fit shape {s:?}"
            )));
        }
        let plane = s[1] * s[2];
        let head = Tensor::new(vec![c0, s[1], s[2]], self.data[..c0 * plane].to_vec())?;
        let tail = Tensor::new(
            vec![s[0] - c0, s[1], s[2]],
            self.data[c0 * plane..].to_vec(),
        )?;
        Ok((head, tail))
    }

    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(DdsmError::Shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn row_major_indexing() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64).unwrap();
        assert_eq!(t.at3(0, 0, 0), 0.0);
        assert_eq!(t.at3(0, 0, 3), 3.0);
        assert_eq!(t.at3(0, 2, 1), 9.0);
        assert_eq!(t.at3(1, 0, 0), 12.0);
    }

    #[test]
    fn concat_and_split_round_trip() {
        let a = Tensor::from_fn(&[2, 2, 2], |i| i as f64).unwrap();
        let b = Tensor::from_fn(&[1, 2, 2], |i| 100.0 + i as f64).unwrap();
        let cat = a.concat_channels(&b).unwrap();
        assert_eq!(cat.shape(), &[3, 2, 2]);
        let (head, tail) = cat.split_channels(2).unwrap();
        assert_eq!(head, a);
        assert_eq!(tail, b);
    }

    #[test]
    fn accumulate_adds_elementwise() {
        let mut a = Tensor::constant(&[3], 1.0).unwrap();
        let b = Tensor::from_fn(&[3], |i| i as f64).unwrap();
        a.accumulate(&b).unwrap();
        assert_eq!(a.data(), &[1.0, 2.0, 3.0]);
    }
}
