//! Dense rank-4 tensors in `(batch, channel, height, width)` order.

use std::fmt;

use crate::error::{Error, Result};

/// Row-major rank-4 array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl fmt::Debug for Tensor4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor4{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor4 {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor4 {
            shape: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    /// A `(1, 1, 1, n)` row vector.
    pub fn row(values: &[f64]) -> Self {
        Tensor4 {
            shape: [1, 1, 1, values.len()],
            data: values.to_vec(),
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for b in 0..shape[0] {
            for c in 0..shape[1] {
                for y in 0..shape[2] {
                    for x in 0..shape[3] {
                        data.push(f([b, c, y, x]));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, idx: [usize; 4]) -> usize {
        let [_, c, h, w] = self.shape;
        ((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> f64 {
        self.data[self.index(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], value: f64) {
        let i = self.index(idx);
        self.data[i] = value;
    }

    /// Size of one `(height, width)` plane.
    #[inline]
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    /// Contiguous slice for one `(batch, channel)` plane.
    pub fn plane_slice(&self, b: usize, c: usize) -> &[f64] {
        let p = self.plane();
        let start = (b * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_slice_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let p = self.plane();
        let start = (b * self.shape[1] + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn reshape(mut self, shape: [usize; 4]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[&Tensor4]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let [b, _, h, w] = first.shape;
        let mut c_total = 0;
        for p in parts {
            let [pb, pc, ph, pw] = p.shape;
            if (pb, ph, pw) != (b, h, w) {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", first.shape, p.shape),
                ));
            }
            c_total += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * c_total * plane);
        for bi in 0..b {
            for p in parts {
                let pc = p.shape[1];
                let start = bi * pc * plane;
                data.extend_from_slice(&p.data[start..start + pc * plane]);
            }
        }
        Ok(Tensor4 {
            shape: [b, c_total, h, w],
            data,
        })
    }

    /// Channels `[start, start + len)`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let [b, c, h, w] = self.shape;
        if start + len > c || len == 0 {
            return Err(Error::shape(
                "slice_channels",
                format!("[{start}, {}) out of {c} channels", start + len),
            ));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * len * plane);
        for bi in 0..b {
            let s = (bi * c + start) * plane;
            data.extend_from_slice(&self.data[s..s + len * plane]);
        }
        Ok(Tensor4 {
            shape: [b, len, h, w],
            data,
        })
    }

    /// Samples `[start, start + len)` of the batch.
    pub fn slice_batch(&self, start: usize, len: usize) -> Result<Self> {
        let [b, c, h, w] = self.shape;
        if start + len > b || len == 0 {
            return Err(Error::shape(
                "slice_batch",
                format!("[{start}, {}) out of {b} samples", start + len),
            ));
        }
        let n = c * h * w;
        Ok(Tensor4 {
            shape: [len, c, h, w],
            data: self.data[start * n..(start + len) * n].to_vec(),
        })
    }

    /// Stack along the batch axis.
    pub fn concat_batch(parts: &[&Tensor4]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("batch concat of zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut b = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != [c, h, w] {
                return Err(Error::shape(
                    "concat_batch",
                    format!("{:?} vs {:?}", first.shape, p.shape),
                ));
            }
            b += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor4 {
            shape: [b, c, h, w],
            data,
        })
    }

    /// Add `other * scale` into `self` in place.
    pub fn axpy(&mut self, scale: f64, other: &Tensor4) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor4::from_vec([1, 2, 2, 2], vec![0.0; 7]).is_err());
        assert!(Tensor4::from_vec([1, 2, 2, 2], vec![0.0; 8]).is_ok());
    }

    #[test]
    fn concat_then_slice_recovers_inputs() {
        let a = Tensor4::from_fn([2, 3, 2, 4], |[b, c, y, x]| (b * 100 + c * 10 + y * 4 + x) as f64);
        let b = Tensor4::from_fn([2, 2, 2, 4], |[b, c, y, x]| -((b * 50 + c * 7 + y + x) as f64));
        let cat = Tensor4::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), [2, 5, 2, 4]);
        assert_eq!(cat.slice_channels(0, 3).unwrap(), a);
        assert_eq!(cat.slice_channels(3, 2).unwrap(), b);
    }

    #[test]
    fn concat_rejects_mismatched_planes() {
        let a = Tensor4::zeros([1, 1, 2, 2]);
        let b = Tensor4::zeros([1, 1, 2, 3]);
        assert!(Tensor4::concat_channels(&[&a, &b]).is_err());
    }
}
