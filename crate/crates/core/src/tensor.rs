//! Dense `(channels, height, width)` rasters and the `GST1` raw tensor file format.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Channel-major dense raster: image, feature map, latent, or a flat
/// attribute array stored as `(C, 1, N)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { shape: [c, h, w], data: vec![0.0; c * h * w] }
    }

    pub fn full(c: usize, h: usize, w: usize, value: f64) -> Self {
        Self { shape: [c, h, w], data: vec![value; c * h * w] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: [1, 1, 1], data: vec![value] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::Shape(format!(
                "data length {} does not match shape ({c}, {h}, {w})",
                data.len()
            )));
        }
        Ok(Self { shape: [c, h, w], data })
    }

    pub fn from_fn(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ci, y, x));
                }
            }
        }
        Self { shape: [c, h, w], data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.shape[2]
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
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape[1] + y) * self.shape[2] + x
    }
    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }
    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    /// Channel `c` as a `(1, H, W)` tensor.
    pub fn channel(&self, c: usize) -> Tensor {
        let n = self.shape[1] * self.shape[2];
        Tensor { shape: [1, self.shape[1], self.shape[2]], data: self.data[c * n..(c + 1) * n].to_vec() }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_shape(other.shape, "zip_map")?;
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn reshape(mut self, c: usize, h: usize, w: usize) -> Result<Tensor> {
        if c * h * w != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to ({c}, {h}, {w})", self.shape)));
        }
        self.shape = [c, h, w];
        Ok(self)
    }

    pub fn expect_shape(&self, shape: [usize; 3], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape(format!("{what}: expected {shape:?}, got {:?}", self.shape)));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Edge-replicating pad on the bottom and right.
    pub fn pad_edge(&self, h: usize, w: usize) -> Tensor {
        let [c, sh, sw] = self.shape;
        Tensor::from_fn(c, h, w, |ci, y, x| self.at(ci, y.min(sh - 1), x.min(sw - 1)))
    }

    /// Top-left crop.
    pub fn crop(&self, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(self.shape[0], h, w, |c, y, x| self.at(c, y, x))
    }

    /// Mirror along the width axis.
    pub fn flip_w(&self) -> Tensor {
        let w = self.shape[2];
        Tensor::from_fn(self.shape[0], self.shape[1], w, |c, y, x| self.at(c, y, w - 1 - x))
    }

    // ---- GST1 ----

    pub fn to_gst1(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 3 + 12 + 4 * self.data.len());
        out.extend_from_slice(GST1_MAGIC);
        out.push(GST1_VERSION);
        out.push(0); // dtype f32
        out.push(3);
        for d in self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    /// Parses a `GST1` buffer. Rank 1 and 2 tensors are lifted to `(1, 1, N)`
    /// and `(1, H, W)`.
    pub fn from_gst1(bytes: &[u8]) -> Result<Tensor> {
        let (t, used) = Self::parse_gst1_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::Format(format!("GST1: {} trailing bytes", bytes.len() - used)));
        }
        Ok(t)
    }

    /// Parses one tensor from the front of `bytes`, returning it and the number of bytes consumed.
    pub fn parse_gst1_prefix(bytes: &[u8]) -> Result<(Tensor, usize)> {
        if bytes.len() < 7 || &bytes[..4] != GST1_MAGIC {
            return Err(Error::Format("GST1: bad magic".into()));
        }
        if bytes[4] != GST1_VERSION {
            return Err(Error::Format(format!("GST1: unsupported version {}", bytes[4])));
        }
        if bytes[5] != 0 {
            return Err(Error::Format(format!("GST1: unsupported dtype {}", bytes[5])));
        }
        let rank = bytes[6] as usize;
        if rank == 0 || rank > 3 {
            return Err(Error::Format(format!("GST1: unsupported rank {rank}")));
        }
        let mut pos = 7;
        let mut dims = [1usize; 3];
        for i in 0..rank {
            let b = bytes
                .get(pos..pos + 4)
                .ok_or_else(|| Error::Format("GST1: truncated dims".into()))?;
            dims[3 - rank + i] = u32::from_le_bytes(b.try_into().unwrap()) as usize;
            pos += 4;
        }
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| Error::Format("GST1: dims overflow".into()))?;
        let payload = bytes
            .get(pos..pos + 4 * n)
            .ok_or_else(|| Error::Format("GST1: truncated payload".into()))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok((Tensor { shape: dims, data }, pos + 4 * n))
    }

    pub fn write_gst1(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_gst1())?;
        Ok(())
    }

    pub fn read_gst1(path: impl AsRef<Path>) -> Result<Tensor> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Tensor::from_gst1(&buf)
    }
}

pub const GST1_MAGIC: &[u8; 4] = b"GST1";
pub const GST1_VERSION: u8 = 1;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gst1_layout() {
        let t = Tensor::from_vec(1, 1, 2, vec![1.0, -2.5]).unwrap();
        let b = t.to_gst1();
        assert_eq!(&b[..7], &[b'G', b'S', b'T', b'1', 1, 0, 3]);
        assert_eq!(&b[7..19], &[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[19..23], &1.0f32.to_le_bytes());
        assert_eq!(Tensor::from_gst1(&b).unwrap(), t);
    }

    #[test]
    fn gst1_rejects_garbage() {
        let t = Tensor::zeros(2, 2, 2);
        let mut b = t.to_gst1();
        b.push(0);
        assert!(Tensor::from_gst1(&b).is_err());
        assert!(Tensor::from_gst1(&b[..10]).is_err());
        assert!(Tensor::from_gst1(b"GST2\x01\x00\x03").is_err());
    }

    #[test]
    fn gst1_low_rank_lifts() {
        let mut b = Vec::from(&b"GST1\x01\x00\x01"[..]);
        b.extend_from_slice(&3u32.to_le_bytes());
        for v in [1.0f32, 2.0, 3.0] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let t = Tensor::from_gst1(&b).unwrap();
        assert_eq!(t.shape(), [1, 1, 3]);
    }

    #[test]
    fn from_vec_checks_len() {
        assert!(Tensor::from_vec(2, 2, 2, vec![0.0; 7]).is_err());
    }
}
