use std::fmt;

use crate::error::{Error, Result};

/// Dimensions of a 4-D tensor in (batch, channels, height, width) order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of elements in one (height, width) plane.
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Shape { channels, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.batch, self.channels, self.height, self.width
        )
    }
}

/// Dense row-major 4-D array of `f64` values, batch outermost.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::invalid(format!(
                "tensor of shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for b in 0..shape.batch {
            for c in 0..shape.channels {
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        data.push(f(b, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let s = &self.shape;
        ((b * s.channels + c) * s.height + y) * s.width + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(b, c, y, x);
        self.data[i] = v;
    }

    /// The (height, width) plane of one batch item and channel.
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (b * self.shape.channels + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        let start = (b * self.shape.channels + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of one batch item as a contiguous slice.
    pub fn item(&self, b: usize) -> &[f64] {
        let n = self.shape.channels * self.shape.plane();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_shape(other.shape, "zip_map")?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_shape(other.shape, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    /// Inner product over all elements.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_shape(other.shape, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies out batch items `[start, start + count)`.
    pub fn slice_batch(&self, start: usize, count: usize) -> Result<Tensor> {
        if start + count > self.shape.batch {
            return Err(Error::invalid(format!(
                "batch slice {start}..{} out of range for {}",
                start + count,
                self.shape
            )));
        }
        let n = self.shape.channels * self.shape.plane();
        Ok(Tensor {
            shape: Shape {
                batch: count,
                ..self.shape
            },
            data: self.data[start * n..(start + count) * n].to_vec(),
        })
    }

    /// Copies a spatial window `[y0, y0 + h) x [x0, x0 + w)` of every plane.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
        if y0 + h > self.shape.height || x0 + w > self.shape.width {
            return Err(Error::invalid(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}",
                self.shape
            )));
        }
        let shape = Shape {
            height: h,
            width: w,
            ..self.shape
        };
        let mut data = Vec::with_capacity(shape.len());
        for b in 0..shape.batch {
            for c in 0..shape.channels {
                let plane = self.plane(b, c);
                for y in y0..y0 + h {
                    let row = y * self.shape.width;
                    data.extend_from_slice(&plane[row + x0..row + x0 + w]);
                }
            }
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn expect_shape(&self, shape: Shape, op: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::invalid(format!(
                "{op}: shape {} does not match {}",
                self.shape, shape
            )));
        }
        Ok(())
    }
}

/// Stacks equally shaped tensors along the batch axis.
pub fn concat_batch(items: &[Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::invalid("concat_batch of zero tensors"))?;
    let per = first.shape;
    let mut data = Vec::with_capacity(per.len() * items.len());
    let mut batch = 0;
    for t in items {
        let s = t.shape();
        if s.channels != per.channels || s.height != per.height || s.width != per.width {
            return Err(Error::invalid(format!(
                "concat_batch: {s} does not match {per}"
            )));
        }
        batch += s.batch;
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(Shape { batch, ..per }, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let s = Shape::new(1, 2, 3, 4);
        assert!(Tensor::from_vec(s, vec![0.0; 24]).is_ok());
        assert!(matches!(
            Tensor::from_vec(s, vec![0.0; 23]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn indexing_is_row_major_batch_outermost() {
        let t = Tensor::from_fn(Shape::new(2, 3, 4, 5), |b, c, y, x| {
            (b * 1000 + c * 100 + y * 10 + x) as f64
        });
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[1], 1.0);
        assert_eq!(t.data()[5], 10.0);
        assert_eq!(t.data()[20], 100.0);
        assert_eq!(t.data()[60], 1000.0);
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
    }

    #[test]
    fn crop_and_slice() {
        let t = Tensor::from_fn(Shape::new(2, 1, 4, 4), |b, _, y, x| {
            (b * 100 + y * 10 + x) as f64
        });
        let c = t.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.data(), &[12.0, 13.0, 22.0, 23.0, 112.0, 113.0, 122.0, 123.0]);
        let s = t.slice_batch(1, 1).unwrap();
        assert_eq!(s.at(0, 0, 3, 3), 133.0);
        assert!(t.crop(3, 3, 2, 2).is_err());
    }
}
