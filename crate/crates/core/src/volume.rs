//! Dense z-major voxel arrays.
//!
//! A [`Volume`] stores `nz * ny * nx` single-precision values with `x`
//! varying fastest. Two-dimensional images are volumes with `nz == 1`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    data: Vec<f32>,
}

impl Volume {
    /// All-zero volume of shape `[nz, ny, nx]`.
    pub fn zeros(shape: [usize; 3]) -> Self {
        Volume {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn image_zeros(ny: usize, nx: usize) -> Self {
        Self::zeros([1, ny, nx])
    }

    pub fn filled(shape: [usize; 3], value: f32) -> Self {
        Volume {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                context: "volume payload",
                expected: vec![expected],
                found: vec![data.len()],
            });
        }
        Ok(Volume { shape, data })
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let [nz, ny, nx] = shape;
        let mut data = Vec::with_capacity(nz * ny * nx);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(z, y, x));
                }
            }
        }
        Volume { shape, data }
    }

    /// Stacks equally sized 2D slices along z.
    pub fn stack(slices: &[Vec<f32>], ny: usize, nx: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(slices.len() * ny * nx);
        for s in slices {
            if s.len() != ny * nx {
                return Err(Error::ShapeMismatch {
                    context: "slice stack",
                    expected: vec![ny, nx],
                    found: vec![s.len()],
                });
            }
            data.extend_from_slice(s);
        }
        Ok(Volume {
            shape: [slices.len(), ny, nx],
            data,
        })
    }

    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    #[inline]
    pub fn nz(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn ny(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn nx(&self) -> usize {
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
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, value: f32) {
        let i = self.index(z, y, x);
        self.data[i] = value;
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.shape[1] * self.shape[2];
        &self.data[z * n..(z + 1) * n]
    }

    pub fn slice_mut(&mut self, z: usize) -> &mut [f32] {
        let n = self.shape[1] * self.shape[2];
        &mut self.data[z * n..(z + 1) * n]
    }

    pub fn slices(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.shape[1] * self.shape[2].max(1))
    }

    /// Copy with the axes reordered; `order[i]` names the source axis that
    /// becomes output axis `i` (0 = z, 1 = y, 2 = x).
    pub fn permuted(&self, order: [usize; 3]) -> Volume {
        let src = self.shape;
        let shape = [src[order[0]], src[order[1]], src[order[2]]];
        let mut out = Volume::zeros(shape);
        let mut idx = [0usize; 3];
        for a in 0..shape[0] {
            for b in 0..shape[1] {
                for c in 0..shape[2] {
                    idx[order[0]] = a;
                    idx[order[1]] = b;
                    idx[order[2]] = c;
                    out.data[(a * shape[1] + b) * shape[2] + c] = self.get(idx[0], idx[1], idx[2]);
                }
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume {
        Volume {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn ensure_same_shape(&self, other: &Volume, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context,
                expected: self.shape.to_vec(),
                found: other.shape.to_vec(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Sum of squares accumulated in double precision.
pub fn norm_sq(values: &[f32]) -> f64 {
    values.iter().map(|&v| (v as f64) * (v as f64)).sum()
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}
