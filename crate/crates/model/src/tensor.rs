use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use cforge_core::{Error, ImageBuffer, Result};

use crate::real::Real;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} vs {} values", data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.iter().product())
            .map(|_| T::of(std * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "not a scalar");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks 3-channel images into an NCHW batch.
    pub fn from_images(images: &[&ImageBuffer<T>]) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
        let (h, w) = first.dims();
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if img.dims() != (h, w) || img.channels() != 3 {
                return Err(Error::dims((h, w, 3), (img.height(), img.width(), img.channels())));
            }
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        data.push(img.get(y, x, c));
                    }
                }
            }
        }
        Ok(Self::new(vec![images.len(), 3, h, w], data))
    }

    /// Splits an NCHW batch in `[0, 1]` back into images (values clamped).
    pub fn to_images(&self) -> Result<Vec<ImageBuffer<T>>> {
        let [n, c, h, w] = self.shape[..] else {
            return Err(Error::invalid(format!("expected NCHW tensor, got {:?}", self.shape)));
        };
        (0..n)
            .map(|i| {
                let base = i * c * h * w;
                ImageBuffer::from_fn(h, w, c, |y, x, ch| self.data[base + ch * h * w + y * w + x])
                    .or_else(|_| {
                        let mut v = Vec::with_capacity(h * w * c);
                        for y in 0..h {
                            for x in 0..w {
                                for ch in 0..c {
                                    v.push(self.data[base + ch * h * w + y * w + x]);
                                }
                            }
                        }
                        ImageBuffer::from_clamped(h, w, c, v)
                    })
            })
            .collect()
    }
}
