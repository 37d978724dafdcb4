use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major, channel-interleaved image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> ImageBuffer<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be at least 1x1"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("unsupported channel count {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::dims(height * width * channels, data.len()));
        }
        if let Some(v) = data
            .iter()
            .find(|v| !v.is_finite() || **v < T::zero() || **v > T::one())
        {
            return Err(Error::invalid(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image from values that are clamped into `[0, 1]`; non-finite values are rejected.
    pub fn from_clamped(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<T>,
    ) -> Result<Self> {
        let data = data
            .into_iter()
            .map(|v| if v.is_nan() { v } else { v.max(T::zero()).min(T::one()) })
            .collect();
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        assert!(value >= T::zero() && value <= T::one());
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    /// Applies `f` to every intensity and clamps the result into `[0, 1]`.
    pub fn map_clamped(&self, mut f: impl FnMut(T) -> T) -> Self {
        let data = self
            .data
            .iter()
            .map(|&v| {
                let r = f(v);
                assert!(r.is_finite(), "non-finite intensity");
                r.max(T::zero()).min(T::one())
            })
            .collect();
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Sets one intensity; the value is clamped into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        debug_assert!(v.is_finite());
        self.data[(y * self.width + x) * self.channels + c] = v.max(T::zero()).min(T::one());
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Replicates a single-channel image into three channels.
    pub fn to_rgb(&self) -> Self {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Self {
            height: self.height,
            width: self.width,
            channels: 3,
            data,
        }
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.height != other.height
            || self.width != other.width
            || self.channels != other.channels
        {
            return Err(Error::dims(
                (self.height, self.width, self.channels),
                (other.height, other.width, other.channels),
            ));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ImageBuffer<U> {
        ImageBuffer {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Per-pixel membership mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dims(height * width, data.len()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn is_full(&self) -> bool {
        self.data.iter().all(|&b| b)
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        self.ensure_dims(other.dims())?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect();
        Ok(Self {
            data,
            ..*self
        })
    }

    pub fn intersection(&self, other: &Self) -> Result<Self> {
        self.ensure_dims(other.dims())?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect();
        Ok(Self {
            data,
            ..*self
        })
    }

    pub fn difference(&self, other: &Self) -> Result<Self> {
        self.ensure_dims(other.dims())?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a && !*b).collect();
        Ok(Self {
            data,
            ..*self
        })
    }

    pub fn complement(&self) -> Self {
        Self {
            data: self.data.iter().map(|b| !b).collect(),
            ..*self
        }
    }

    /// `true` when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(a, b)| !*a || *b)
    }

    pub fn ensure_dims(&self, dims: (usize, usize)) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::dims(dims, self.dims()));
        }
        Ok(())
    }

    /// Interprets the mask as a hard matte (`1` inside, `0` outside).
    pub fn to_alpha<T: Scalar>(&self) -> AlphaMatte<T> {
        AlphaMatte {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&b| if b { T::one() } else { T::zero() })
                .collect(),
        }
    }
}

/// Per-pixel opacity in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaMatte<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> AlphaMatte<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dims(height * width, data.len()));
        }
        if let Some(v) = data
            .iter()
            .find(|v| !v.is_finite() || **v < T::zero() || **v > T::one())
        {
            return Err(Error::invalid(format!("alpha {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        assert!(value >= T::zero() && value <= T::one());
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v.max(T::zero()).min(T::one());
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrimapLabel {
    Background,
    Unknown,
    Foreground,
}

/// Three-label map guiding matting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trimap {
    height: usize,
    width: usize,
    data: Vec<TrimapLabel>,
}

impl Trimap {
    pub fn new(height: usize, width: usize, data: Vec<TrimapLabel>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dims(height * width, data.len()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> TrimapLabel {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[TrimapLabel] {
        &self.data
    }

    pub fn mask_of(&self, label: TrimapLabel) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&l| l == label).collect(),
        }
    }
}
