use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::raster::{AlphaMatte, BinaryMask, ImageBuffer};

/// Per-pixel `alpha * foreground + (1 - alpha) * background`.
///
/// Pixels with `alpha` exactly 0 or 1, or with equal foreground and background,
/// are copied rather than recomputed so they stay bit-identical to their source.
pub fn alpha_blend<T: Scalar>(
    foreground: &ImageBuffer<T>,
    background: &ImageBuffer<T>,
    alpha: &AlphaMatte<T>,
) -> Result<ImageBuffer<T>> {
    foreground.ensure_same_shape(background)?;
    if alpha.dims() != foreground.dims() {
        return Err(Error::dims(foreground.dims(), alpha.dims()));
    }
    let c = foreground.channels();
    let (f, b) = (foreground.data(), background.data());
    let mut out = Vec::with_capacity(f.len());
    for (p, &a) in alpha.data().iter().enumerate() {
        for k in p * c..(p + 1) * c {
            let v = if a == T::one() || f[k] == b[k] {
                f[k]
            } else if a == T::zero() {
                b[k]
            } else {
                (a * f[k] + (T::one() - a) * b[k]).max(T::zero()).min(T::one())
            };
            out.push(v);
        }
    }
    ImageBuffer::new(foreground.height(), foreground.width(), c, out)
}

/// Keeps pixels under the mask and zeroes the rest.
pub fn masked_extract<T: Scalar>(image: &ImageBuffer<T>, mask: &BinaryMask) -> Result<ImageBuffer<T>> {
    mask.ensure_dims(image.dims())?;
    let c = image.channels();
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| if mask.data()[k / c] { v } else { T::zero() })
        .collect();
    ImageBuffer::new(image.height(), image.width(), c, data)
}

/// Rec.601 luma. Evaluated with integer weights so that gray levels like 0.5 map exactly.
#[inline]
pub fn luminance<T: Scalar>(rgb: &[T]) -> T {
    match rgb.len() {
        1 => rgb[0],
        _ => (T::of(299.0) * rgb[0] + T::of(587.0) * rgb[1] + T::of(114.0) * rgb[2]) / T::of(1000.0),
    }
}

/// Marks pixels whose luminance is at least `threshold`.
pub fn luminance_mask<T: Scalar>(image: &ImageBuffer<T>, threshold: T) -> Result<BinaryMask> {
    if !(threshold >= T::zero() && threshold <= T::one()) {
        return Err(Error::invalid(format!("luminance threshold {threshold} outside [0, 1]")));
    }
    Ok(BinaryMask::from_fn(image.height(), image.width(), |y, x| {
        luminance(image.pixel(y, x)) >= threshold
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Morphology {
    Erode,
    Dilate,
}

/// Binary erosion or dilation with a `(2r+1) x (2r+1)` square structuring element.
/// Pixels outside the image count as unset.
pub fn morphology(mask: &BinaryMask, op: Morphology, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dims();
    let r = radius as isize;
    // The square element is separable: rows first, then columns.
    let pass = |get: &dyn Fn(usize, usize) -> bool, horizontal: bool| {
        BinaryMask::from_fn(h, w, |y, x| {
            let mut any = false;
            let mut all = true;
            for d in -r..=r {
                let (yy, xx) = if horizontal {
                    (y as isize, x as isize + d)
                } else {
                    (y as isize + d, x as isize)
                };
                let v = yy >= 0
                    && xx >= 0
                    && (yy as usize) < h
                    && (xx as usize) < w
                    && get(yy as usize, xx as usize);
                any |= v;
                all &= v;
            }
            match op {
                Morphology::Erode => all,
                Morphology::Dilate => any,
            }
        })
    };
    let rows = pass(&|y, x| mask.get(y, x), true);
    pass(&|y, x| rows.get(y, x), false)
}

/// Zero-padded box filter of a mask: each output is the fraction of set pixels
/// in the `(2r+1)^2` window, always divided by the full window size.
pub fn box_blur_mask<T: Scalar>(mask: &BinaryMask, radius: usize) -> AlphaMatte<T> {
    let (h, w) = mask.dims();
    if radius == 0 {
        return mask.to_alpha();
    }
    let r = radius as isize;
    let norm = T::of(((2 * radius + 1) * (2 * radius + 1)) as f64);
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut n = 0usize;
            for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                    n += mask.get(yy as usize, xx as usize) as usize;
                }
            }
            data.push(T::of(n as f64) / norm);
        }
    }
    AlphaMatte::new(h, w, data).expect("box blur stays in [0, 1]")
}

/// Bilinear sample at fractional `(y, x)`, clamped to the image. Integer
/// coordinates return the stored value exactly.
pub fn sample_bilinear<T: Scalar>(image: &ImageBuffer<T>, y: T, x: T, c: usize) -> T {
    let ymax = T::of((image.height() - 1) as f64);
    let xmax = T::of((image.width() - 1) as f64);
    let y = y.max(T::zero()).min(ymax);
    let x = x.max(T::zero()).min(xmax);
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let (y0, x0) = (y0.to_usize().unwrap(), x0.to_usize().unwrap());
    let y1 = (y0 + 1).min(image.height() - 1);
    let x1 = (x0 + 1).min(image.width() - 1);
    let v00 = image.get(y0, x0, c);
    let v01 = image.get(y0, x1, c);
    let v10 = image.get(y1, x0, c);
    let v11 = image.get(y1, x1, c);
    let top = v00 + fx * (v01 - v00);
    let bottom = v10 + fx * (v11 - v10);
    top + fy * (bottom - top)
}

/// Half-pixel-centre bilinear resize.
pub fn resize_bilinear<T: Scalar>(image: &ImageBuffer<T>, height: usize, width: usize) -> Result<ImageBuffer<T>> {
    if height == image.height() && width == image.width() {
        return Ok(image.clone());
    }
    let sy = image.height() as f64 / height as f64;
    let sx = image.width() as f64 / width as f64;
    ImageBuffer::from_fn(height, width, image.channels(), |y, x, c| {
        let yy = T::of((y as f64 + 0.5) * sy - 0.5);
        let xx = T::of((x as f64 + 0.5) * sx - 0.5);
        sample_bilinear(image, yy, xx, c).max(T::zero()).min(T::one())
    })
}
