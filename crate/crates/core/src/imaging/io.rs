use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::raster::{AlphaMatte, BinaryMask, ImageBuffer, Trimap, TrimapLabel};

/// Quantizes an intensity to 8 bits with `round(v * 255)`.
#[inline]
pub fn to_u8<T: Scalar>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

#[inline]
fn from_u8<T: Scalar>(v: u8) -> T {
    T::of(v as f64 / 255.0)
}

fn from_dynamic<T: Scalar>(img: DynamicImage) -> Result<ImageBuffer<T>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.into_rgb8();
        ImageBuffer::new(h, w, 3, rgb.into_raw().into_iter().map(from_u8).collect())
    } else {
        let gray = img.into_luma8();
        ImageBuffer::new(h, w, 1, gray.into_raw().into_iter().map(from_u8).collect())
    }
}

fn to_dynamic<T: Scalar>(image: &ImageBuffer<T>) -> DynamicImage {
    let bytes: Vec<u8> = image.data().iter().map(|&v| to_u8(v)).collect();
    let (w, h) = (image.width() as u32, image.height() as u32);
    if image.channels() == 3 {
        DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, bytes).expect("buffer length"))
    } else {
        DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, bytes).expect("buffer length"))
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(image::open(path)?)
}

pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<ImageBuffer<T>> {
    from_dynamic(open(path.as_ref())?)
}

pub fn save_image<T: Scalar>(image: &ImageBuffer<T>, path: impl AsRef<Path>) -> Result<()> {
    to_dynamic(image).save_with_format(path.as_ref(), ImageFormat::Png)?;
    Ok(())
}

pub fn decode_png<T: Scalar>(bytes: &[u8]) -> Result<ImageBuffer<T>> {
    from_dynamic(image::load_from_memory(bytes)?)
}

pub fn encode_png<T: Scalar>(image: &ImageBuffer<T>) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    to_dynamic(image).write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

fn load_gray(path: &Path) -> Result<GrayImage> {
    Ok(open(path)?.into_luma8())
}

fn save_gray(bytes: Vec<u8>, h: usize, w: usize, path: &Path) -> Result<()> {
    GrayImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer length")
        .save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

/// Loads a grayscale mask; values of 128 and above are set.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let g = load_gray(path.as_ref())?;
    let (w, h) = (g.width() as usize, g.height() as usize);
    BinaryMask::new(h, w, g.into_raw().into_iter().map(|v| v >= 128).collect())
}

pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let bytes = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    save_gray(bytes, mask.height(), mask.width(), path.as_ref())
}

pub fn load_alpha<T: Scalar>(path: impl AsRef<Path>) -> Result<AlphaMatte<T>> {
    let g = load_gray(path.as_ref())?;
    let (w, h) = (g.width() as usize, g.height() as usize);
    AlphaMatte::new(h, w, g.into_raw().into_iter().map(from_u8).collect())
}

pub fn save_alpha<T: Scalar>(alpha: &AlphaMatte<T>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = alpha.data().iter().map(|&v| to_u8(v)).collect();
    save_gray(bytes, alpha.height(), alpha.width(), path.as_ref())
}

/// Trimap PNG convention: 0 = background, 128 = unknown, 255 = foreground.
/// Other gray levels snap to the nearest label.
pub fn load_trimap(path: impl AsRef<Path>) -> Result<Trimap> {
    let g = load_gray(path.as_ref())?;
    let (w, h) = (g.width() as usize, g.height() as usize);
    let labels = g
        .into_raw()
        .into_iter()
        .map(|v| match v {
            0..=63 => TrimapLabel::Background,
            64..=191 => TrimapLabel::Unknown,
            _ => TrimapLabel::Foreground,
        })
        .collect();
    Trimap::new(h, w, labels)
}

pub fn save_trimap(trimap: &Trimap, path: impl AsRef<Path>) -> Result<()> {
    let bytes = trimap
        .data()
        .iter()
        .map(|l| match l {
            TrimapLabel::Background => 0,
            TrimapLabel::Unknown => 128,
            TrimapLabel::Foreground => 255,
        })
        .collect();
    save_gray(bytes, trimap.height(), trimap.width(), path.as_ref())
}
