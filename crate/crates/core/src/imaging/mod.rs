//! Raster types and the pixel-level primitives every pipeline stage is built from.

mod io;
mod ops;
mod raster;

pub use io::{
    decode_png, encode_png, load_alpha, load_image, load_mask, load_trimap, save_alpha,
    save_image, save_mask, save_trimap, to_u8,
};
pub use ops::{
    alpha_blend, box_blur_mask, luminance, luminance_mask, masked_extract, morphology,
    resize_bilinear, sample_bilinear, Morphology,
};
pub use raster::{AlphaMatte, BinaryMask, ImageBuffer, Trimap, TrimapLabel};
