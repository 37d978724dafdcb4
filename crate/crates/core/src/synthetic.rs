//! Procedural face cards: flat-shaded faces with known landmarks and
//! segmentation, used for tests, demos and toy training sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imaging::{BinaryMask, ImageBuffer};
use crate::landmarks::{LandmarkSet, Point2};
use crate::pipeline::landmark_face_mask;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct FaceCard<T> {
    pub image: ImageBuffer<T>,
    pub landmarks: LandmarkSet<T>,
    pub segmentation: BinaryMask,
    /// Top-left corners `(y, x)` of the two square eyes.
    pub eye_origins: [(usize, usize); 2],
    pub eye_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CardStyle {
    pub background: [f64; 3],
    pub skin: [f64; 3],
    pub eye: [f64; 3],
    pub mouth: [f64; 3],
    /// Eye square side relative to the default.
    pub eye_scale: f64,
    /// Mouth radii relative to the default.
    pub mouth_scale: f64,
}

impl Default for CardStyle {
    fn default() -> Self {
        Self {
            background: [0.25, 0.3, 0.4],
            skin: [0.8, 0.65, 0.55],
            eye: [0.1, 0.08, 0.08],
            mouth: [0.55, 0.15, 0.2],
            eye_scale: 1.0,
            mouth_scale: 1.0,
        }
    }
}

pub fn face_card<T: Scalar>(size: usize) -> FaceCard<T> {
    styled_face_card(size, &CardStyle::default())
}

/// Draws a face card of `size x size` pixels. Eye landmark rings enclose the
/// eye squares with margin so enlarged regions contain the scaled patch.
pub fn styled_face_card<T: Scalar>(size: usize, style: &CardStyle) -> FaceCard<T> {
    assert!(size >= 8, "face cards need at least 8x8 pixels");
    let s = (size - 1) as f64;
    let unit = size as f64 / 64.0;
    let eye_size = ((6.0 * unit * style.eye_scale).round() as usize).max(1);
    let eye_centres = [(0.42 * s, 0.34 * s), (0.42 * s, 0.66 * s)];
    let eye_origins = eye_centres.map(|(cy, cx)| {
        let half = eye_size as f64 / 2.0;
        ((cy - half + 0.5).round() as usize, (cx - half + 0.5).round() as usize)
    });
    let (mcy, mcx) = (0.72 * s, 0.5 * s);
    let (mry, mrx) = (0.04 * s * style.mouth_scale, 0.12 * s * style.mouth_scale);

    let image = ImageBuffer::from_fn(size, size, 3, |y, x, c| {
        let (fy, fx) = (y as f64, x as f64);
        let in_eye = eye_origins
            .iter()
            .any(|&(y0, x0)| (y0..y0 + eye_size).contains(&y) && (x0..x0 + eye_size).contains(&x));
        let mouth = ((fy - mcy) / mry.max(0.5)).powi(2) + ((fx - mcx) / mrx.max(0.5)).powi(2) <= 1.0;
        let face = ((fy - 0.5 * s) / (0.45 * s)).powi(2) + ((fx - 0.5 * s) / (0.4 * s)).powi(2) <= 1.0;
        let v = if in_eye {
            style.eye[c]
        } else if mouth {
            style.mouth[c]
        } else if face {
            style.skin[c]
        } else {
            style.background[c]
        };
        T::of(v)
    })
    .expect("card colours in [0, 1]");

    let mut points = LandmarkSet::<T>::template(size, size).points().to_vec();
    let ring = 5.5 * unit * style.eye_scale;
    for (e, &(y0, x0)) in eye_origins.iter().enumerate() {
        let cy = y0 as f64 + (eye_size as f64 - 1.0) / 2.0;
        let cx = x0 as f64 + (eye_size as f64 - 1.0) / 2.0;
        for k in 0..6 {
            let t = std::f64::consts::PI - 2.0 * std::f64::consts::PI * k as f64 / 6.0;
            points[36 + 6 * e + k] = Point2::new(T::of(cx + ring * t.cos()), T::of(cy - ring * t.sin()));
        }
    }
    for k in 0..12 {
        let t = std::f64::consts::PI - 2.0 * std::f64::consts::PI * k as f64 / 12.0;
        points[48 + k] = Point2::new(T::of(mcx + (mrx + unit) * t.cos()), T::of(mcy - (mry + unit) * t.sin()));
    }
    for k in 0..8 {
        let t = std::f64::consts::PI - 2.0 * std::f64::consts::PI * k as f64 / 8.0;
        points[60 + k] = Point2::new(T::of(mcx + 0.6 * mrx * t.cos()), T::of(mcy - 0.5 * mry * t.sin()));
    }
    let landmarks = LandmarkSet::new(points).expect("68 points");
    let segmentation = landmark_face_mask(&landmarks, size, size).expect("face hull");
    FaceCard {
        image,
        landmarks,
        segmentation,
        eye_origins,
        eye_size,
    }
}

/// Two-class toy set: even indices are real-like cards, odd indices
/// caricature-like cards with enlarged eyes and mouth. Colours vary per image.
pub fn toy_faces<T: Scalar>(count: usize, size: usize, seed: u64) -> Vec<(ImageBuffer<T>, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let caricature = i % 2 == 1;
            let mut jitter = |base: [f64; 3], amount: f64| -> [f64; 3] {
                let shift = rng.random_range(-amount..amount);
                base.map(|v: f64| (v + shift + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0))
            };
            let style = CardStyle {
                background: jitter([0.3, 0.35, 0.45], 0.25),
                skin: jitter([0.75, 0.6, 0.5], 0.2),
                eye: jitter([0.1, 0.08, 0.08], 0.05),
                mouth: jitter([0.55, 0.15, 0.2], 0.1),
                eye_scale: if caricature { 1.6 } else { 1.0 },
                mouth_scale: if caricature { 1.5 } else { 1.0 },
            };
            (styled_face_card::<T>(size, &style).image, caricature)
        })
        .collect()
}
