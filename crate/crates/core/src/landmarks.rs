//! 68-point facial landmarks, region grouping and centroid-anchored enlargement.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::{sidecar_path, CommandTemplate};
use crate::error::{Error, Result};
use crate::imaging::BinaryMask;
use crate::scalar::Scalar;

pub const LANDMARK_COUNT: usize = 68;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point2<T> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> Point2<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Self) -> T {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Exactly 68 `(x, y)` points in pixel units.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet<T> {
    points: Vec<Point2<T>>,
}

impl<T: Scalar> LandmarkSet<T> {
    pub fn new(points: Vec<Point2<T>>) -> Result<Self> {
        if points.len() != LANDMARK_COUNT {
            return Err(Error::invalid(format!(
                "expected {LANDMARK_COUNT} landmarks, found {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::invalid("non-finite landmark coordinate"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point2<T>] {
        &self.points
    }

    /// Checks that every point lies within an image of the given size.
    pub fn bind(self, height: usize, width: usize) -> Result<Self> {
        let (h, w) = (T::of(height as f64), T::of(width as f64));
        if let Some((i, p)) = self
            .points
            .iter()
            .enumerate()
            .find(|(_, p)| p.x < T::zero() || p.y < T::zero() || p.x > w || p.y > h)
        {
            return Err(Error::invalid(format!(
                "landmark {i} at ({}, {}) outside {width}x{height} image",
                p.x, p.y
            )));
        }
        Ok(self)
    }

    pub fn select(&self, indices: &[usize]) -> Vec<Point2<T>> {
        indices.iter().map(|&i| self.points[i]).collect()
    }

    /// Deterministic frontal template scaled to the image, used by the stub provider.
    pub fn template(height: usize, width: usize) -> Self {
        let pts = template_normalized()
            .into_iter()
            .map(|(x, y)| Point2::new(T::of(x * (width as f64 - 1.0)), T::of(y * (height as f64 - 1.0))))
            .collect();
        Self { points: pts }
    }

    pub fn to_sidecar(&self) -> LandmarkSidecar {
        LandmarkSidecar {
            points: self.points.iter().map(|p| [p.x.as_f64(), p.y.as_f64()]).collect(),
        }
    }
}

fn ellipse_ring(cx: f64, cy: f64, rx: f64, ry: f64, n: usize) -> impl Iterator<Item = (f64, f64)> {
    // Starts at the leftmost point and runs over the top edge first.
    (0..n).map(move |k| {
        let t = std::f64::consts::PI - 2.0 * std::f64::consts::PI * k as f64 / n as f64;
        (cx + rx * t.cos(), cy - ry * t.sin())
    })
}

/// Standard 68-point ordering laid out on a frontal face in `[0, 1]^2`.
fn template_normalized() -> Vec<(f64, f64)> {
    use std::f64::consts::PI;
    let mut p = Vec::with_capacity(LANDMARK_COUNT);
    // 0-16 jaw
    for i in 0..17 {
        let t = PI - PI * i as f64 / 16.0;
        p.push((0.5 + 0.38 * t.cos(), 0.45 + 0.42 * t.sin()));
    }
    // 17-21, 22-26 brows
    for (x0, x1) in [(0.22, 0.44), (0.56, 0.78)] {
        for i in 0..5 {
            let u = i as f64 / 4.0;
            p.push((x0 + (x1 - x0) * u, 0.33 - 0.03 * (PI * u).sin()));
        }
    }
    // 27-30 nose bridge, 31-35 nostrils
    for i in 0..4 {
        p.push((0.5, 0.38 + 0.055 * i as f64));
    }
    for i in 0..5 {
        let u = i as f64 / 4.0;
        p.push((0.44 + 0.12 * u, 0.6 + 0.015 * (PI * u).sin()));
    }
    // 36-41 right eye, 42-47 left eye
    p.extend(ellipse_ring(0.34, 0.42, 0.07, 0.03, 6));
    p.extend(ellipse_ring(0.66, 0.42, 0.07, 0.03, 6));
    // 48-59 outer lips, 60-67 inner lips
    p.extend(ellipse_ring(0.5, 0.72, 0.16, 0.06, 12));
    p.extend(ellipse_ring(0.5, 0.72, 0.10, 0.025, 8));
    debug_assert_eq!(p.len(), LANDMARK_COUNT);
    p
}

/// JSON sidecar: `{"points": [[x, y], ...]}` with 68 entries.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LandmarkSidecar {
    pub points: Vec<[f64; 2]>,
}

impl LandmarkSidecar {
    pub fn parse<T: Scalar>(text: &str, path: &Path) -> Result<LandmarkSet<T>> {
        let parsed: LandmarkSidecar = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if parsed.points.len() != LANDMARK_COUNT {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!(
                    "field `points`: expected {LANDMARK_COUNT} entries, found {}",
                    parsed.points.len()
                ),
            });
        }
        LandmarkSet::new(
            parsed
                .points
                .iter()
                .map(|[x, y]| Point2::new(T::of(*x), T::of(*y)))
                .collect(),
        )
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RegionName {
    LeftEye,
    RightEye,
    UpperLip,
    LowerLip,
    Mouth,
}

impl RegionName {
    pub fn is_mouth(self) -> bool {
        matches!(self, RegionName::Mouth | RegionName::UpperLip | RegionName::LowerLip)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RegionName::LeftEye => "LEFT_EYE",
            RegionName::RightEye => "RIGHT_EYE",
            RegionName::UpperLip => "UPPER_LIP",
            RegionName::LowerLip => "LOWER_LIP",
            RegionName::Mouth => "MOUTH",
        }
    }

    /// Default 68-point index group for the region.
    pub fn default_indices(self) -> Vec<usize> {
        match self {
            RegionName::RightEye => (36..=41).collect(),
            RegionName::LeftEye => (42..=47).collect(),
            RegionName::Mouth => (48..=67).collect(),
            RegionName::UpperLip => (48..=54).chain(60..=64).collect(),
            RegionName::LowerLip => (54..=59).chain([48]).chain(64..=67).collect(),
        }
    }
}

/// A named landmark group to exaggerate. `enlarge_factor` overrides the
/// pipeline-wide landmark factor when set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RegionSpec<T> {
    pub name: RegionName,
    pub indices: Vec<usize>,
    #[serde(default = "Option::default")]
    pub enlarge_factor: Option<T>,
}

impl<T: Scalar> RegionSpec<T> {
    pub fn standard(name: RegionName) -> Self {
        Self {
            name,
            indices: name.default_indices(),
            enlarge_factor: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.indices.is_empty() {
            return Err(Error::invalid(format!("region {} has no indices", self.name.as_str())));
        }
        let mut seen = [false; LANDMARK_COUNT];
        for &i in &self.indices {
            if i >= LANDMARK_COUNT {
                return Err(Error::invalid(format!("landmark index {i} out of range")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!("duplicate landmark index {i}")));
            }
        }
        if let Some(f) = self.enlarge_factor {
            if !(f > T::zero()) || !f.is_finite() {
                return Err(Error::invalid("enlarge factor must be positive"));
            }
        }
        Ok(())
    }
}

/// Source of landmarks for an image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LandmarkProvider {
    /// `<stem>.landmarks.json` next to the image.
    Sidecar,
    /// Fixed frontal template scaled to the image.
    Stub,
    /// Detector command; receives `{image}` and prints the sidecar JSON on stdout.
    External(CommandTemplate),
}

impl LandmarkProvider {
    pub fn tag(&self) -> &'static str {
        match self {
            LandmarkProvider::Sidecar => "sidecar",
            LandmarkProvider::Stub => "stub",
            LandmarkProvider::External(_) => "external",
        }
    }

    /// Where the landmarks for `image` come from, as recorded in manifests.
    pub fn source_for(&self, image: &Path) -> String {
        match self {
            LandmarkProvider::Sidecar => sidecar_path(image, "landmarks.json").display().to_string(),
            LandmarkProvider::Stub => "stub".into(),
            LandmarkProvider::External(t) => format!("external:{}", t.command),
        }
    }
}

pub fn load_landmarks<T: Scalar>(image: &Path, provider: &LandmarkProvider) -> Result<LandmarkSet<T>> {
    if !image.exists() {
        return Err(Error::MissingArtifact(image.to_path_buf()));
    }
    let (w, h) = image::image_dimensions(image)?;
    let (w, h) = (w as usize, h as usize);
    let set = match provider {
        LandmarkProvider::Stub => LandmarkSet::template(h, w),
        LandmarkProvider::Sidecar => {
            let path = sidecar_path(image, "landmarks.json");
            let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingArtifact(path.clone()),
                _ => Error::io(&path, e),
            })?;
            LandmarkSidecar::parse(&text, &path)?
        }
        LandmarkProvider::External(cmd) => {
            let out = cmd.run("landmarks", &[("image", &image.display().to_string())])?;
            if out.is_empty() {
                return Err(Error::DetectionFailed {
                    image: image.to_path_buf(),
                });
            }
            LandmarkSidecar::parse(&out, &PathBuf::from("<detector stdout>"))?
        }
    };
    set.bind(h, w)
}

pub fn centroid<T: Scalar>(points: &[Point2<T>]) -> Point2<T> {
    let n = T::of(points.len() as f64);
    let (sx, sy) = points
        .iter()
        .fold((T::zero(), T::zero()), |(sx, sy), p| (sx + p.x, sy + p.y));
    Point2::new(sx / n, sy / n)
}

/// Scales points about their centroid: `p' = c + s (p - c)`.
pub fn enlarge_points<T: Scalar>(points: &[Point2<T>], factor: T) -> Vec<Point2<T>> {
    let c = centroid(points);
    points
        .iter()
        .map(|p| Point2::new(c.x + factor * (p.x - c.x), c.y + factor * (p.y - c.y)))
        .collect()
}

/// Enlarged coordinates of a region's landmarks, in index order.
pub fn enlarge_region<T: Scalar>(lm: &LandmarkSet<T>, region: &RegionSpec<T>, default_factor: T) -> Result<Vec<Point2<T>>> {
    region.validate()?;
    let factor = region.enlarge_factor.unwrap_or(default_factor);
    if !(factor > T::zero()) {
        return Err(Error::invalid("enlarge factor must be positive"));
    }
    Ok(enlarge_points(&lm.select(&region.indices), factor))
}

fn cross<T: Scalar>(o: &Point2<T>, a: &Point2<T>, b: &Point2<T>) -> T {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Convex hull by monotone chain, counter-clockwise in a y-up sense.
pub fn convex_hull<T: Scalar>(points: &[Point2<T>]) -> Vec<Point2<T>> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.partial_cmp(&b.x).unwrap().then(a.y.partial_cmp(&b.y).unwrap()));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point2<T>> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point2<T>>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for p in iter {
            while hull.len() >= start + 2
                && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= T::zero()
            {
                hull.pop();
            }
            hull.push(*p);
        }
        hull.pop();
    }
    hull
}

fn point_in_hull<T: Scalar>(hull: &[Point2<T>], p: &Point2<T>, tol: T) -> bool {
    match hull.len() {
        0 => false,
        1 => hull[0].distance(p) <= tol,
        2 => {
            let (a, b) = (&hull[0], &hull[1]);
            let len = a.distance(b);
            let t = ((p.x - a.x) * (b.x - a.x) + (p.y - a.y) * (b.y - a.y)) / (len * len);
            t >= -tol && t <= T::one() + tol && cross(a, b, p).abs() / len <= tol
        }
        n => (0..n).all(|i| {
            let (a, b) = (&hull[i], &hull[(i + 1) % n]);
            cross(a, b, p) / a.distance(b) >= -tol
        }),
    }
}

/// Filled convex hull of `points` rasterized at integer pixel coordinates
/// (`x` = column, `y` = row), boundary inclusive, clipped to the image.
pub fn region_mask<T: Scalar>(points: &[Point2<T>], height: usize, width: usize) -> Result<BinaryMask> {
    if points.len() < 3 {
        return Err(Error::invalid(format!("region mask needs at least 3 points, got {}", points.len())));
    }
    let hull = convex_hull(points);
    let tol = T::of(1e-9);
    let (mut x0, mut x1, mut y0, mut y1) = (T::infinity(), T::neg_infinity(), T::infinity(), T::neg_infinity());
    for p in &hull {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let mut mask = BinaryMask::empty(height, width);
    let clip = |lo: T, hi: T, n: usize| -> Option<(usize, usize)> {
        let lo = (lo - tol).ceil().max(T::zero());
        let hi = (hi + tol).floor().min(T::of(n as f64 - 1.0));
        (lo <= hi).then(|| (lo.to_usize().unwrap(), hi.to_usize().unwrap()))
    };
    if let (Some((ya, yb)), Some((xa, xb))) = (clip(y0, y1, height), clip(x0, x1, width)) {
        for y in ya..=yb {
            for x in xa..=xb {
                if point_in_hull(&hull, &Point2::new(T::of(x as f64), T::of(y as f64)), tol) {
                    mask.set(y, x, true);
                }
            }
        }
    }
    Ok(mask)
}
