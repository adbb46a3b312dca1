//! Procedural grayscale scenes with known attribute parameters.
//!
//! Every scene is a fixed dark background with one or more non-overlapping
//! elements of a single shape class. Each of the four attributes draws its
//! scene parameters from its own band, so attribute presence in an image is
//! known exactly and can be measured without any learned model.

use alloc::vec::Vec;
use core::f64::consts::TAU;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::GrayImage;
use crate::tensor::Tensor;

/// Default image side length.
pub const DEFAULT_SIZE: usize = 32;
/// Default number of images per attribute.
pub const DEFAULT_COUNT: usize = 6400;
/// Background intensity of every scene.
pub const BACKGROUND: f64 = 0.05;
/// Pixels above this value count as foreground.
pub const FOREGROUND_THRESHOLD: f64 = 0.1;
/// Neighbour contrast above which a pixel counts as an edge.
pub const EDGE_THRESHOLD: f64 = 0.15;

const SUBSAMPLES: usize = 4;
const PLACEMENT_TRIES: usize = 256;
const PLACEMENT_RESTARTS: usize = 16;
/// Minimum distance between element centres, in element radii. Neighbours
/// may overlap slightly.
const MIN_SEPARATION: f64 = 1.5;

/// Abstract attribute, in fixed alphabetical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum AttributeId {
    Dense,
    Evil,
    Minimal,
    Radiant,
}

impl AttributeId {
    pub const ALL: [AttributeId; 4] = [
        AttributeId::Dense,
        AttributeId::Evil,
        AttributeId::Minimal,
        AttributeId::Radiant,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            AttributeId::Dense => "dense",
            AttributeId::Evil => "evil",
            AttributeId::Minimal => "minimal",
            AttributeId::Radiant => "radiant",
        }
    }

    /// `[4, 1]` selector picking this attribute's column from a score batch.
    pub fn one_hot_column(self) -> Tensor {
        Tensor::from_fn(&[4, 1], |i| if i == self.index() { 1.0 } else { 0.0 })
    }
}

impl fmt::Display for AttributeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown attribute {0:?} (expected dense, evil, minimal or radiant)")]
pub struct UnknownAttribute(pub alloc::string::String);

impl FromStr for AttributeId {
    type Err = UnknownAttribute;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttributeId::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownAttribute(s.into()))
    }
}

/// Shape of the scene elements; the class label of the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ShapeClass {
    Disc,
    Cross,
    Star,
    Ring,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [ShapeClass::Disc, ShapeClass::Cross, ShapeClass::Star, ShapeClass::Ring];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Disc => "disc",
            ShapeClass::Cross => "cross",
            ShapeClass::Star => "star",
            ShapeClass::Ring => "ring",
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ground-truth parameters of one scene.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SceneSpec {
    pub shape_class: ShapeClass,
    pub element_count: u32,
    /// Foreground intensity, `0` renders elements at background level.
    pub brightness: f64,
    /// `0` smooth outlines, `1` deeply serrated outlines.
    pub spikiness: f64,
    /// Element outer radius as a fraction of image width, in `[0.1, 0.4]`.
    pub element_scale: f64,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ShapeworldError {
    #[error("scene field {field} = {value} outside its valid range")]
    InvalidSpec { field: &'static str, value: f64 },
    #[error("could not place {count} elements of scale {scale} without overlap")]
    Placement { count: u32, scale: f64 },
    #[error("dataset size must be at least 1")]
    EmptyDataset,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), ShapeworldError> {
        let check = |field, value: f64, lo: f64, hi: f64| {
            if (lo..=hi).contains(&value) {
                Ok(())
            } else {
                Err(ShapeworldError::InvalidSpec { field, value })
            }
        };
        if self.element_count < 1 {
            return Err(ShapeworldError::InvalidSpec {
                field: "element_count",
                value: self.element_count as f64,
            });
        }
        check("brightness", self.brightness, 0.0, 1.0)?;
        check("spikiness", self.spikiness, 0.0, 1.0)?;
        check("element_scale", self.element_scale, 0.1, 0.4)
    }

    /// Foreground pixel value of a fully covered pixel.
    pub fn foreground(&self) -> f64 {
        BACKGROUND + (1.0 - BACKGROUND) * self.brightness
    }
}

/// A rendered training image together with its attribute and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: GrayImage,
    pub attribute: AttributeId,
    pub spec: SceneSpec,
}

/// Radial serration factor in `[1 - 0.25 s, 1]` with ten teeth.
fn serration(angle: f64, spikiness: f64) -> f64 {
    let phase = fract(angle / TAU * 10.0);
    let tri = libm::fabs(2.0 * phase - 1.0);
    1.0 - 0.25 * spikiness * (1.0 - tri)
}

/// Whether local point `(u, v)`, in units of the outer radius, is inside.
fn inside(shape: ShapeClass, spikiness: f64, u: f64, v: f64) -> bool {
    let rho = libm::hypot(u, v);
    if rho > 1.0 {
        return false;
    }
    let angle = libm::atan2(v, u);
    let m = serration(angle, spikiness);
    let (u, v, rho) = (u / m, v / m, rho / m);
    match shape {
        ShapeClass::Disc => rho <= 1.0,
        ShapeClass::Ring => (0.5..=1.0).contains(&rho),
        ShapeClass::Cross => {
            let (au, av) = (libm::fabs(u), libm::fabs(v));
            (au <= 0.94 && av <= 0.34) || (av <= 0.94 && au <= 0.34)
        }
        ShapeClass::Star => {
            let phase = fract(angle / TAU * 5.0);
            let tip = libm::fabs(2.0 * phase - 1.0);
            rho <= 0.4 + 0.6 * tip
        }
    }
}

fn place(spec: &SceneSpec, size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(f64, f64)>, ShapeworldError> {
    let r = spec.element_scale * size as f64;
    let (lo, hi) = (r, size as f64 - r);
    for _ in 0..PLACEMENT_RESTARTS {
        let mut centers: Vec<(f64, f64)> = Vec::with_capacity(spec.element_count as usize);
        'element: for _ in 0..spec.element_count {
            for _ in 0..PLACEMENT_TRIES {
                let c = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
                if centers
                    .iter()
                    .all(|p| libm::hypot(p.0 - c.0, p.1 - c.1) >= MIN_SEPARATION * r)
                {
                    centers.push(c);
                    continue 'element;
                }
            }
            break;
        }
        if centers.len() == spec.element_count as usize {
            return Ok(centers);
        }
    }
    Err(ShapeworldError::Placement {
        count: spec.element_count,
        scale: spec.element_scale,
    })
}

fn fract(x: f64) -> f64 {
    x - libm::floor(x)
}

/// Renders a scene at the default size.
pub fn render_scene(spec: &SceneSpec) -> Result<GrayImage, ShapeworldError> {
    render_scene_sized(spec, DEFAULT_SIZE)
}

/// Renders a `size`×`size` scene. Pixel coverage is estimated on a 4×4
/// subpixel grid, sharpened to `clamp(3c - 1, 0, 1)` and blended between
/// background and foreground.
pub fn render_scene_sized(spec: &SceneSpec, size: usize) -> Result<GrayImage, ShapeworldError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let centers = place(spec, size, &mut rng)?;
    let r = spec.element_scale * size as f64;
    let fg = spec.foreground();
    let mut image = GrayImage::new(size, size, BACKGROUND);
    let mut coverage = alloc::vec![0.0f64; size * size];
    for &(cx, cy) in &centers {
        let rot = rng.random_range(0.0..TAU);
        let (sin, cos) = (libm::sin(rot), libm::cos(rot));
        let x0 = libm::floor(cx - r).max(0.0) as usize;
        let x1 = (libm::ceil(cx + r) as usize).min(size);
        let y0 = libm::floor(cy - r).max(0.0) as usize;
        let y1 = (libm::ceil(cy + r) as usize).min(size);
        for py in y0..y1 {
            for px in x0..x1 {
                let mut hits = 0;
                for sy in 0..SUBSAMPLES {
                    for sx in 0..SUBSAMPLES {
                        let x = px as f64 + (sx as f64 + 0.5) / SUBSAMPLES as f64 - cx;
                        let y = py as f64 + (sy as f64 + 0.5) / SUBSAMPLES as f64 - cy;
                        let u = (cos * x + sin * y) / r;
                        let v = (-sin * x + cos * y) / r;
                        if inside(spec.shape_class, spec.spikiness, u, v) {
                            hits += 1;
                        }
                    }
                }
                let area = hits as f64 / (SUBSAMPLES * SUBSAMPLES) as f64;
                // Crisp antialiasing: slivers drop to background.
                let c = (3.0 * area - 1.0).clamp(0.0, 1.0);
                let slot = &mut coverage[py * size + px];
                *slot = slot.max(c);
            }
        }
    }
    for (p, c) in image.pixels_mut().iter_mut().zip(&coverage) {
        *p = BACKGROUND + c * (fg - BACKGROUND);
    }
    Ok(image)
}

/// Parameter band of one attribute. Bands deliberately overlap in the
/// dimensions an attribute does not constrain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttributeBand {
    pub brightness: (f64, f64),
    pub spikiness: (f64, f64),
    pub element_count: (u32, u32),
    pub element_scale: (f64, f64),
}

impl AttributeId {
    pub fn band(self) -> AttributeBand {
        match self {
            AttributeId::Radiant => AttributeBand {
                brightness: (0.8, 1.0),
                spikiness: (0.0, 0.3),
                element_count: (1, 2),
                element_scale: (0.1, 0.2),
            },
            AttributeId::Evil => AttributeBand {
                brightness: (0.05, 0.3),
                spikiness: (0.7, 1.0),
                element_count: (1, 2),
                element_scale: (0.1, 0.2),
            },
            AttributeId::Minimal => AttributeBand {
                brightness: (0.4, 0.7),
                spikiness: (0.0, 1.0),
                element_count: (1, 1),
                element_scale: (0.1, 0.2),
            },
            AttributeId::Dense => AttributeBand {
                brightness: (0.4, 0.7),
                spikiness: (0.0, 1.0),
                element_count: (6, 12),
                element_scale: (0.1, 0.12),
            },
        }
    }
}

impl AttributeBand {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> SceneSpec {
        SceneSpec {
            shape_class: ShapeClass::ALL[rng.random_range(0..4)],
            element_count: rng.random_range(self.element_count.0..=self.element_count.1),
            brightness: rng.random_range(self.brightness.0..=self.brightness.1),
            spikiness: rng.random_range(self.spikiness.0..=self.spikiness.1),
            element_scale: rng.random_range(self.element_scale.0..=self.element_scale.1),
            rng_seed: rng.random(),
        }
    }

    pub fn contains(&self, spec: &SceneSpec) -> bool {
        (self.brightness.0..=self.brightness.1).contains(&spec.brightness)
            && (self.spikiness.0..=self.spikiness.1).contains(&spec.spikiness)
            && (self.element_count.0..=self.element_count.1).contains(&spec.element_count)
            && (self.element_scale.0..=self.element_scale.1).contains(&spec.element_scale)
    }
}

/// `n` images of one attribute, a pure function of `(attribute, n, seed)`.
pub fn sample_attribute_dataset(attribute: AttributeId, n: usize, seed: u64) -> Result<Vec<LabeledImage>, ShapeworldError> {
    sample_attribute_dataset_sized(attribute, n, seed, DEFAULT_SIZE)
}

pub fn sample_attribute_dataset_sized(
    attribute: AttributeId,
    n: usize,
    seed: u64,
    size: usize,
) -> Result<Vec<LabeledImage>, ShapeworldError> {
    if n == 0 {
        return Err(ShapeworldError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(attribute.index() as u64);
    let band = attribute.band();
    (0..n)
        .map(|_| {
            let spec = band.sample(&mut rng);
            Ok(LabeledImage {
                pixels: render_scene_sized(&spec, size)?,
                attribute,
                spec,
            })
        })
        .collect()
}

/// All four attributes, `n` each, in attribute order.
pub fn sample_pooled_dataset(n: usize, seed: u64, size: usize) -> Result<Vec<LabeledImage>, ShapeworldError> {
    let mut out = Vec::with_capacity(4 * n);
    for a in AttributeId::ALL {
        out.extend(sample_attribute_dataset_sized(a, n, seed, size)?);
    }
    Ok(out)
}

/// Mean of the foreground pixels (those above [`FOREGROUND_THRESHOLD`]);
/// `0` if there are none.
pub fn measure_brightness(image: &GrayImage) -> f64 {
    let (sum, count) = image
        .pixels()
        .iter()
        .filter(|&&p| p > FOREGROUND_THRESHOLD)
        .fold((0.0, 0usize), |(s, c), &p| (s + p, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Largest absolute difference between a pixel and its 4-connected
/// neighbours.
fn neighbour_contrast(image: &GrayImage, x: usize, y: usize) -> f64 {
    let (w, h) = (image.width(), image.height());
    let p = image.get(x, y);
    let mut best: f64 = 0.0;
    if x > 0 {
        best = best.max(libm::fabs(p - image.get(x - 1, y)));
    }
    if x + 1 < w {
        best = best.max(libm::fabs(p - image.get(x + 1, y)));
    }
    if y > 0 {
        best = best.max(libm::fabs(p - image.get(x, y - 1)));
    }
    if y + 1 < h {
        best = best.max(libm::fabs(p - image.get(x, y + 1)));
    }
    best
}

fn edge_pixel_count(image: &GrayImage) -> usize {
    let mut count = 0;
    for y in 0..image.height() {
        for x in 0..image.width() {
            if neighbour_contrast(image, x, y) > EDGE_THRESHOLD {
                count += 1;
            }
        }
    }
    count
}

/// Fraction of pixels whose 4-neighbour gradient magnitude (largest
/// absolute neighbour difference) exceeds [`EDGE_THRESHOLD`].
pub fn measure_edge_density(image: &GrayImage) -> f64 {
    edge_pixel_count(image) as f64 / image.pixels().len() as f64
}

/// Spikiness proxy: boundary pixels per shape pixel, where shape pixels
/// are those above the midpoint of the image's own value range. Using the
/// image's range makes the measure insensitive to brightness. A flat image
/// gives `0`.
pub fn measure_outline_ratio(image: &GrayImage) -> f64 {
    let (lo, hi) = image
        .pixels()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| (lo.min(p), hi.max(p)));
    if !(hi - lo > 1e-6) {
        return 0.0;
    }
    let mid = 0.5 * (lo + hi);
    let (w, h) = (image.width(), image.height());
    let on = |x: usize, y: usize| image.get(x, y) > mid;
    let (mut shape, mut boundary) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if !on(x, y) {
                continue;
            }
            shape += 1;
            let inner = x > 0 && x + 1 < w && y > 0 && y + 1 < h
                && on(x - 1, y)
                && on(x + 1, y)
                && on(x, y - 1)
                && on(x, y + 1);
            if !inner {
                boundary += 1;
            }
        }
    }
    boundary as f64 / shape as f64
}
