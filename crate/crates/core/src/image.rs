use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Single-channel image with pixel values nominally in `[0,1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, fill: f64) -> Self {
        Self {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Option<Self> {
        (pixels.len() == width * height && width > 0 && height > 0).then_some(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    /// As a `[1, 1, H, W]` batch.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![1, 1, self.height, self.width], self.pixels.clone()).expect("image shape")
    }

    /// Stacks images of identical size into a `[N, 1, H, W]` batch.
    pub fn batch(images: &[&GrayImage]) -> Option<Tensor> {
        let first = images.first()?;
        let (w, h) = (first.width, first.height);
        let mut data = Vec::with_capacity(images.len() * w * h);
        for img in images {
            if img.width != w || img.height != h {
                return None;
            }
            data.extend_from_slice(&img.pixels);
        }
        Tensor::from_vec(vec![images.len(), 1, h, w], data).ok()
    }

    /// Splits a `[N, 1, H, W]` tensor into images.
    pub fn unbatch(t: &Tensor) -> Vec<GrayImage> {
        let s = t.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        t.data()
            .chunks(h * w)
            .map(|c| GrayImage {
                width: w,
                height: h,
                pixels: c.to_vec(),
            })
            .collect()
    }

    pub fn bit_eq(&self, other: &GrayImage) -> bool {
        self.width == other.width
            && self.height == other.height
            && self
                .pixels
                .iter()
                .zip(&other.pixels)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Rounds every pixel to the nearest of 256 levels, as an 8-bit file would.
    pub fn quantized_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| quantize(p)).collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Option<Self> {
        Self::from_pixels(width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }
}

pub fn quantize(p: f64) -> u8 {
    libm::round(p.clamp(0.0, 1.0) * 255.0) as u8
}
