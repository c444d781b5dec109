//! Plain 2-D rasters: 8-bit intensity images, f64 depth maps, binary masks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower edge of the depth range the renderer and the network work in (mm).
pub const DEPTH_MIN_MM: f64 = 20.0;
/// Upper edge of the depth range (mm).
pub const DEPTH_MAX_MM: f64 = 90.0;

pub fn normalize_depth(mm: f64) -> f64 {
    (mm - DEPTH_MIN_MM) / (DEPTH_MAX_MM - DEPTH_MIN_MM)
}

pub fn denormalize_depth(unit: f64) -> f64 {
    DEPTH_MIN_MM + unit * (DEPTH_MAX_MM - DEPTH_MIN_MM)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "gray image {width}x{height} with {} pixels",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// `[1, 1, H, W]` tensor with intensities scaled to [0, 1].
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        Tensor::new(vec![1, 1, self.height, self.width], data).expect("consistent dims")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.pixels,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )?;
        Ok(())
    }

    /// Loads a PNG. Colour images keep only the red channel, matching the
    /// single-channel input of the eye cameras.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let pixels = rgb.pixels().map(|p| p.0[0]).collect();
        Self::new(w as usize, h as usize, pixels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::Shape(format!(
                "depth map {width}x{height} with {} values",
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn same_dims(&self, other: &DepthMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Millimetre map to a `[1, 1, H, W]` tensor of normalized depths.
    pub fn to_normalized_tensor(&self) -> Tensor {
        let data = self.values.iter().map(|&d| normalize_depth(d)).collect();
        Tensor::new(vec![1, 1, self.height, self.width], data).expect("consistent dims")
    }

    /// Inverse of [`DepthMap::to_normalized_tensor`] for a single-sample tensor.
    pub fn from_normalized(t: &Tensor) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if n != 1 || c != 1 {
            return Err(Error::Shape(format!(
                "expected [1, 1, H, W], got {:?}",
                t.shape()
            )));
        }
        Self::new(
            w,
            h,
            t.data().iter().map(|&u| denormalize_depth(u)).collect(),
        )
    }

    /// Raw little-endian f32, row-major.
    pub fn to_f32_bytes(&self) -> Vec<u8> {
        self.values
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect()
    }

    pub fn from_f32_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 4 {
            return Err(Error::Format(format!(
                "depth file has {} bytes, expected {}",
                bytes.len(),
                width * height * 4
            )));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::new(width, height, values)
    }

    /// Grayscale visualization: near is bright, far is dark, over the
    /// working depth range.
    pub fn to_visualization(&self) -> GrayImage {
        let pixels = self
            .values
            .iter()
            .map(|&d| ((1.0 - normalize_depth(d)).clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        GrayImage::new(self.width, self.height, pixels).expect("consistent dims")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Shape(format!(
                "mask {width}x{height} with {} entries",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % self.width, i / self.width))
    }

    /// True if any 8-neighbour of `(x, y)` (inside the raster) has value `value`.
    pub fn has_neighbour(&self, x: usize, y: usize, value: bool) -> bool {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= self.width as isize || ny >= self.height as isize {
                    if !value {
                        // outside the raster counts as unset
                        return true;
                    }
                    continue;
                }
                if self.get(nx as usize, ny as usize) == value {
                    return true;
                }
            }
        }
        false
    }

    /// Morphological dilation with a 3x3 square.
    pub fn dilate(&self) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| {
            self.get(x, y) || self.has_neighbour(x, y, true)
        })
    }

    /// Rotates the raster by 90 degrees clockwise.
    pub fn rotate90(&self) -> Mask {
        let (w, h) = (self.width, self.height);
        Mask::from_fn(h, w, |x, y| self.get(y, h - 1 - x))
    }
}

impl DepthMap {
    /// Rotates the raster by 90 degrees clockwise.
    pub fn rotate90(&self) -> DepthMap {
        let (w, h) = (self.width, self.height);
        let mut values = Vec::with_capacity(w * h);
        for y in 0..w {
            for x in 0..h {
                values.push(self.get(y, h - 1 - x));
            }
        }
        DepthMap::new(h, w, values).expect("consistent dims")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_normalization_round_trip() {
        for d in [20.0, 37.5, 90.0] {
            assert!((denormalize_depth(normalize_depth(d)) - d).abs() < 1e-12);
        }
        assert_eq!(normalize_depth(20.0), 0.0);
        assert_eq!(normalize_depth(90.0), 1.0);
    }

    #[test]
    fn f32_bytes_round_trip() {
        let d = DepthMap::new(2, 2, vec![20.5, 33.25, 41.0, 89.75]).unwrap();
        let back = DepthMap::from_f32_bytes(2, 2, &d.to_f32_bytes()).unwrap();
        assert_eq!(back, d);
        assert!(DepthMap::from_f32_bytes(2, 2, &[0; 15]).is_err());
    }

    #[test]
    fn rotate_four_times_is_identity() {
        let m = Mask::from_fn(5, 3, |x, y| (x * 7 + y * 3) % 4 == 0);
        assert_eq!(m.rotate90().rotate90().rotate90().rotate90(), m);
        let d = DepthMap::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = d.rotate90();
        assert_eq!((r.width(), r.height()), (2, 3));
        assert_eq!(r.values(), &[4.0, 1.0, 5.0, 2.0, 6.0, 3.0]);
    }

    #[test]
    fn dilation_grows_single_pixel_to_square() {
        let mut m = Mask::empty(5, 5);
        m.set(2, 2, true);
        assert_eq!(m.dilate().count(), 9);
    }
}
