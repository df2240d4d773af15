//! RGB image container with values normalized to `[0, 1]`.
//!
//! Pixels are stored row-major with the channel innermost (`HWC`). Loading
//! goes through 8-bit RGB and divides by 255; saving rounds back to 8 bits.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{CodecError, Result};

pub const CHANNELS: usize = 3;

/// Smallest side accepted for an image, one patch at the largest supported
/// patch grid.
pub const MIN_SIDE: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(CodecError::InvalidInput(format!(
                "image is {height}x{width}, both sides must be at least {MIN_SIDE}"
            )));
        }
        if data.len() != height * width * CHANNELS {
            return Err(CodecError::Shape(format!(
                "{} values supplied for a {height}x{width}x3 image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CodecError::InvalidInput(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image from arbitrary values, clamping each to `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * CHANNELS])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * CHANNELS + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(CodecError::Shape(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in top..top + height {
            let start = self.index(y, left, 0);
            data.extend_from_slice(&self.data[start..start + width * CHANNELS]);
        }
        Self::new(height, width, data)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let i = self.index(y, x, 0);
                data.extend_from_slice(&self.data[i..i + CHANNELS]);
            }
        }
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(CodecError::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
            ));
        }
        let rgb = image::open(path)?.to_rgb8();
        Self::from_rgb8(&rgb)
    }

    pub fn from_rgb8(rgb: &RgbImage) -> Result<Self> {
        let (w, h) = rgb.dimensions();
        let data = rgb
            .as_raw()
            .iter()
            .map(|&b| f64::from(b) / 255.0)
            .collect();
        Self::new(h as usize, w as usize, data)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let mut out = RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in out.enumerate_pixels_mut() {
            let i = self.index(y as usize, x as usize, 0);
            *px = Rgb([
                to_u8(self.data[i]),
                to_u8(self.data[i + 1]),
                to_u8(self.data[i + 2]),
            ]);
        }
        out
    }

    /// Writes the image; the format follows the file extension (PNG or PPM).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save(path.as_ref())?;
        Ok(())
    }

    /// Mean squared error over all pixels and channels.
    pub fn mse(&self, other: &ImageTensor) -> Result<f64> {
        self.check_same_shape(other)?;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    pub fn check_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(CodecError::Shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
