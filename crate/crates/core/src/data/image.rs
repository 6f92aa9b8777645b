use std::path::Path;

use image::{GrayImage, RgbImage};
use retouch_tensor::Array;

use crate::error::{Error, Result};

/// An RGB raster `(3, H, W)` with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    array: Array<f32>,
}

/// 8-bit level to the internal range: `k / 127.5 - 1`.
pub fn level_to_signed(k: u8) -> f32 {
    k as f32 / 127.5 - 1.0
}

/// Internal value to the nearest 8-bit level.
pub fn signed_to_level(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

impl ImageTensor {
    pub fn new(array: Array<f32>) -> Result<Self> {
        let shape = array.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::contract("image tensor", "(3, H, W)", shape));
        }
        if array.data().iter().any(|v| !v.is_finite() || v.abs() > 1.0 + 1e-6) {
            return Err(Error::Numeric("image values must be finite and within [-1, 1]".into()));
        }
        Ok(Self { array })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self { array: Array::full(&[3, height, width], value) }
    }

    /// From interleaved 8-bit RGB.
    pub fn from_rgb8(width: usize, height: usize, pixels: &[u8]) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::contract("RGB buffer", width * height * 3, pixels.len()));
        }
        let plane = width * height;
        let mut data = vec![0.0f32; 3 * plane];
        for (p, px) in pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + p] = level_to_signed(px[c]);
            }
        }
        Ok(Self { array: Array::from_vec(&[3, height, width], data) })
    }

    /// Interleaved 8-bit RGB, rounding to the nearest level.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.width() * self.height();
        let d = self.array.data();
        (0..plane).flat_map(|p| (0..3).map(move |c| signed_to_level(d[c * plane + p]))).collect()
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Image(other),
            })?
            .to_rgb8();
        Self::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = RgbImage::from_raw(self.width() as u32, self.height() as u32, self.to_rgb8())
            .expect("buffer length matches dimensions");
        img.save(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })
    }

    pub fn height(&self) -> usize {
        self.array.dim(1)
    }

    pub fn width(&self) -> usize {
        self.array.dim(2)
    }

    pub fn array(&self) -> &Array<f32> {
        &self.array
    }

    pub fn data(&self) -> &[f32] {
        self.array.data()
    }

    pub fn into_array(self) -> Array<f32> {
        self.array
    }

    /// Same image after an 8-bit round trip.
    pub fn quantized(&self) -> Self {
        Self::from_rgb8(self.width(), self.height(), &self.to_rgb8()).expect("dimensions preserved")
    }

    /// Stacks images of equal size into `(N, 3, H, W)`.
    pub fn stack(images: &[&ImageTensor]) -> Result<Array<f32>> {
        let first = images.first().ok_or_else(|| Error::Argument("cannot stack zero images".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if img.array.shape() != first.array.shape() {
                return Err(Error::contract("image batch", first.array.shape(), img.array.shape()));
            }
            data.extend_from_slice(img.data());
        }
        Ok(Array::from_vec(&[images.len(), 3, h, w], data))
    }

    /// Image `index` of a batch `(N, 3, H, W)`, clamped into `[-1, 1]`.
    pub fn from_batch(batch: &Array<f32>, index: usize) -> Result<Self> {
        let (n, c, h, w) = batch.dims4();
        if c != 3 || index >= n {
            return Err(Error::contract("image batch", format!("(>{index}, 3, H, W)"), batch.shape()));
        }
        let len = 3 * h * w;
        let data = batch.data()[index * len..(index + 1) * len].iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        Self::new(Array::from_vec(&[3, h, w], data))
    }
}

/// A binary raster marking changed pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::contract("mask buffer", width * height, bits.len()));
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
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

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Fraction of set pixels.
    pub fn area_ratio(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Image(other),
            })?
            .to_luma8();
        let bits = img.as_raw().iter().map(|&v| v >= 128).collect();
        Self::new(img.width() as usize, img.height() as usize, bits)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        let img = GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer matches dimensions");
        img.save(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_round_trip_is_exact() {
        for k in 0..=255u8 {
            assert_eq!(signed_to_level(level_to_signed(k)), k);
        }
        assert_eq!(level_to_signed(0), -1.0);
        assert_eq!(level_to_signed(255), 1.0);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = ImageTensor::from_rgb8(4, 3, &pixels).unwrap();
        let path = dir.path().join("x.png");
        img.save_png(&path).unwrap();
        let back = ImageTensor::load_png(&path).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.to_rgb8(), pixels);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(ImageTensor::new(Array::full(&[3, 2, 2], 1.5)).is_err());
        assert!(ImageTensor::new(Array::full(&[1, 2, 2], 0.0)).is_err());
    }
}
