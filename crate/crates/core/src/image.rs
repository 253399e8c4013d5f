//! Interleaved RGB float images and their on-disk encodings.
//!
//! Images are `height × width × 3`, row-major, stored as `f64`. Two encodings
//! are supported: 8-bit PNG (values clamped to [0,1]) and little-endian raw
//! float32 with a JSON sidecar describing the shape.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image data length {got} does not match {width}x{height}x3")]
    Shape { width: usize, height: usize, got: usize },
    #[error("image shape mismatch: {0}x{1} vs {2}x{3}")]
    Mismatch(usize, usize, usize, usize),
    #[error("png decode: {0}")]
    PngDecode(String),
    #[error("png encode: {0}")]
    PngEncode(String),
    #[error("raw float payload: {0}")]
    Raw(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if data.len() != width * height * 3 {
            return Err(ImageError::Shape { width, height, got: data.len() });
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `[height, width, 3]`, the order used on the wire.
    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, 3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_shape(&self, other: &Image) -> Result<(), ImageError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(ImageError::Mismatch(self.width, self.height, other.width, other.height))
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn dot(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn scaled(&self, factor: f64) -> Image {
        let mut out = self.clone();
        out.scale(factor);
        out
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, other: &Image, factor: f64) -> Result<(), ImageError> {
        self.check_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Image) -> Result<Image, ImageError> {
        self.check_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Image { width: self.width, height: self.height, data })
    }

    pub fn max_abs_diff(&self, other: &Image) -> Result<f64, ImageError> {
        self.check_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    pub fn mse(&self, other: &Image) -> Result<f64, ImageError> {
        self.check_shape(other)?;
        let n = self.data.len().max(1) as f64;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
    }

    /// Peak signal-to-noise ratio in dB for signals in [0,1].
    pub fn psnr(&self, other: &Image) -> Result<f64, ImageError> {
        let mse = self.mse(other)?;
        Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, ImageError> {
        let mut out = Vec::new();
        {
            let mut encoder = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            encoder.set_color(png::ColorType::Rgb);
            encoder.set_depth(png::BitDepth::Eight);
            let mut writer = encoder.write_header().map_err(|e| ImageError::PngEncode(e.to_string()))?;
            let bytes: Vec<u8> = self.data.iter().map(|v| to_u8(*v)).collect();
            writer.write_image_data(&bytes).map_err(|e| ImageError::PngEncode(e.to_string()))?;
        }
        Ok(out)
    }

    /// Decodes 8-bit RGB or RGBA PNG data; alpha is dropped.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Image, ImageError> {
        let mut decoder = png::Decoder::new(Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| ImageError::PngDecode(e.to_string()))?;
        let mut buf = vec![0u8; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(|e| ImageError::PngDecode(e.to_string()))?;
        let (width, height) = (info.width as usize, info.height as usize);
        let channels = match info.color_type {
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            other => return Err(ImageError::PngDecode(format!("unsupported color type {other:?}"))),
        };
        let mut data = Vec::with_capacity(width * height * 3);
        for px in buf[..info.buffer_size()].chunks_exact(channels) {
            let rgb = if channels < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
            data.extend(rgb.iter().map(|&b| b as f64 / 255.0));
        }
        Image::from_data(width, height, data)
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Image, ImageError> {
        Image::from_png_bytes(&fs::read(path)?)
    }

    pub fn to_f32_le_bytes(&self) -> Vec<u8> {
        f64_to_f32_le(&self.data)
    }

    pub fn from_f32_le_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Image, ImageError> {
        Image::from_data(width, height, f32_le_to_f64(bytes)?)
    }

    /// Writes `<path>` as raw little-endian float32 and `<path>.json` with the shape header.
    pub fn write_raw(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let path = path.as_ref();
        fs::write(path, self.to_f32_le_bytes())?;
        let header = RawHeader {
            width: self.width,
            height: self.height,
            channels: 3,
            dtype: "float32".into(),
            endianness: "little".into(),
        };
        fs::write(sidecar_path(path), serde_json::to_vec_pretty(&header)?)?;
        Ok(())
    }

    pub fn read_raw(path: impl AsRef<Path>) -> Result<Image, ImageError> {
        let path = path.as_ref();
        let header: RawHeader = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
        if header.channels != 3 || header.dtype != "float32" || header.endianness != "little" {
            return Err(ImageError::Raw(format!("unsupported header {header:?}")));
        }
        Image::from_f32_le_bytes(header.width, header.height, &fs::read(path)?)
    }
}

/// Sidecar describing a raw float image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub dtype: String,
    pub endianness: String,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn f64_to_f32_le(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect()
}

pub fn f32_le_to_f64(bytes: &[u8]) -> Result<Vec<f64>, ImageError> {
    if !bytes.len().is_multiple_of(4) {
        return Err(ImageError::Raw(format!("byte length {} is not a multiple of 4", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_exact_on_8bit_grid() {
        let mut img = Image::zeros(5, 3);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i * 17 % 256) as f64 / 255.0;
        }
        let back = Image::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap();
        assert_eq!(back.shape(), [3, 5, 3]);
        assert!(img.max_abs_diff(&back).unwrap() < 1e-12);
    }

    #[test]
    fn raw_roundtrip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.f32");
        let img = Image::from_data(2, 1, vec![0.25, -3.5, 7.0, 1e-3, 0.5, 2.0]).unwrap();
        img.write_raw(&path).unwrap();
        assert!(dir.path().join("img.f32.json").exists());
        let back = Image::read_raw(&path).unwrap();
        assert_eq!(back.data(), &[0.25, -3.5, 7.0, 1e-3f32 as f64, 0.5, 2.0]);
    }

    #[test]
    fn psnr_of_identical_is_infinite() {
        let a = Image::filled(4, 4, [0.2, 0.4, 0.6]);
        assert!(a.psnr(&a).unwrap().is_infinite());
        let b = Image::filled(4, 4, [0.3, 0.5, 0.7]);
        assert!((a.psnr(&b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn wrong_length_rejected() {
        assert!(matches!(Image::from_data(2, 2, vec![0.0; 11]), Err(ImageError::Shape { .. })));
    }
}
