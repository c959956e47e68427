//! RGB images as they travel through the pipeline.

use std::io::Cursor;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// 8-bit RGB image. Serializes as a base64 PNG string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image(RgbImage);

impl Image {
    pub fn new(inner: RgbImage) -> Self {
        Self(inner)
    }

    pub fn from_fn(width: u32, height: u32, f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        let mut f = f;
        Self(RgbImage::from_fn(width, height, |x, y| image::Rgb(f(x, y))))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self(image::open(path)?.to_rgb8()))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.0.save_with_format(path, ImageFormat::Png)?;
        Ok(())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(Self(image::load_from_memory(bytes)?.to_rgb8()))
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.0.write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn from_base64_png(data: &str) -> Result<Self> {
        let bytes = BASE64
            .decode(data.trim())
            .map_err(|e| Error::contract(format!("invalid base64 image: {e}")))?;
        Self::from_png_bytes(&bytes)
    }

    pub fn to_base64_png(&self) -> Result<String> {
        Ok(BASE64.encode(self.to_png_bytes()?))
    }

    pub fn width(&self) -> u32 {
        self.0.width()
    }

    pub fn height(&self) -> u32 {
        self.0.height()
    }

    pub fn pixels(&self) -> &RgbImage {
        &self.0
    }

    pub fn into_inner(self) -> RgbImage {
        self.0
    }

    /// Hex SHA-256 over the dimensions and raw pixels.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.width().to_le_bytes());
        h.update(self.height().to_le_bytes());
        h.update(self.0.as_raw());
        hex(&h.finalize())
    }

    /// Box-filter downsample to `side`×`side`, returned as row-major RGB
    /// triples scaled to [0, 1].
    pub fn downsample(&self, side: usize) -> Vec<f64> {
        let (w, h) = (self.width() as usize, self.height() as usize);
        let mut sums = vec![0.0f64; side * side * 3];
        let mut counts = vec![0u32; side * side];
        for (x, y, px) in self.0.enumerate_pixels() {
            let cx = x as usize * side / w.max(1);
            let cy = y as usize * side / h.max(1);
            let cell = cy * side + cx;
            counts[cell] += 1;
            for c in 0..3 {
                sums[cell * 3 + c] += px.0[c] as f64;
            }
        }
        for (cell, &n) in counts.iter().enumerate() {
            for c in 0..3 {
                let v = &mut sums[cell * 3 + c];
                *v = if n == 0 { 0.0 } else { *v / (n as f64 * 255.0) };
            }
        }
        sums
    }

    pub fn resized(&self, width: u32, height: u32) -> Self {
        if self.width() == width && self.height() == height {
            return self.clone();
        }
        Self(image::imageops::resize(
            &self.0,
            width,
            height,
            image::imageops::FilterType::Triangle,
        ))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Serialize for Image {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let encoded = self.to_base64_png().map_err(serde::ser::Error::custom)?;
        s.serialize_str(&encoded)
    }
}

impl<'de> Deserialize<'de> for Image {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Image::from_base64_png(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_of_uniform_image_is_uniform() {
        let img = Image::from_fn(32, 48, |_, _| [255, 0, 51]);
        let d = img.downsample(16);
        assert_eq!(d.len(), 16 * 16 * 3);
        for px in d.chunks(3) {
            assert!((px[0] - 1.0).abs() < 1e-12);
            assert_eq!(px[1], 0.0);
            assert!((px[2] - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn base64_round_trip_is_lossless() {
        let img = Image::from_fn(7, 5, |x, y| [x as u8 * 30, y as u8 * 40, 7]);
        let json = serde_json::to_string(&img).unwrap();
        let back: Image = serde_json::from_str(&json).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.digest(), img.digest());
    }
}
