use std::io::Cursor;
use std::path::Path;

use ::image::{DynamicImage, ImageFormat, ImageReader};

use crate::error::{Error, Result};

/// Row-major `height × width × channels` 8-bit image, channels interleaved.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Image({}x{}x{})", self.height, self.width, self.channels)
    }
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("unsupported channel count {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::mismatch(
                "image buffer",
                height * width * channels,
                data.len(),
            ));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
            .expect("valid dimensions")
    }

    /// Builds an image from channel planes (all of channel 0, then channel 1, ...).
    pub fn from_planar(height: usize, width: usize, channels: usize, planar: &[u8]) -> Result<Self> {
        let plane = height * width;
        if planar.len() != plane * channels {
            return Err(Error::mismatch("planar image buffer", plane * channels, planar.len()));
        }
        let mut data = vec![0; planar.len()];
        for c in 0..channels {
            for p in 0..plane {
                data[p * channels + c] = planar[c * plane + p];
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn to_planar(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = vec![0; self.data.len()];
        for p in 0..plane {
            for c in 0..self.channels {
                out[c * plane + p] = self.data[p * self.channels + c];
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> u8 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// Luma values `0.299 R + 0.587 G + 0.114 B` (identity for one channel).
    pub fn luma(&self) -> Vec<f64> {
        match self.channels {
            1 => self.data.iter().map(|&v| f64::from(v)).collect(),
            _ => self
                .data
                .chunks_exact(3)
                .map(|p| 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]))
                .collect(),
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = ImageReader::new(Cursor::new(bytes))
            .with_guessed_format()
            .map_err(|e| Error::format("image", e.to_string()))?
            .decode()
            .map_err(|e| Error::format("image", e.to_string()))?;
        Self::from_dynamic(img)
    }

    pub fn open(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    fn from_dynamic(img: DynamicImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        if img.color().has_color() {
            Self::new(h, w, 3, img.into_rgb8().into_raw())
        } else {
            Self::new(h, w, 1, img.into_luma8().into_raw())
        }
    }

    pub fn to_png(&self) -> Vec<u8> {
        let (w, h) = (self.width as u32, self.height as u32);
        let dynamic = if self.channels == 1 {
            DynamicImage::ImageLuma8(
                ::image::GrayImage::from_raw(w, h, self.data.clone()).expect("buffer size checked"),
            )
        } else {
            DynamicImage::ImageRgb8(
                ::image::RgbImage::from_raw(w, h, self.data.clone()).expect("buffer size checked"),
            )
        };
        let mut out = Cursor::new(Vec::new());
        dynamic
            .write_to(&mut out, ImageFormat::Png)
            .expect("png encoding into memory");
        out.into_inner()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planar_layout_round_trip() {
        let img = Image::new(1, 2, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(img.to_planar(), vec![1, 4, 2, 5, 3, 6]);
        assert_eq!(Image::from_planar(1, 2, 3, &img.to_planar()).unwrap(), img);
    }

    #[test]
    fn png_round_trip_keeps_channels() {
        let rgb = Image::new(2, 2, 3, (0..12).map(|v| v * 20).collect()).unwrap();
        assert_eq!(Image::decode(&rgb.to_png()).unwrap(), rgb);
        let gray = Image::new(2, 3, 1, vec![0, 50, 100, 150, 200, 250]).unwrap();
        assert_eq!(Image::decode(&gray.to_png()).unwrap(), gray);
    }

    #[test]
    fn garbage_is_not_an_image() {
        assert!(Image::decode(b"definitely not a png").is_err());
    }
}
