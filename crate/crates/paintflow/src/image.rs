//! Raster images: the single currency every module trades in.
//!
//! Pixels are `f32` in the canonical range [-1, 1], stored row-major as
//! (y, x, channel). PNG persistence maps -1 -> 0 and +1 -> 255 per channel.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// Canonical pixel range lower bound.
pub const PIXEL_MIN: f32 = -1.0;
/// Canonical pixel range upper bound.
pub const PIXEL_MAX: f32 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PixelImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl PixelImage {
    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        PixelImage {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{}x{} = {}", height, width, channels, height * width * channels),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(PixelImage { height, width, channels, data })
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Stamp one value across all channels of a pixel.
    #[inline]
    pub fn set_all_channels(&mut self, y: usize, x: usize, v: f32) {
        let base = (y * self.width + x) * self.channels;
        for c in 0..self.channels {
            self.data[base + c] = v;
        }
    }

    pub fn same_shape(&self, other: &PixelImage) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Clamp every value into the canonical range.
    pub fn clamp_canonical(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(PIXEL_MIN, PIXEL_MAX);
        }
    }

    /// Encode to 8-bit PNG bytes. Channel count must be 1 or 3.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            n => {
                return Err(Error::DimensionMismatch {
                    expected: "1 or 3 channels".into(),
                    actual: format!("{n} channels"),
                })
            }
        };
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(color);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc
                .write_header()
                .map_err(|e| Error::Png { path: "<memory>".into(), message: e.to_string() })?;
            let bytes: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
            writer
                .write_image_data(&bytes)
                .map_err(|e| Error::Png { path: "<memory>".into(), message: e.to_string() })?;
        }
        Ok(out)
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::Png { path: "<memory>".into(), message: e.to_string() })?;
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Png { path: "<memory>".into(), message: e.to_string() })?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::CorruptData("png must be 8-bit".into()));
        }
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::Rgb => 3,
            other => return Err(Error::CorruptData(format!("unsupported png color type {other:?}"))),
        };
        let (w, h) = (info.width as usize, info.height as usize);
        let data = buf[..w * h * channels].iter().map(|&b| dequantize(b)).collect();
        PixelImage::from_data(h, w, channels, data)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_png_bytes()?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        use std::io::Write;
        let mut w = BufWriter::new(file);
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        use std::io::Read;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::from_png_bytes(&bytes).map_err(|e| match e {
            Error::Png { message, .. } => Error::Png { path: path.into(), message },
            other => other,
        })
    }

    /// Horizontal concatenation with a 2px separator column, used for galleries.
    pub fn hconcat(images: &[&PixelImage], separator_value: f32) -> Result<PixelImage> {
        let first = images.first().ok_or(Error::EmptyCorpus)?;
        let (h, c) = (first.height, first.channels);
        for img in images {
            if img.height != h || img.channels != c {
                return Err(Error::DimensionMismatch {
                    expected: format!("height {h}, {c} channels"),
                    actual: format!("height {}, {} channels", img.height, img.channels),
                });
            }
        }
        let sep = 2usize;
        let total_w: usize = images.iter().map(|i| i.width).sum::<usize>() + sep * (images.len() - 1);
        let mut out = PixelImage::filled(h, total_w, c, separator_value);
        let mut x0 = 0;
        for img in images {
            for y in 0..h {
                for x in 0..img.width {
                    for ch in 0..c {
                        out.set(y, x0 + x, ch, img.get(y, x, ch));
                    }
                }
            }
            x0 += img.width + sep;
        }
        Ok(out)
    }
}

#[inline]
fn quantize(v: f32) -> u8 {
    let clamped = v.clamp(PIXEL_MIN, PIXEL_MAX);
    ((clamped + 1.0) * 127.5).round() as u8
}

#[inline]
fn dequantize(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}
