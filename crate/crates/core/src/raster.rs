//! Dense real-valued rasters (images, patches, perturbation fields).
//!
//! Layout is row-major with channels innermost: index = (row * width + col) * channels + ch.
//! Pixel values live in [0, 1] for image content; perturbation fields are unbounded.

use crate::error::{Error, Result};
use std::path::Path;

/// An H x W x C raster of f64 samples. Images use C = 3; several of the
/// numeric oracles exercise single-channel rasters.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

/// Alias used where the role is a full visual input.
pub type Image = Raster;
/// Alias used where the role is an s x s patch or perturbation field.
pub type Patch = Raster;

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::shape("raster data length", expected, data.len()));
        }
        Ok(Raster { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Raster { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Raster { height, width, channels, data: vec![value; height * width * channels] }
    }

    /// Square patch helper.
    pub fn square(side: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        Raster::new(side, side, channels, data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        self.data[(row * self.width + col) * self.channels + ch] = value;
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, self.channels)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Raster {
        Raster {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Raster, f: impl Fn(f64, f64) -> f64) -> Result<Raster> {
        if !self.same_shape(other) {
            return Err(Error::shape("raster zip", self.shape_string(), other.shape_string()));
        }
        Ok(Raster {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn clamp01(&self) -> Raster {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Shift content by (dr, dc) pixels, replicating edge rows/columns into
    /// the exposed border.
    pub fn translate(&self, dr: isize, dc: isize) -> Raster {
        let mut out = Raster::zeros(self.height, self.width, self.channels);
        for r in 0..self.height {
            for c in 0..self.width {
                let sr = (r as isize - dr).clamp(0, self.height as isize - 1) as usize;
                let sc = (c as isize - dc).clamp(0, self.width as isize - 1) as usize;
                for ch in 0..self.channels {
                    out.set(r, c, ch, self.get(sr, sc, ch));
                }
            }
        }
        out
    }

    /// Center-anchored rescale plus subpixel shift, bilinearly sampled with
    /// edge clamping. `scale` > 1 magnifies content.
    pub fn scale_shift(&self, scale: f64, dr: f64, dc: f64) -> Raster {
        let mut out = Raster::zeros(self.height, self.width, self.channels);
        let cy = (self.height as f64 - 1.0) / 2.0;
        let cx = (self.width as f64 - 1.0) / 2.0;
        for r in 0..self.height {
            let sr = cy + (r as f64 - cy) / scale - dr;
            let sr = sr.clamp(0.0, self.height as f64 - 1.0);
            let r0 = sr.floor() as usize;
            let r1 = (r0 + 1).min(self.height - 1);
            let fr = sr - r0 as f64;
            for c in 0..self.width {
                let sc = cx + (c as f64 - cx) / scale - dc;
                let sc = sc.clamp(0.0, self.width as f64 - 1.0);
                let c0 = sc.floor() as usize;
                let c1 = (c0 + 1).min(self.width - 1);
                let fc = sc - c0 as f64;
                for ch in 0..self.channels {
                    let v = (1.0 - fr) * (1.0 - fc) * self.get(r0, c0, ch)
                        + (1.0 - fr) * fc * self.get(r0, c1, ch)
                        + fr * (1.0 - fc) * self.get(r1, c0, ch)
                        + fr * fc * self.get(r1, c1, ch);
                    out.set(r, c, ch, v);
                }
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Quantize to 8-bit RGB and write as PNG. Quantization happens only at
    /// export; all in-memory math stays in f64.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::InvalidInput(format!(
                "png export expects 3 channels, raster has {}",
                self.channels
            )));
        }
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let file = std::fs::File::create(path)?;
        let writer = std::io::BufWriter::new(file);
        let mut encoder = png::Encoder::new(writer, self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut png_writer = encoder.write_header().map_err(|e| Error::Png(e.to_string()))?;
        png_writer
            .write_image_data(&bytes)
            .map_err(|e| Error::Png(e.to_string()))?;
        Ok(())
    }

    /// Load an 8-bit RGB PNG into a [0, 1] raster.
    pub fn load_png(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Png(e.to_string()))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Png(format!(
                "expected 8-bit RGB png, got {:?}/{:?}",
                info.color_type, info.bit_depth
            )));
        }
        let bytes = &buf[..info.buffer_size()];
        let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Raster::new(info.height as usize, info.width as usize, 3, data)
    }
}
