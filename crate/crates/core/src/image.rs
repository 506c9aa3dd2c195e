//! Row-major `H x W x C` float rasters with PNG and float-grid persistence.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("grid file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Png(#[from] image::ImageError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if data.len() != width * height * channels {
            return Err(ImageError::Shape(format!(
                "{}x{}x{} image needs {} values, got {}",
                height,
                width,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    /// RGB image where every pixel is `rgb`.
    pub fn solid(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            channels: 3,
            data,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Writes an 8-bit PNG. Values are clamped to `[0, 1]`; 1 channel is
    /// written as gray, 3 as RGB.
    pub fn write_png(&self, path: &Path) -> Result<(), ImageError> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            4 => image::ExtendedColorType::Rgba8,
            c => return Err(ImageError::Shape(format!("cannot write {c}-channel PNG"))),
        };
        image::save_buffer_with_format(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )?;
        Ok(())
    }

    /// Reads a PNG as RGB in `[0, 1]`.
    pub fn read_png(path: &Path) -> Result<Image, ImageError> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Image::new(w as usize, h as usize, 3, data)
    }

    /// Float grid: text header `SDFMESH-GRID 1`, `height width channels`,
    /// `end`, then little-endian `f32` values.
    pub fn write_grid<W: Write>(&self, mut w: W) -> Result<(), ImageError> {
        writeln!(w, "{GRID_MAGIC}")?;
        writeln!(w, "{} {} {}", self.height, self.width, self.channels)?;
        writeln!(w, "end")?;
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_grid<R: Read>(r: R) -> Result<Image, ImageError> {
        let mut r = BufReader::new(r);
        let mut header = Vec::new();
        for _ in 0..3 {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(ImageError::Format("truncated header".into()));
            }
            header.push(line.trim_end().to_string());
        }
        if header[0] != GRID_MAGIC || header[2] != "end" {
            return Err(ImageError::Format("bad header".into()));
        }
        let dims: Vec<usize> = header[1]
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| ImageError::Format(format!("bad dimension `{s}`"))))
            .collect::<Result<_, _>>()?;
        let [h, w, c] = dims[..] else {
            return Err(ImageError::Format("expected three dimensions".into()));
        };
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != h * w * c * 4 {
            return Err(ImageError::Format(format!(
                "expected {} data bytes, found {}",
                h * w * c * 4,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Image::new(w, h, c, data)
    }

    pub fn save_grid(&self, path: &Path) -> Result<(), ImageError> {
        let mut buf = Vec::new();
        self.write_grid(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load_grid(path: &Path) -> Result<Image, ImageError> {
        Image::read_grid(std::fs::File::open(path)?)
    }
}

pub const GRID_MAGIC: &str = "SDFMESH-GRID 1";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_round_trip_keeps_infinity() {
        let img = Image::new(2, 1, 1, vec![1.5, f64::INFINITY]).unwrap();
        let mut buf = Vec::new();
        img.write_grid(&mut buf).unwrap();
        assert!(buf.starts_with(b"SDFMESH-GRID 1\n1 2 1\nend\n"));
        assert_eq!(Image::read_grid(&buf[..]).unwrap(), img);
    }

    #[test]
    fn png_round_trip_is_8_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = Image::new(2, 2, 3, (0..12).map(|i| i as f64 / 11.0).collect()).unwrap();
        img.write_png(&path).unwrap();
        let back = Image::read_png(&path).unwrap();
        assert!(img.max_abs_diff(&back) <= 0.5 / 255.0 + 1e-12);
        let expect: Vec<f64> = (3..6)
            .map(|i| (i as f64 / 11.0 * 255.0).round() / 255.0)
            .collect();
        assert_eq!(back.pixel(1, 0), &expect[..]);
    }

    #[test]
    fn rejects_wrong_length() {
        assert!(Image::new(2, 2, 3, vec![0.0; 11]).is_err());
    }
}
