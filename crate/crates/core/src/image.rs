//! Raster types and the binary formats they are stored in.
//!
//! Images are binary PGM (`P5`) or PPM (`P6`) with 8-bit samples. Depth maps
//! are raw little-endian f32 behind an 8-byte header (`u32` width, `u32`
//! height). Segmentation masks are PGM files whose samples are class codes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

/// 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::arg(format!("unsupported channel count {channels}")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::arg(format!(
                "pixel buffer has {} samples, expected {}x{}x{}",
                pixels.len(),
                width,
                height,
                channels
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn gray(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 1, pixels)
    }

    /// Copies the `size x size` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, rows: usize, cols: usize) -> Result<RawImage> {
        if row + rows > self.height || col + cols > self.width {
            return Err(Error::arg("crop window exceeds image bounds"));
        }
        let mut pixels = Vec::with_capacity(rows * cols * self.channels);
        for r in row..row + rows {
            let start = (r * self.width + col) * self.channels;
            pixels.extend_from_slice(&self.pixels[start..start + cols * self.channels]);
        }
        RawImage::new(cols, rows, self.channels, pixels)
    }

    /// Luma as f32 in `[0, 255]` (`0.299 R + 0.587 G + 0.114 B` for RGB).
    pub fn to_gray_f32(&self) -> GrayImage {
        let data = match self.channels {
            1 => self.pixels.iter().map(|&v| f32::from(v)).collect(),
            _ => self
                .pixels
                .chunks_exact(3)
                .map(|p| 0.299 * f32::from(p[0]) + 0.587 * f32::from(p[1]) + 0.114 * f32::from(p[2]))
                .collect(),
        };
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        decode_pnm(&bytes).map_err(|reason| Error::format(path, reason))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = Vec::with_capacity(self.pixels.len() + 32);
        write!(out, "{magic}\n{} {}\n255\n", self.width, self.height)?;
        out.extend_from_slice(&self.pixels);
        fs::write(path, out)?;
        Ok(())
    }
}

fn decode_pnm(bytes: &[u8]) -> std::result::Result<RawImage, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format!("unsupported magic `{other}` (expected P5 or P6)")),
    };
    let parse = |s: String| s.parse::<usize>().map_err(|e| format!("bad header field `{s}`: {e}"));
    let width = parse(token()?)?;
    let height = parse(token()?)?;
    let maxval = parse(token()?)?;
    if maxval != 255 {
        return Err(format!("only 8-bit samples are supported, maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let len = width * height * channels;
    if bytes.len() < start + len {
        return Err("truncated raster".into());
    }
    RawImage::new(width, height, channels, bytes[start..start + len].to_vec()).map_err(|e| e.to_string())
}

/// Single-channel f32 raster used for resampling and correlation.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::arg("gray raster size mismatch"));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn crop(&self, row: usize, col: usize, rows: usize, cols: usize) -> GrayImage {
        let mut data = Vec::with_capacity(rows * cols);
        for r in row..row + rows {
            let start = r * self.width + col;
            data.extend_from_slice(&self.data[start..start + cols]);
        }
        GrayImage {
            width: cols,
            height: rows,
            data,
        }
    }

    /// Rounds and clamps to an 8-bit gray image.
    pub fn to_raw(&self) -> RawImage {
        RawImage {
            width: self.width,
            height: self.height,
            channels: 1,
            pixels: self.data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect(),
        }
    }

    /// Area-averaging resample to `width x height`.
    ///
    /// Each output pixel is the coverage-weighted mean of the source pixels
    /// under its footprint, so integer-factor reductions are exact block means
    /// and enlargements replicate pixels with blended seams.
    pub fn resize_area(&self, width: usize, height: usize) -> GrayImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let cols = area_weights(self.width, width);
        let rows = area_weights(self.height, height);
        let mut tmp = vec![0.0f32; self.height * width];
        for r in 0..self.height {
            let src = &self.data[r * self.width..(r + 1) * self.width];
            let dst = &mut tmp[r * width..(r + 1) * width];
            for (d, taps) in dst.iter_mut().zip(&cols) {
                *d = taps.iter().map(|&(i, w)| src[i] * w).sum();
            }
        }
        let mut data = vec![0.0f32; width * height];
        for (r, taps) in rows.iter().enumerate() {
            let dst = &mut data[r * width..(r + 1) * width];
            for &(i, w) in taps {
                let src = &tmp[i * width..(i + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s * w;
                }
            }
        }
        GrayImage { width, height, data }
    }
}

/// Source taps `(index, weight)` for each of `dst` output samples covering
/// `src` input samples.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f32)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|i| {
                    let cover = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                    (cover > 1e-12).then(|| (i, (cover / scale) as f32))
                })
                .collect()
        })
        .collect()
}

/// Relative per-pixel depth aligned with a parent image.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::arg("depth map size mismatch"));
        }
        Ok(Self { width, height, values })
    }

    pub fn crop(&self, row: usize, col: usize, size: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(size * size);
        for r in row..row + size {
            let start = r * self.width + col;
            out.extend_from_slice(&self.values[start..start + size]);
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < 8 {
            return Err(Error::format(path, "missing depth header"));
        }
        let width = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() != width * height * 4 {
            return Err(Error::format(
                path,
                format!("expected {} depth samples, found {} bytes", width * height, body.len()),
            ));
        }
        let values = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Self { width, height, values })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(8 + self.values.len() * 4);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Per-pixel terrain codes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u8>,
}

impl SegMask {
    pub const SOIL: u8 = 0;
    pub const ROCK: u8 = 1;
    pub const UNKNOWN: u8 = 255;

    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::arg("mask size mismatch"));
        }
        Ok(Self { width, height, values })
    }

    pub fn crop(&self, row: usize, col: usize, rows: usize, cols: usize) -> SegMask {
        let mut values = Vec::with_capacity(rows * cols);
        for r in row..row + rows {
            let start = r * self.width + col;
            values.extend_from_slice(&self.values[start..start + cols]);
        }
        SegMask {
            width: cols,
            height: rows,
            values,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let img = RawImage::read(path)?;
        if img.channels != 1 {
            return Err(Error::format(path, "mask must be single-channel PGM"));
        }
        Ok(Self {
            width: img.width,
            height: img.height,
            values: img.pixels,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        RawImage::gray(self.width, self.height, self.values.clone())?.write(path)
    }
}
