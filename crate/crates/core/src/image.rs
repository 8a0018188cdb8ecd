//! Floating-point rasters with values in `[0, 1]` and their PNG/PPM codecs.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interleaved raster, row-major, `channels` values per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height}x{channels} raster",
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

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = (y * self.width + x) * self.channels + c;
        self.data[i] = v;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Per-pixel channel-mean absolute difference against `other`.
    pub fn abs_diff_map(&self, other: &Image) -> Result<Vec<f64>> {
        self.check_same_shape(other)?;
        let c = self.channels;
        Ok(self
            .data
            .chunks_exact(c)
            .zip(other.data.chunks_exact(c))
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() / c as f64)
            .collect())
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height || self.channels != other.channels {
            return Err(Error::Shape(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )));
        }
        Ok(())
    }

    /// Replicates a single-channel image into three channels; other images are cloned.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let mut out = Image::new(self.width, self.height, 3);
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            let g = px[0];
            out.data[i * 3..i * 3 + 3].copy_from_slice(&[g, g, g]);
        }
        out
    }

    /// Sub-window with top-left `(x0, y0)` that may extend past the raster;
    /// out-of-bounds pixels take `fill`.
    pub fn window(&self, x0: i64, y0: i64, w: usize, h: usize, fill: f64) -> Image {
        let mut out = Image::filled(w, h, self.channels, fill);
        for oy in 0..h {
            let sy = y0 + oy as i64;
            if sy < 0 || sy >= self.height as i64 {
                continue;
            }
            for ox in 0..w {
                let sx = x0 + ox as i64;
                if sx < 0 || sx >= self.width as i64 {
                    continue;
                }
                let src = (sy as usize * self.width + sx as usize) * self.channels;
                let dst = (oy * w + ox) * self.channels;
                out.data[dst..dst + self.channels].copy_from_slice(&self.data[src..src + self.channels]);
            }
        }
        out
    }

    /// Bilinear resampling with pixel-centre alignment. Constant images stay
    /// exactly constant and same-size resampling is the identity.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<Image> {
        if self.is_empty() || width == 0 || height == 0 {
            return Err(Error::Shape("cannot resize an empty raster".into()));
        }
        let c = self.channels;
        let xs = sample_axis(self.width, width);
        let ys = sample_axis(self.height, height);
        let mut out = Image::new(width, height, c);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let dst = (oy * width + ox) * c;
                for ch in 0..c {
                    let a = self.get(x0, y0, ch);
                    let b = self.get(x1, y0, ch);
                    let p = self.get(x0, y1, ch);
                    let q = self.get(x1, y1, ch);
                    let top = a + fx * (b - a);
                    let bottom = p + fx * (q - p);
                    out.data[dst + ch] = (top + fy * (bottom - top)).clamp(0.0, 1.0);
                }
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Image> {
        let dynamic = image::open(path).map_err(|e| Error::Item {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(Self::from_dynamic(&dynamic))
    }

    pub fn from_dynamic(dynamic: &DynamicImage) -> Image {
        let has_color = dynamic.color().has_color();
        if has_color {
            let rgb = dynamic.to_rgb8();
            let data = rgb.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
            Image::from_vec(rgb.width() as usize, rgb.height() as usize, 3, data).expect("rgb8 buffer has 3 channels")
        } else {
            let gray = dynamic.to_luma8();
            let data = gray.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
            Image::from_vec(gray.width() as usize, gray.height() as usize, 1, data).expect("luma8 buffer has 1 channel")
        }
    }

    /// 8-bit quantized copy (gray for one channel, RGB for three).
    pub fn to_dynamic(&self) -> Result<DynamicImage> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => Ok(DynamicImage::ImageLuma8(
                GrayImage::from_raw(w, h, bytes).expect("buffer length matches"),
            )),
            3 => Ok(DynamicImage::ImageRgb8(
                RgbImage::from_raw(w, h, bytes).expect("buffer length matches"),
            )),
            n => Err(Error::Shape(format!("cannot encode {n}-channel raster"))),
        }
    }

    /// Writes PNG, or binary PPM when the extension is `.ppm`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dynamic = self.to_dynamic()?;
        let is_ppm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
        let result = if is_ppm {
            dynamic.to_rgb8().save_with_format(path, image::ImageFormat::Pnm)
        } else {
            dynamic.save_with_format(path, image::ImageFormat::Png)
        };
        result.map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Item {
                path: path.to_path_buf(),
                reason: other.to_string(),
            },
        })
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// For every output coordinate: the two neighbouring source indices and the
/// interpolation weight of the second.
fn sample_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Provenance attached to frames taken from a stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub camera: u32,
    pub index: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: Image,
    pub meta: FrameMeta,
}

impl Frame {
    pub fn new(image: Image, camera: u32, index: u64) -> Self {
        Self {
            image,
            meta: FrameMeta { camera, index },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_pads_outside() {
        let img = Image::filled(4, 4, 1, 1.0);
        let w = img.window(-1, -1, 3, 3, 0.0);
        assert_eq!(w.get(0, 0, 0), 0.0);
        assert_eq!(w.get(1, 0, 0), 0.0);
        assert_eq!(w.get(1, 1, 0), 1.0);
        assert_eq!(w.get(2, 2, 0), 1.0);
    }

    #[test]
    fn same_size_resize_is_identity() {
        let data: Vec<f64> = (0..35).map(|i| (i as f64 * 0.37).fract()).collect();
        let img = Image::from_vec(7, 5, 1, data).unwrap();
        assert_eq!(img.resize_bilinear(7, 5).unwrap(), img);
    }

    #[test]
    fn png_roundtrip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = Image::from_vec(2, 1, 1, vec![0.0, 1.0]).unwrap();
        img.save(&path).unwrap();
        assert_eq!(Image::load(&path).unwrap(), img);

        let ppm = dir.path().join("a.ppm");
        img.save(&ppm).unwrap();
        let back = Image::load(&ppm).unwrap();
        assert_eq!(back.channels(), 3);
        assert_eq!(back.get(1, 0, 2), 1.0);
    }
}
