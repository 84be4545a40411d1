//! Planar RGB images with values in `[0, 1]`, plus PNG/PPM decode and encode.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, ImageReader, Limits, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Largest accepted width or height when decoding.
pub const MAX_DIM: u32 = 8192;

/// Three-channel image stored channel-major (`[3, height, width]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "image {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, plane));
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[c * self.plane() + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let p = self.plane();
        self.data[c * p + y * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn clamp(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn mean_rgb(&self) -> [f32; 3] {
        let n = self.plane() as f64;
        let m = |c| (self.channel(c).iter().map(|&v| v as f64).sum::<f64>() / n) as f32;
        [m(0), m(1), m(2)]
    }

    /// Bilinear sample at continuous pixel coordinates, returning `None` outside the image.
    #[inline]
    pub fn sample(&self, c: usize, y: f32, x: f32) -> Option<f32> {
        let (h, w) = (self.height as f32, self.width as f32);
        if !(y > -1.0 && y < h && x > -1.0 && x < w) {
            return None;
        }
        let y = y.clamp(0.0, h - 1.0);
        let x = x.clamp(0.0, w - 1.0);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (fy, fx) = (y - y0 as f32, x - x0 as f32);
        let top = self.at(c, y0, x0) * (1.0 - fx) + self.at(c, y0, x1) * fx;
        let bot = self.at(c, y1, x0) * (1.0 - fx) + self.at(c, y1, x1) * fx;
        Some(top * (1.0 - fy) + bot * fy)
    }

    /// Bilinear resize with half-pixel centres.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        let mut out = Image::filled(height, width, [0.0; 3]);
        for c in 0..3 {
            for y in 0..height {
                let src_y = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
                for x in 0..width {
                    let src_x = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                    let v = self.sample(c, src_y, src_x).expect("clamped inside");
                    out.set(c, y, x, v);
                }
            }
        }
        out
    }

    /// Copy of the window starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Image::filled(height, width, [0.0; 3]);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    out.set(c, y, x, self.at(c, top + y, left + x));
                }
            }
        }
        Ok(out)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.at(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    /// Normalized `[3, H, W]` tensor: `(x - mean) / std` per channel.
    pub fn to_tensor<T: Real>(&self, stats: &NormStats) -> Tensor<T> {
        let p = self.plane();
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let c = i / p;
            T::from_f64(((self.data[i] - stats.mean[c]) / stats.std[c]) as f64)
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::filled(h, w, [0.0; 3]);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px[c] as f32 / 255.0);
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let q = |c| (self.at(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([q(0), q(1), q(2)])
        })
    }

    /// Decode PNG or PPM bytes. `path` is only used for error messages.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |reason: String| Error::Decode {
            path: path.to_path_buf(),
            reason,
        };
        let format = image::guess_format(bytes).map_err(|e| err(e.to_string()))?;
        if !matches!(format, ImageFormat::Png | ImageFormat::Pnm) {
            return Err(err(format!("unsupported format {format:?}")));
        }
        let mut reader = ImageReader::with_format(Cursor::new(bytes), format);
        let mut limits = Limits::default();
        limits.max_image_width = Some(MAX_DIM);
        limits.max_image_height = Some(MAX_DIM);
        limits.max_alloc = Some(512 * 1024 * 1024);
        reader.limits(limits);
        let decoded = reader.decode().map_err(|e| err(e.to_string()))?;
        Ok(Self::from_rgb8(&decoded.to_rgb8()))
    }

    pub fn open(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, ImageFormat::Png)
            .map_err(|e| Error::Decode {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
    }
}

/// Per-channel normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for NormStats {
    fn default() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl NormStats {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().all(|&s| s > 0.0 && s.is_finite()) && self.mean.iter().all(|m| m.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid normalization stats {self:?}")))
        }
    }

    /// One-pass per-channel mean and population standard deviation.
    pub fn compute<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Self> {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0f64;
        for img in images {
            for (c, (s, q)) in sum.iter_mut().zip(sq.iter_mut()).enumerate() {
                for &v in img.channel(c) {
                    *s += v as f64;
                    *q += (v as f64) * (v as f64);
                }
            }
            n += img.plane() as f64;
        }
        if n == 0.0 {
            return Err(Error::Validation("no pixels to compute statistics".into()));
        }
        let mut stats = NormStats::default();
        for c in 0..3 {
            let mean = sum[c] / n;
            let var = (sq[c] / n - mean * mean).max(0.0);
            stats.mean[c] = mean as f32;
            // A flat channel keeps unit scale instead of dividing by zero.
            stats.std[c] = if var > 1e-12 { var.sqrt() as f32 } else { 1.0 };
        }
        Ok(stats)
    }

    pub fn denormalize<T: Real>(&self, t: &Tensor<T>) -> Result<Image> {
        let (h, w) = match t.dims() {
            &[3, h, w] => (h, w),
            d => return Err(Error::Dimension(format!("expected [3,H,W], got {d:?}"))),
        };
        let p = h * w;
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v.as_f64() as f32 * self.std[i / p] + self.mean[i / p])
            .collect();
        Image::new(h, w, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_constant_stays_constant() {
        let img = Image::filled(7, 5, [0.2, 0.4, 0.6]);
        let r = img.resize(3, 11);
        for c in 0..3 {
            assert!(r.channel(c).iter().all(|&v| (v - img.at(c, 0, 0)).abs() < 1e-6));
        }
    }

    #[test]
    fn downsample_by_two_averages_pairs() {
        // Horizontal ramp 0, 1, 2, 3 (scaled): half-pixel centres land between pixel pairs.
        let mut img = Image::filled(4, 4, [0.0; 3]);
        for y in 0..4 {
            for x in 0..4 {
                img.set(0, y, x, (x + 4 * y) as f32 / 15.0);
            }
        }
        let r = img.resize(2, 2);
        let expect = [[2.5, 4.5], [10.5, 12.5]];
        for y in 0..2 {
            for x in 0..2 {
                assert!((r.at(0, y, x) - expect[y][x] / 15.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn png_round_trip() {
        let mut img = Image::filled(3, 2, [0.0, 0.5, 1.0]);
        img.set(0, 1, 1, 0.2);
        let mut bytes = Vec::new();
        img.to_rgb8()
            .write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
            .unwrap();
        let back = Image::decode(&bytes, Path::new("mem.png")).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            Image::decode(b"not an image", Path::new("x")),
            Err(Error::Decode { .. })
        ));
    }
}
