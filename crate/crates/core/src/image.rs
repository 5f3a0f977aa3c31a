//! Image tensors and binary region masks.
//!
//! Pixels live in `[-1, 1]` everywhere inside the toolkit; conversion to
//! and from 8-bit happens only at I/O boundaries. Pairs are written as
//! PNG so the outside-mask equality invariant between a face image and
//! its masked counterpart survives a round trip bit-exactly.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Lower and upper bound of the canonical pixel range.
pub const PIXEL_MIN: f64 = -1.0;
pub const PIXEL_MAX: f64 = 1.0;

/// Color interpretation of the channel axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Colorspace {
    Rgb,
    Gray,
}

/// An H x W x C image with values in the canonical `[-1, 1]` range.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub pixels: Array3<f64>,
    pub colorspace: Colorspace,
}

impl ImageTensor {
    pub fn new(pixels: Array3<f64>, colorspace: Colorspace) -> Self {
        Self { pixels, colorspace }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        let colorspace = if channels == 1 {
            Colorspace::Gray
        } else {
            Colorspace::Rgb
        };
        Self::new(Array3::zeros((height, width, channels)), colorspace)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Self {
        let colorspace = if channels == 1 {
            Colorspace::Gray
        } else {
            Colorspace::Rgb
        };
        Self::new(
            Array3::from_shape_fn((height, width, channels), |(h, w, c)| f(h, w, c)),
            colorspace,
        )
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.pixels.shape();
        (s[0], s[1], s[2])
    }

    pub fn same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.shape()),
                got: format!("{:?}", other.shape()),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.pixels.iter().all(|v| v.is_finite())
    }

    pub fn in_range(&self) -> bool {
        self.pixels
            .iter()
            .all(|&v| (PIXEL_MIN..=PIXEL_MAX).contains(&v))
    }

    /// Bilinear sample at fractional pixel coordinates, clamped at borders.
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> f64 {
        let (h, w) = (self.height() as isize, self.width() as isize);
        let clamp = |v: isize, hi: isize| v.clamp(0, hi - 1) as usize;
        let x0 = x.floor() as isize;
        let y0 = y.floor() as isize;
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let p = |yy: isize, xx: isize| self.pixels[(clamp(yy, h), clamp(xx, w), c)];
        let top = p(y0, x0) * (1.0 - fx) + p(y0, x0 + 1) * fx;
        let bot = p(y0 + 1, x0) * (1.0 - fx) + p(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Bilinear resize to `out_h` x `out_w`.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> ImageTensor {
        if out_h == self.height() && out_w == self.width() {
            return self.clone();
        }
        let sy = self.height() as f64 / out_h as f64;
        let sx = self.width() as f64 / out_w as f64;
        ImageTensor::new(
            Array3::from_shape_fn((out_h, out_w, self.channels()), |(h, w, c)| {
                // Align pixel centers between the two grids.
                let y = (h as f64 + 0.5) * sy - 0.5;
                let x = (w as f64 + 0.5) * sx - 0.5;
                self.sample_bilinear(x, y, c)
            }),
            self.colorspace,
        )
    }

    /// Load an image file (PNG/JPEG) into the canonical range.
    pub fn load(path: &Path) -> Result<ImageTensor> {
        let img = image::open(path).map_err(|e| Error::ImageIo {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            u8_to_pixel(rgb.get_pixel(x as u32, y as u32).0[c])
        });
        Ok(ImageTensor::new(pixels, Colorspace::Rgb))
    }

    /// Save as PNG (lossless). Gray images are expanded to RGB.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w, c) = self.shape();
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = if c >= 3 {
                    [
                        pixel_to_u8(self.pixels[(y, x, 0)]),
                        pixel_to_u8(self.pixels[(y, x, 1)]),
                        pixel_to_u8(self.pixels[(y, x, 2)]),
                    ]
                } else {
                    let v = pixel_to_u8(self.pixels[(y, x, 0)]);
                    [v, v, v]
                };
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::ImageIo {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
    }
}

/// Map an 8-bit value into `[-1, 1]`.
pub fn u8_to_pixel(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Map a `[-1, 1]` value back to 8-bit. Inverse of [`u8_to_pixel`] for
/// every 8-bit input (rounding absorbs the division error).
pub fn pixel_to_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// An H x W binary map; `true` marks pixels that participate in a loss
/// or belong to a mask footprint.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    pub map: Array2<bool>,
}

impl RegionMask {
    pub fn new(map: Array2<bool>) -> Self {
        Self { map }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(Array2::from_elem((height, width), false))
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::new(Array2::from_elem((height, width), true))
    }

    /// Rectangle `[x0, x1) x [y0, y1)` clipped to the given bounds.
    pub fn rect(
        height: usize,
        width: usize,
        x0: isize,
        y0: isize,
        x1: isize,
        y1: isize,
    ) -> Self {
        let cx0 = x0.clamp(0, width as isize) as usize;
        let cx1 = x1.clamp(0, width as isize) as usize;
        let cy0 = y0.clamp(0, height as isize) as usize;
        let cy1 = y1.clamp(0, height as isize) as usize;
        let mut map = Array2::from_elem((height, width), false);
        for y in cy0..cy1 {
            for x in cx0..cx1 {
                map[(y, x)] = true;
            }
        }
        Self::new(map)
    }

    pub fn height(&self) -> usize {
        self.map.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.map.shape()[1]
    }

    pub fn count(&self) -> usize {
        self.map.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.map.iter().any(|&b| b)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        y < self.height() && x < self.width() && self.map[(y, x)]
    }

    pub fn matches_image(&self, img: &ImageTensor) -> Result<()> {
        if self.height() != img.height() || self.width() != img.width() {
            return Err(Error::ShapeMismatch {
                expected: format!("region {}x{}", img.height(), img.width()),
                got: format!("{}x{}", self.height(), self.width()),
            });
        }
        Ok(())
    }

    /// 0/1 weights broadcast over `channels`, for masking image tensors.
    pub fn to_weights(&self, channels: usize) -> Array3<f64> {
        Array3::from_shape_fn((self.height(), self.width(), channels), |(y, x, _)| {
            if self.map[(y, x)] {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Zero out pixels where the mask is set.
    pub fn zero_inside(&self, img: &ImageTensor) -> ImageTensor {
        let mut out = img.clone();
        for y in 0..self.height().min(img.height()) {
            for x in 0..self.width().min(img.width()) {
                if self.map[(y, x)] {
                    for c in 0..img.channels() {
                        out.pixels[(y, x, c)] = 0.0;
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u8_round_trip_is_exact() {
        for v in 0..=255u8 {
            assert_eq!(pixel_to_u8(u8_to_pixel(v)), v);
        }
    }

    #[test]
    fn resize_identity_is_exact() {
        let img = ImageTensor::from_fn(8, 8, 3, |h, w, c| {
            ((h * 31 + w * 7 + c) % 13) as f64 / 13.0 - 0.5
        });
        let same = img.resize_bilinear(8, 8);
        assert_eq!(img, same);
    }

    #[test]
    fn resize_reaches_requested_shape() {
        let img = ImageTensor::zeros(16, 16, 3);
        let down = img.resize_bilinear(7, 5);
        assert_eq!(down.shape(), (7, 5, 3));
    }

    #[test]
    fn rect_clips_to_bounds() {
        let r = RegionMask::rect(8, 8, -3, 5, 20, 20);
        assert_eq!(r.count(), 8 * 3);
        assert!(r.contains(0, 5));
        assert!(!r.contains(0, 4));
    }

    #[test]
    fn png_round_trip_preserves_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let img = ImageTensor::from_fn(6, 5, 3, |h, w, c| {
            u8_to_pixel(((h * 37 + w * 11 + c * 101) % 256) as u8)
        });
        img.save_png(&path).unwrap();
        let back = ImageTensor::load(&path).unwrap();
        assert_eq!(img, back);
    }
}
