//! Linear-light RGB images (also used for square UV maps) and PNG I/O.

use std::path::Path;

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};

pub type Rgb = Vector3<f64>;

const GAMMA: f64 = 2.2;

/// Row-major RGB image with `f64` channels, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Rgb>,
}

/// Bilinear sample and its derivative with respect to the continuous
/// pixel coordinate, per channel.
pub struct BilinearSample {
    pub value: Rgb,
    pub d_dx: Rgb,
    pub d_dy: Rgb,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, Rgb::zeros())
    }

    pub fn filled(width: usize, height: usize, value: Rgb) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: Rgb) {
        let i = self.index(x, y);
        self.data[i] = value;
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Bilinear lookup at a continuous coordinate whose pixel centres sit at
    /// `i + 0.5`; clamps to the border.
    pub fn sample(&self, x: f64, y: f64) -> Rgb {
        self.sample_with_gradient(x, y).value
    }

    pub fn sample_with_gradient(&self, x: f64, y: f64) -> BilinearSample {
        let s = x - 0.5;
        let t = y - 0.5;
        let i0 = s.floor();
        let j0 = t.floor();
        let fs = s - i0;
        let ft = t - j0;
        let clamp_x = |i: f64| (i.max(0.0) as usize).min(self.width - 1);
        let clamp_y = |j: f64| (j.max(0.0) as usize).min(self.height - 1);
        let (xa, xb) = (clamp_x(i0), clamp_x(i0 + 1.0));
        let (ya, yb) = (clamp_y(j0), clamp_y(j0 + 1.0));
        let c00 = self.get(xa, ya);
        let c10 = self.get(xb, ya);
        let c01 = self.get(xa, yb);
        let c11 = self.get(xb, yb);
        let top = c00 * (1.0 - fs) + c10 * fs;
        let bottom = c01 * (1.0 - fs) + c11 * fs;
        BilinearSample {
            value: top * (1.0 - ft) + bottom * ft,
            d_dx: (c10 - c00) * (1.0 - ft) + (c11 - c01) * ft,
            d_dy: bottom - top,
        }
    }

    /// Bilinear footprint of a sample: the four texel indices and weights.
    pub fn bilinear_taps(&self, x: f64, y: f64) -> [(usize, f64); 4] {
        let s = x - 0.5;
        let t = y - 0.5;
        let i0 = s.floor();
        let j0 = t.floor();
        let fs = s - i0;
        let ft = t - j0;
        let clamp_x = |i: f64| (i.max(0.0) as usize).min(self.width - 1);
        let clamp_y = |j: f64| (j.max(0.0) as usize).min(self.height - 1);
        let (xa, xb) = (clamp_x(i0), clamp_x(i0 + 1.0));
        let (ya, yb) = (clamp_y(j0), clamp_y(j0 + 1.0));
        [
            (self.index(xa, ya), (1.0 - fs) * (1.0 - ft)),
            (self.index(xb, ya), fs * (1.0 - ft)),
            (self.index(xa, yb), (1.0 - fs) * ft),
            (self.index(xb, yb), fs * ft),
        ]
    }

    /// Rec. 601 luma.
    pub fn luma(&self) -> Vec<f64> {
        self.data.iter().map(luma).collect()
    }

    pub fn masked(&self, mask: &[bool]) -> Image {
        let data = self
            .data
            .iter()
            .zip(mask)
            .map(|(c, &m)| if m { *c } else { Rgb::zeros() })
            .collect();
        Image {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Triangle-filtered resample (area-like when shrinking).
    pub fn resized(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let buf = image::Rgb32FImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let c = self.get(x as usize, y as usize);
            image::Rgb([c.x as f32, c.y as f32, c.z as f32])
        });
        let out = image::imageops::resize(&buf, width as u32, height as u32, image::imageops::FilterType::Triangle);
        Image {
            width,
            height,
            data: out.pixels().map(|p| Rgb::new(p[0] as f64, p[1] as f64, p[2] as f64)).collect(),
        }
    }

    /// Loads an 8-bit PNG, decoding gamma 2.2 to linear light.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img
            .pixels()
            .map(|p| Rgb::new(decode_gamma(p[0]), decode_gamma(p[1]), decode_gamma(p[2])))
            .collect();
        Ok(Image {
            width: w as usize,
            height: h as usize,
            data,
        })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for (px, c) in out.pixels_mut().zip(&self.data) {
            *px = image::Rgb([encode_gamma(c.x), encode_gamma(c.y), encode_gamma(c.z)]);
        }
        out
    }

    /// Writes an 8-bit PNG with gamma 2.2 encoding.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[inline]
pub fn luma(c: &Rgb) -> f64 {
    0.299 * c.x + 0.587 * c.y + 0.114 * c.z
}

pub fn decode_gamma(v: u8) -> f64 {
    (v as f64 / 255.0).powf(GAMMA)
}

pub fn encode_gamma(v: f64) -> u8 {
    (v.clamp(0.0, 1.0).powf(1.0 / GAMMA) * 255.0).round() as u8
}

/// Writes a boolean mask as a black/white PNG.
pub fn save_mask_png(mask: &[bool], width: usize, height: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let img = image::GrayImage::from_fn(width as u32, height as u32, |x, y| {
        image::Luma([if mask[y as usize * width + x as usize] { 255 } else { 0 }])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Point in continuous pixel coordinates.
pub type Pixel = Vector2<f64>;
