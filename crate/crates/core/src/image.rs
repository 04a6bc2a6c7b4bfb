//! Grayscale raster type, decoding, and integral images.

use std::path::Path;

use image::{DynamicImage, ImageReader};

use crate::error::{Error, Result};

/// ITU-R BT.601 luma weights.
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

/// Row-major intensity raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                found: pixels.len(),
            });
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("intensity {bad} outside [0, 1]")));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel; results are clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        GrayImage {
            width,
            height,
            pixels,
        }
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        Self::from_fn(width, height, |_, _| value)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Applies `f` to every intensity, clamping the result to `[0, 1]`.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
        }
    }

    /// Rotates the raster by 90 degrees so that pixel `(x, y)` moves to `(h - 1 - y, x)`.
    ///
    /// In image coordinates (y pointing down) this is a clockwise quarter turn; a direction
    /// at angle `θ` becomes `θ + π/2`.
    pub fn rotate90(&self) -> Self {
        let (w, h) = (self.width, self.height);
        let mut pixels = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (nx, ny) = (h - 1 - y, x);
                pixels[ny * h + nx] = self.get(x, y);
            }
        }
        GrayImage {
            width: h,
            height: w,
            pixels,
        }
    }

    /// Maps a point of this image into the frame produced by [`GrayImage::rotate90`].
    pub fn rotate90_point(&self, x: f32, y: f32) -> (f32, f32) {
        (self.height as f32 - 1.0 - y, x)
    }
}

/// Decodes a raster file into a grayscale image.
///
/// Gray inputs map identically (`v / max`); color inputs use the BT.601 luma weights.
pub fn load_image(path: &Path) -> Result<GrayImage> {
    let decode_err = |message: String| Error::Decode {
        path: path.to_path_buf(),
        message,
    };
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| decode_err(e.to_string()))?;
    Ok(from_dynamic(&decoded))
}

/// Converts an already decoded image.
pub fn from_dynamic(decoded: &DynamicImage) -> GrayImage {
    let (width, height) = (decoded.width() as usize, decoded.height() as usize);
    let pixels = if decoded.color().has_color() {
        decoded
            .to_rgb32f()
            .pixels()
            .map(|p| {
                let [r, g, b] = p.0;
                LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b
            })
            .map(|v| v.clamp(0.0, 1.0))
            .collect()
    } else {
        decoded
            .to_luma32f()
            .pixels()
            .map(|p| p.0[0].clamp(0.0, 1.0))
            .collect()
    };
    GrayImage {
        width,
        height,
        pixels,
    }
}

/// Summed-area table with a zero guard row and column, accumulated in `f64`.
#[derive(Debug, Clone)]
pub struct IntegralImage {
    width: usize,
    height: usize,
    sums: Vec<f64>,
}

impl IntegralImage {
    pub fn new(img: &GrayImage) -> Self {
        let (w, h) = (img.width(), img.height());
        let stride = w + 1;
        let mut sums = vec![0.0f64; stride * (h + 1)];
        for y in 0..h {
            let mut row = 0.0f64;
            for x in 0..w {
                row += img.get(x, y) as f64;
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        IntegralImage {
            width: w,
            height: h,
            sums,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Sum over the inclusive pixel box `[x0, x1] × [y0, y1]`.
    pub fn box_sum(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let s = self.width + 1;
        let (xa, ya, xb, yb) = (x0, y0, x1 + 1, y1 + 1);
        self.sums[yb * s + xb] - self.sums[ya * s + xb] - self.sums[yb * s + xa]
            + self.sums[ya * s + xa]
    }
}
