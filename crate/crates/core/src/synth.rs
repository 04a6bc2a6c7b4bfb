//! Deterministic synthetic textures: the bundled three-class desk-scale dataset and helpers
//! for geometric robustness checks.

use std::f32::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::GrayImage;

pub const CLASS_NAMES: [&str; 3] = ["blocks", "spots", "stripes"];

/// Rounds every intensity to a multiple of 1/256.
///
/// Dyadic intensities stay exact under shifts by multiples of 1/256 and scaling by powers of
/// two, which makes bit-level invariance checks meaningful in `f32`.
pub fn quantize_dyadic(img: &GrayImage) -> GrayImage {
    img.map(|v| (v * 256.0).round().min(255.0) / 256.0)
}

fn add_spot(buf: &mut [f32], w: usize, h: usize, cx: f32, cy: f32, sigma: f32, amp: f32) {
    let r = (3.0 * sigma).ceil() as isize;
    let (x0, x1) = ((cx as isize - r).max(0), (cx as isize + r).min(w as isize - 1));
    let (y0, y1) = ((cy as isize - r).max(0), (cy as isize + r).min(h as isize - 1));
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
            buf[y as usize * w + x as usize] += amp * (-d2 * inv).exp();
        }
    }
}

fn finish(buf: Vec<f32>, w: usize, h: usize) -> GrayImage {
    quantize_dyadic(&GrayImage::from_fn(w, h, |x, y| buf[y * w + x]))
}

/// Generic blob texture with rich scale-space structure.
pub fn textured(width: usize, height: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = vec![0.5f32; width * height];
    let count = width * height / 160;
    for _ in 0..count {
        let cx = rng.random_range(0.0..width as f32);
        let cy = rng.random_range(0.0..height as f32);
        let sigma = rng.random_range(1.5f32..7.0);
        let amp = rng.random_range(0.3f32..0.6) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        add_spot(&mut buf, width, height, cx, cy, sigma, amp);
    }
    finish(buf, width, height)
}

fn background(rng: &mut ChaCha8Rng, buf: &mut [f32], w: usize, h: usize) {
    let gx = rng.random_range(-0.15f32..0.15);
    let gy = rng.random_range(-0.15f32..0.15);
    for y in 0..h {
        for x in 0..w {
            buf[y * w + x] += gx * (x as f32 / w as f32 - 0.5) + gy * (y as f32 / h as f32 - 0.5);
        }
    }
    // faint clutter shared by every class
    for _ in 0..(w * h / 600) {
        let cx = rng.random_range(0.0..w as f32);
        let cy = rng.random_range(0.0..h as f32);
        let sigma = rng.random_range(2.0f32..5.0);
        let amp = rng.random_range(-0.3f32..0.3);
        add_spot(buf, w, h, cx, cy, sigma, amp);
    }
}

fn draw_blocks(rng: &mut ChaCha8Rng, buf: &mut [f32], w: usize, h: usize, n: usize) {
    // overlapping rectangles sharing one rotation
    let angle = rng.random_range(0.0..TAU);
    let (c, s) = (angle.cos(), angle.sin());
    for _ in 0..n {
        let cx = rng.random_range(0.0..w as f32);
        let cy = rng.random_range(0.0..h as f32);
        let hw = rng.random_range(5.0f32..18.0);
        let hh = rng.random_range(5.0f32..18.0);
        let amp = rng.random_range(0.2f32..0.45) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let r = hw.hypot(hh).ceil() as isize;
        let (x0, x1) = ((cx as isize - r).max(0), (cx as isize + r).min(w as isize - 1));
        let (y0, y1) = ((cy as isize - r).max(0), (cy as isize + r).min(h as isize - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f32 - cx, y as f32 - cy);
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                if u.abs() <= hw && v.abs() <= hh {
                    buf[y as usize * w + x as usize] += amp;
                }
            }
        }
    }
}

fn draw_spots(rng: &mut ChaCha8Rng, buf: &mut [f32], w: usize, h: usize, n: usize) {
    for _ in 0..n {
        let cx = rng.random_range(0.0..w as f32);
        let cy = rng.random_range(0.0..h as f32);
        let sigma = rng.random_range(1.8f32..5.0);
        let amp = rng.random_range(0.4f32..0.7) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        add_spot(buf, w, h, cx, cy, sigma, amp);
    }
}

fn draw_grating(rng: &mut ChaCha8Rng, buf: &mut [f32], w: usize, h: usize, strength: f32) {
    let angle = rng.random_range(0.0..TAU);
    let period = rng.random_range(9.0f32..16.0);
    let amp = rng.random_range(0.3f32..0.45) * strength;
    let (c, s) = (angle.cos(), angle.sin());
    let (mx, my) = (rng.random_range(0.0..w as f32), rng.random_range(0.0..h as f32));
    let spread = rng.random_range(25.0f32..45.0);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f32, y as f32);
            let phase = (c * xf + s * yf) * TAU / period;
            let env = (-((xf - mx).powi(2) + (yf - my).powi(2)) / (2.0 * spread * spread)).exp();
            buf[y * w + x] += amp * (0.4 + 0.6 * env) * phase.sin();
        }
    }
}

/// Draws the pattern of class `class`; `strength` in `(0, 1]` scales its density.
fn draw_class(rng: &mut ChaCha8Rng, buf: &mut [f32], w: usize, h: usize, class: usize, strength: f32) {
    let scaled = |lo: usize, hi: usize, rng: &mut ChaCha8Rng| {
        ((rng.random_range(lo..hi) as f32 * strength).round() as usize).max(1)
    };
    match class % 3 {
        0 => {
            let n = scaled(28, 40, rng);
            draw_blocks(rng, buf, w, h, n);
        }
        1 => {
            let n = scaled(70, 100, rng);
            draw_spots(rng, buf, w, h, n);
        }
        _ => draw_grating(rng, buf, w, h, strength),
    }
}

/// Strength of the distractor pattern borrowed from another class.
pub const DISTRACTOR_STRENGTH: f32 = 0.6;

/// One image of class `class` (index into [`CLASS_NAMES`]).
///
/// Besides its own pattern every image carries a weaker pattern of a random other class, so
/// classes overlap in content.
pub fn class_image(class: usize, width: usize, height: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let (w, h) = (width, height);
    let mut buf = vec![0.5f32; w * h];
    background(&mut rng, &mut buf, w, h);
    let distractor = (class + rng.random_range(1..3)) % 3;
    draw_class(&mut rng, &mut buf, w, h, distractor, DISTRACTOR_STRENGTH);
    draw_class(&mut rng, &mut buf, w, h, class, 1.0);
    finish(buf, w, h)
}

/// Writes `per_class` PNG images for each of the three classes under `root/<class>/`.
pub fn write_dataset(root: &Path, per_class: usize, size: usize, seed: u64) -> Result<()> {
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..per_class {
            let img = class_image(c, size, size, seed.wrapping_mul(1_000_003).wrapping_add((c * 10_000 + i) as u64));
            let path = dir.join(format!("{name}_{i:03}.png"));
            to_luma8(&img)
                .save(&path)
                .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))?;
        }
    }
    Ok(())
}

pub fn to_luma8(img: &GrayImage) -> image::GrayImage {
    image::GrayImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        image::Luma([(img.get(x as usize, y as usize) * 255.0).round() as u8])
    })
}

/// Bilinear rotation by `angle` radians about the image center (same canvas, border replicated).
///
/// A source point `p` lands on `center + R(angle) (p − center)`.
pub fn rotate_about_center(img: &GrayImage, angle: f32) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0);
    let (c, s) = (angle.cos(), angle.sin());
    GrayImage::from_fn(w, h, |x, y| {
        let (dx, dy) = (x as f32 - cx, y as f32 - cy);
        // inverse rotation back into the source
        let sx = (c * dx + s * dy + cx).clamp(0.0, w as f32 - 1.0);
        let sy = (-s * dx + c * dy + cy).clamp(0.0, h as f32 - 1.0);
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
        let top = img.get(x0, y0) * (1.0 - fx) + img.get(x1, y0) * fx;
        let bottom = img.get(x0, y1) * (1.0 - fx) + img.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Forward map of [`rotate_about_center`] for a point.
pub fn rotate_point_about_center(width: usize, height: usize, x: f32, y: f32, angle: f32) -> (f32, f32) {
    let (cx, cy) = ((width as f32 - 1.0) / 2.0, (height as f32 - 1.0) / 2.0);
    let (c, s) = (angle.cos(), angle.sin());
    let (dx, dy) = (x - cx, y - cy);
    (cx + c * dx - s * dy, cy + s * dx + c * dy)
}
