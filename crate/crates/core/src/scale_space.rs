//! Difference-of-Gaussians scale space: pyramid construction, extremum detection with
//! quadratic refinement, and dominant-orientation assignment.

use std::collections::HashSet;
use std::f32::consts::{PI, TAU};
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{self, KEYPOINTS_MAGIC};
use crate::image::GrayImage;

/// Blur already present in the input image.
pub const ASSUMED_INPUT_BLUR: f32 = 0.5;
/// Candidates closer than this to an octave border are discarded.
pub const BORDER: usize = 8;
pub const MAX_REFINE_ITERS: usize = 5;
pub const ORIENTATION_BINS: usize = 36;
pub const ORIENTATION_PEAK_RATIO: f32 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorParams {
    pub octaves: usize,
    pub scales_per_octave: usize,
    pub base_sigma: f32,
    /// In DoG units for intensities scaled to `[0, 1]`.
    pub contrast_threshold: f32,
    pub edge_ratio: f32,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            octaves: 4,
            scales_per_octave: 3,
            base_sigma: 1.6,
            contrast_threshold: 0.03,
            edge_ratio: 10.0,
        }
    }
}

/// A single-channel float raster that may hold negative values.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Plane {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    fn from_image(img: &GrayImage) -> Self {
        Plane {
            width: img.width(),
            height: img.height(),
            data: img.pixels().to_vec(),
        }
    }

    fn downsample(&self) -> Self {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push(self.get(2 * x, 2 * y));
            }
        }
        Plane {
            width: w,
            height: h,
            data,
        }
    }

    fn difference(&self, lower: &Plane) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&lower.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(4σ)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = ((4.0 * sigma).ceil() as usize).max(1);
    let s2 = 2.0 * (sigma as f64) * (sigma as f64);
    let taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / s2).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter().map(|t| (t / total) as f32).collect()
}

/// Separable Gaussian blur with replicated borders.
///
/// Each output is written as `center + Σ wᵢ (xᵢ − center)`, which leaves constant regions
/// bit-exactly unchanged.
pub fn gaussian_blur(src: &Plane, sigma: f32) -> Plane {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (src.width as isize, src.height as isize);
    let mut tmp = vec![0f32; src.data.len()];
    for y in 0..h {
        let row = &src.data[(y * w) as usize..((y + 1) * w) as usize];
        for x in 0..w {
            let c = row[x as usize];
            let mut acc = 0f32;
            for (k, wt) in kernel.iter().enumerate() {
                let xx = (x + k as isize - r).clamp(0, w - 1) as usize;
                acc += wt * (row[xx] - c);
            }
            tmp[(y * w + x) as usize] = c + acc;
        }
    }
    let mut out = vec![0f32; src.data.len()];
    for y in 0..h {
        for x in 0..w {
            let c = tmp[(y * w + x) as usize];
            let mut acc = 0f32;
            for (k, wt) in kernel.iter().enumerate() {
                let yy = (y + k as isize - r).clamp(0, h - 1);
                acc += wt * (tmp[(yy * w + x) as usize] - c);
            }
            out[(y * w + x) as usize] = c + acc;
        }
    }
    Plane {
        width: src.width,
        height: src.height,
        data: out,
    }
}

#[derive(Debug, Clone)]
pub struct Octave {
    pub width: usize,
    pub height: usize,
    /// `scales_per_octave + 3` blurred images.
    pub levels: Vec<Plane>,
    /// `levels[i + 1] − levels[i]`.
    pub dog: Vec<Plane>,
}

#[derive(Debug, Clone)]
pub struct GaussianPyramid {
    pub scales_per_octave: usize,
    pub base_sigma: f32,
    pub octaves: Vec<Octave>,
}

impl GaussianPyramid {
    /// Blur of level `level` relative to its own octave's sampling grid.
    pub fn level_sigma(&self, level: f32) -> f32 {
        self.base_sigma * 2f32.powf(level / self.scales_per_octave as f32)
    }
}

/// Largest octave count whose smallest level still has `8 << octaves` pixels per side.
pub fn max_octaves(width: usize, height: usize) -> usize {
    let m = width.min(height) / 8;
    if m == 0 {
        0
    } else {
        m.ilog2() as usize
    }
}

pub fn build_pyramid(
    img: &GrayImage,
    octaves: usize,
    scales_per_octave: usize,
    base_sigma: f32,
) -> Result<GaussianPyramid> {
    if scales_per_octave == 0 || octaves == 0 {
        return Err(Error::Parameter(
            "octaves and scales_per_octave must be at least 1".into(),
        ));
    }
    if !(base_sigma > ASSUMED_INPUT_BLUR) {
        return Err(Error::Parameter(format!(
            "base_sigma must exceed the assumed input blur {ASSUMED_INPUT_BLUR}"
        )));
    }
    let (w, h) = (img.width(), img.height());
    if w.min(h) < (8usize << octaves) {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            max_octaves: max_octaves(w, h),
        });
    }
    let s = scales_per_octave;
    let k = 2f32.powf(1.0 / s as f32);
    let increments: Vec<f32> = (1..s + 3)
        .map(|i| {
            let prev = base_sigma * k.powi(i as i32 - 1);
            let total = prev * k;
            (total * total - prev * prev).sqrt()
        })
        .collect();

    let first = (base_sigma * base_sigma - ASSUMED_INPUT_BLUR * ASSUMED_INPUT_BLUR).sqrt();
    let mut base = gaussian_blur(&Plane::from_image(img), first);
    let mut out = Vec::with_capacity(octaves);
    for o in 0..octaves {
        if o > 0 {
            let prev: &Octave = &out[o - 1];
            base = prev.levels[s].downsample();
        }
        let mut levels = Vec::with_capacity(s + 3);
        levels.push(base.clone());
        for inc in &increments {
            let next = gaussian_blur(levels.last().unwrap(), *inc);
            levels.push(next);
        }
        let dog = levels.windows(2).map(|p| p[1].difference(&p[0])).collect();
        out.push(Octave {
            width: base.width,
            height: base.height,
            levels,
            dog,
        });
    }
    Ok(GaussianPyramid {
        scales_per_octave: s,
        base_sigma,
        octaves: out,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    /// Base-image coordinates.
    pub x: f32,
    pub y: f32,
    /// Absolute blur (sigma) in base-image pixels.
    pub scale: f32,
    /// Radians in `[0, 2π)`.
    pub orientation: f32,
    pub response: f32,
    pub octave: u8,
    pub level: u8,
}

impl Keypoint {
    /// Scale relative to the keypoint's own octave.
    pub fn octave_scale(&self) -> f32 {
        self.scale / (1u32 << self.octave) as f32
    }

    /// Position in the keypoint's own octave.
    pub fn octave_xy(&self) -> (f32, f32) {
        let f = (1u32 << self.octave) as f32;
        (self.x / f, self.y / f)
    }
}

fn is_strict_extremum(dog: &[Plane], i: usize, x: usize, y: usize) -> bool {
    let v = dog[i].get(x, y);
    let mut is_max = true;
    let mut is_min = true;
    for plane in &dog[i - 1..=i + 1] {
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                if std::ptr::eq(plane, &dog[i]) && xx == x && yy == y {
                    continue;
                }
                let n = plane.get(xx, yy);
                is_max &= v > n;
                is_min &= v < n;
                if !is_max && !is_min {
                    return false;
                }
            }
        }
    }
    is_max || is_min
}

/// Finite-difference gradient and Hessian of the DoG volume, order `(x, y, s)`.
fn derivatives(dog: &[Plane], i: usize, x: usize, y: usize) -> ([f32; 3], [[f32; 3]; 3]) {
    let d = |di: isize, dx: isize, dy: isize| {
        dog[(i as isize + di) as usize].get((x as isize + dx) as usize, (y as isize + dy) as usize)
    };
    let v = d(0, 0, 0);
    let g = [
        0.5 * (d(0, 1, 0) - d(0, -1, 0)),
        0.5 * (d(0, 0, 1) - d(0, 0, -1)),
        0.5 * (d(1, 0, 0) - d(-1, 0, 0)),
    ];
    let dxx = d(0, 1, 0) + d(0, -1, 0) - 2.0 * v;
    let dyy = d(0, 0, 1) + d(0, 0, -1) - 2.0 * v;
    let dss = d(1, 0, 0) + d(-1, 0, 0) - 2.0 * v;
    let dxy = 0.25 * (d(0, 1, 1) - d(0, -1, 1) - d(0, 1, -1) + d(0, -1, -1));
    let dxs = 0.25 * (d(1, 1, 0) - d(1, -1, 0) - d(-1, 1, 0) + d(-1, -1, 0));
    let dys = 0.25 * (d(1, 0, 1) - d(1, 0, -1) - d(-1, 0, 1) + d(-1, 0, -1));
    (g, [[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
}

/// Solves `H x = b` by Cramer's rule; `None` when `H` is (numerically) singular.
fn solve3(h: &[[f32; 3]; 3], b: [f32; 3]) -> Option<[f32; 3]> {
    let m: [[f64; 3]; 3] = h.map(|r| r.map(f64::from));
    let det3 = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let det = det3(&m);
    if det.abs() < 1e-18 {
        return None;
    }
    let mut out = [0f32; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let mut mc = m;
        for r in 0..3 {
            mc[r][c] = b[r] as f64;
        }
        *o = (det3(&mc) / det) as f32;
    }
    Some(out)
}

/// Principal-curvature test on the spatial 2×2 Hessian: `tr² / det < (r + 1)² / r`.
pub fn passes_edge_test(dxx: f32, dyy: f32, dxy: f32, edge_ratio: f32) -> bool {
    let tr = dxx + dyy;
    let det = dxx * dyy - dxy * dxy;
    det > 0.0 && tr * tr * edge_ratio < (edge_ratio + 1.0) * (edge_ratio + 1.0) * det
}

/// Scale-space extrema that survive refinement, the contrast test and the edge test.
///
/// Output order is octave, level, row, column of the originating sample.
pub fn detect_extrema(
    pyr: &GaussianPyramid,
    contrast_threshold: f32,
    edge_ratio_threshold: f32,
) -> Vec<Keypoint> {
    let s = pyr.scales_per_octave;
    let prefilter = 0.5 * contrast_threshold;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (o, oct) in pyr.octaves.iter().enumerate() {
        let (w, h) = (oct.width, oct.height);
        if w <= 2 * BORDER || h <= 2 * BORDER || oct.dog.len() < 3 {
            continue;
        }
        for i in 1..=s {
            for y in BORDER..h - BORDER {
                for x in BORDER..w - BORDER {
                    if oct.dog[i].get(x, y).abs() <= prefilter
                        || !is_strict_extremum(&oct.dog, i, x, y)
                    {
                        continue;
                    }
                    let Some(kp) =
                        refine(pyr, o, i, x, y, contrast_threshold, edge_ratio_threshold)
                    else {
                        continue;
                    };
                    if seen.insert((o, kp.1, kp.2, kp.3)) {
                        out.push(kp.0);
                    }
                }
            }
        }
    }
    out
}

fn refine(
    pyr: &GaussianPyramid,
    o: usize,
    mut i: usize,
    mut x: usize,
    mut y: usize,
    contrast_threshold: f32,
    edge_ratio: f32,
) -> Option<(Keypoint, usize, usize, usize)> {
    let oct = &pyr.octaves[o];
    let s = pyr.scales_per_octave;
    let (w, h) = (oct.width, oct.height);
    let mut converged = None;
    for _ in 0..MAX_REFINE_ITERS {
        let (g, hess) = derivatives(&oct.dog, i, x, y);
        let off = solve3(&hess, g)?.map(|v| -v);
        if off.iter().all(|v| v.abs() < 0.5) {
            converged = Some((g, hess, off));
            break;
        }
        if off.iter().any(|v| !v.is_finite() || v.abs() > (w + h) as f32) {
            return None;
        }
        let nx = x as isize + off[0].round() as isize;
        let ny = y as isize + off[1].round() as isize;
        let ni = i as isize + off[2].round() as isize;
        if ni < 1
            || ni > s as isize
            || nx < BORDER as isize
            || ny < BORDER as isize
            || nx >= (w - BORDER) as isize
            || ny >= (h - BORDER) as isize
        {
            return None;
        }
        (x, y, i) = (nx as usize, ny as usize, ni as usize);
    }
    let (g, hess, off) = converged?;
    if !is_strict_extremum(&oct.dog, i, x, y) {
        return None;
    }
    let value = oct.dog[i].get(x, y) + 0.5 * (g[0] * off[0] + g[1] * off[1] + g[2] * off[2]);
    if value.abs() < contrast_threshold {
        return None;
    }
    if !passes_edge_test(hess[0][0], hess[1][1], hess[0][1], edge_ratio) {
        return None;
    }
    let f = (1u32 << o) as f32;
    let kp = Keypoint {
        x: (x as f32 + off[0]) * f,
        y: (y as f32 + off[1]) * f,
        scale: pyr.level_sigma(i as f32 + off[2]) * f,
        orientation: 0.0,
        response: value.abs(),
        octave: o as u8,
        level: i as u8,
    };
    Some((kp, i, x, y))
}

/// Gradient-orientation histogram around a keypoint in its own octave and level.
///
/// Returns `None` when no pixel of the window has a defined gradient.
pub fn orientation_histogram(pyr: &GaussianPyramid, kp: &Keypoint) -> Option<[f32; ORIENTATION_BINS]> {
    let oct = pyr.octaves.get(kp.octave as usize)?;
    let plane = oct.levels.get(kp.level as usize)?;
    let sigma = 1.5 * kp.octave_scale();
    let radius = (3.0 * sigma).round() as isize;
    let (ox, oy) = kp.octave_xy();
    let (cx, cy) = (ox.round() as isize, oy.round() as isize);
    let (w, h) = (plane.width as isize, plane.height as isize);
    let denom = 2.0 * sigma * sigma;
    let mut hist = [0f32; ORIENTATION_BINS];
    let mut used = 0usize;
    for dy in -radius..=radius {
        let py = cy + dy;
        if py < 1 || py >= h - 1 {
            continue;
        }
        for dx in -radius..=radius {
            let px = cx + dx;
            if px < 1 || px >= w - 1 {
                continue;
            }
            let (ux, uy) = (px as usize, py as usize);
            let gx = plane.get(ux + 1, uy) - plane.get(ux - 1, uy);
            let gy = plane.get(ux, uy + 1) - plane.get(ux, uy - 1);
            let weight = (-((dx * dx + dy * dy) as f32) / denom).exp();
            let angle = gy.atan2(gx).rem_euclid(TAU);
            let bin = (angle * ORIENTATION_BINS as f32 / TAU).round() as usize % ORIENTATION_BINS;
            hist[bin] += weight * (gx * gx + gy * gy).sqrt();
            used += 1;
        }
    }
    if used == 0 {
        return None;
    }
    // circular [1 4 6 4 1] / 16 smoothing
    let n = ORIENTATION_BINS;
    let mut smooth = [0f32; ORIENTATION_BINS];
    for (j, out) in smooth.iter_mut().enumerate() {
        let at = |d: isize| hist[(j as isize + d).rem_euclid(n as isize) as usize];
        *out = (at(-2) + at(2)) / 16.0 + (at(-1) + at(1)) * 4.0 / 16.0 + at(0) * 6.0 / 16.0;
    }
    Some(smooth)
}

/// Orientations (radians) of every local histogram peak at least 80% of the global maximum,
/// refined by a parabola through the peak and its two neighbors.
pub fn histogram_peaks(hist: &[f32]) -> Vec<f32> {
    let n = hist.len();
    let max = hist.iter().copied().fold(0f32, f32::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for j in 0..n {
        let c = hist[j];
        let l = hist[(j + n - 1) % n];
        let r = hist[(j + 1) % n];
        if c > l && c > r && c >= ORIENTATION_PEAK_RATIO * max {
            let offset = 0.5 * (l - r) / (l - 2.0 * c + r);
            let bin = j as f32 + offset;
            out.push((bin * TAU / n as f32).rem_euclid(TAU));
        }
    }
    out
}

/// One output keypoint per qualifying orientation peak; keypoints without a usable window are dropped.
pub fn assign_orientations(pyr: &GaussianPyramid, kps: &[Keypoint]) -> Vec<Keypoint> {
    let mut out = Vec::with_capacity(kps.len());
    for kp in kps {
        let Some(hist) = orientation_histogram(pyr, kp) else {
            continue;
        };
        for orientation in histogram_peaks(&hist) {
            // rem_euclid can round up to exactly TAU for tiny negative inputs
            let orientation = if orientation >= TAU { 0.0 } else { orientation };
            out.push(Keypoint { orientation, ..*kp });
        }
    }
    out
}

/// Angle difference folded into `[0, π]`.
pub fn angle_distance(a: f32, b: f32) -> f32 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d).min(PI)
}

/// Pyramid plus surviving unoriented keypoints for one image.
#[derive(Debug, Clone)]
pub struct Detection {
    pub pyramid: GaussianPyramid,
    pub keypoints: Vec<Keypoint>,
}

/// Builds the pyramid and runs the detector, lowering the octave count to what the image
/// supports.
pub fn detect(img: &GrayImage, params: &DetectorParams) -> Result<Detection> {
    let feasible = max_octaves(img.width(), img.height());
    let octaves = params.octaves.min(feasible);
    if octaves == 0 {
        return Err(Error::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            max_octaves: 0,
        });
    }
    let pyramid = build_pyramid(img, octaves, params.scales_per_octave, params.base_sigma)?;
    let keypoints = detect_extrema(&pyramid, params.contrast_threshold, params.edge_ratio);
    Ok(Detection {
        pyramid,
        keypoints,
    })
}

pub fn write_keypoints<W: Write>(w: &mut W, kps: &[Keypoint]) -> std::io::Result<()> {
    format::write_header(w, KEYPOINTS_MAGIC)?;
    w.write_u32::<LittleEndian>(kps.len() as u32)?;
    for kp in kps {
        for v in [kp.x, kp.y, kp.scale, kp.orientation, kp.response] {
            w.write_f32::<LittleEndian>(v)?;
        }
        w.write_u8(kp.octave)?;
        w.write_u8(kp.level)?;
    }
    Ok(())
}

pub fn read_keypoints<R: Read>(r: &mut R) -> Result<Vec<Keypoint>> {
    format::read_header(r, KEYPOINTS_MAGIC)?;
    let count = r.read_u32::<LittleEndian>().map_err(format::truncated)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let mut f = [0f32; 5];
        r.read_f32_into::<LittleEndian>(&mut f)
            .map_err(format::truncated)?;
        let octave = r.read_u8().map_err(format::truncated)?;
        let level = r.read_u8().map_err(format::truncated)?;
        out.push(Keypoint {
            x: f[0],
            y: f[1],
            scale: f[2],
            orientation: f[3],
            response: f[4],
            octave,
            level,
        });
    }
    Ok(out)
}

pub fn save_keypoints(path: &Path, kps: &[Keypoint]) -> Result<()> {
    format::save_with(path, |w| write_keypoints(w, kps))
}

pub fn load_keypoints(path: &Path) -> Result<Vec<Keypoint>> {
    read_keypoints(&mut format::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(size: usize, cx: f32, cy: f32, sigma: f32) -> GrayImage {
        GrayImage::from_fn(size, size, |x, y| {
            let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
            0.1 + 0.8 * (-d2 / (2.0 * sigma * sigma)).exp()
        })
    }

    /// Direct 2-D convolution with a truncated, normalized Gaussian and replicated borders.
    fn brute_blur(p: &Plane, sigma: f32) -> Plane {
        let r = (4.0 * sigma).ceil() as isize;
        let mut data = vec![0f32; p.data.len()];
        for y in 0..p.height as isize {
            for x in 0..p.width as isize {
                let (mut acc, mut norm) = (0f64, 0f64);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let wgt = (-((dx * dx + dy * dy) as f64)
                            / (2.0 * (sigma as f64).powi(2)))
                        .exp();
                        let xx = (x + dx).clamp(0, p.width as isize - 1) as usize;
                        let yy = (y + dy).clamp(0, p.height as isize - 1) as usize;
                        acc += wgt * p.get(xx, yy) as f64;
                        norm += wgt;
                    }
                }
                data[(y * p.width as isize + x) as usize] = (acc / norm) as f32;
            }
        }
        Plane {
            width: p.width,
            height: p.height,
            data,
        }
    }

    #[test]
    fn separable_blur_matches_brute_force_convolution() {
        let img = GrayImage::from_fn(23, 19, |x, y| ((x * 13 + y * 7) % 17) as f32 / 16.0);
        let p = Plane::from_image(&img);
        let fast = gaussian_blur(&p, 1.3);
        let slow = brute_blur(&p, 1.3);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_image_has_identically_zero_dog() {
        let pyr = build_pyramid(&GrayImage::constant(128, 128, 0.37), 4, 3, 1.6).unwrap();
        for oct in &pyr.octaves {
            assert_eq!(oct.dog.len(), 5);
            assert!(oct.dog.iter().all(|d| d.data.iter().all(|&v| v == 0.0)));
        }
        assert!(detect_extrema(&pyr, 0.03, 10.0).is_empty());
    }

    #[test]
    fn octave_sizes_halve() {
        let pyr = build_pyramid(&GrayImage::constant(512, 512, 0.5), 4, 3, 1.6).unwrap();
        let sizes: Vec<_> = pyr.octaves.iter().map(|o| (o.width, o.height)).collect();
        assert_eq!(sizes, vec![(512, 512), (256, 256), (128, 128), (64, 64)]);
        let odd = build_pyramid(&GrayImage::constant(131, 97, 0.5), 3, 3, 1.6).unwrap();
        let sizes: Vec<_> = odd.octaves.iter().map(|o| (o.width, o.height)).collect();
        assert_eq!(sizes, vec![(131, 97), (65, 48), (32, 24)]);
    }

    #[test]
    fn dog_is_difference_of_adjacent_levels() {
        let pyr = build_pyramid(&blob(64, 30.0, 30.0, 3.0), 2, 3, 1.6).unwrap();
        for oct in &pyr.octaves {
            for (i, d) in oct.dog.iter().enumerate() {
                for (k, v) in d.data.iter().enumerate() {
                    assert_eq!(*v, oct.levels[i + 1].data[k] - oct.levels[i].data[k]);
                }
            }
        }
    }

    #[test]
    fn too_small_image_reports_feasible_octaves() {
        match build_pyramid(&GrayImage::constant(100, 70, 0.5), 4, 3, 1.6) {
            Err(Error::ImageTooSmall { max_octaves, .. }) => assert_eq!(max_octaves, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_bright_pixel_gives_fine_scale_dog_extremum_at_that_pixel() {
        let img = GrayImage::from_fn(64, 64, |x, y| if (x, y) == (29, 34) { 1.0 } else { 0.0 });
        let pyr = build_pyramid(&img, 2, 3, 1.6).unwrap();
        // Oracle: the DoG of a delta is the difference of two sampled Gaussians, so the most
        // negative response of the first DoG level sits on the pixel itself.
        let dog0 = &pyr.octaves[0].dog[0];
        let (mut best, mut at) = (f32::MAX, (0, 0));
        for y in 0..64 {
            for x in 0..64 {
                if dog0.get(x, y) < best {
                    best = dog0.get(x, y);
                    at = (x, y);
                }
            }
        }
        assert_eq!(at, (29, 34));
        let level0 = brute_blur(
            &Plane::from_image(&img),
            (1.6f32 * 1.6 - ASSUMED_INPUT_BLUR * ASSUMED_INPUT_BLUR).sqrt(),
        );
        assert!((pyr.octaves[0].levels[0].get(29, 34) - level0.get(29, 34)).abs() < 1e-5);
    }

    #[test]
    fn isotropic_blob_gives_one_keypoint_at_its_center() {
        for (sigma, cx, cy) in [(3.0f32, 60.0f32, 66.0f32), (6.0, 64.0, 62.0)] {
            let pyr = build_pyramid(&blob(128, cx, cy, sigma), 4, 3, 1.6).unwrap();
            let kps = detect_extrema(&pyr, 0.03, 10.0);
            assert_eq!(kps.len(), 1, "sigma {sigma}: {kps:?}");
            let kp = kps[0];
            assert!((kp.x - cx).abs() <= 0.5 && (kp.y - cy).abs() <= 0.5, "{kp:?}");
            // exhaustive scan over the DoG volume finds the same sample
            let mut best = (0f32, 0usize, 0usize, 0usize, 0usize);
            for (o, oct) in pyr.octaves.iter().enumerate() {
                for i in 1..=3 {
                    for y in BORDER..oct.height - BORDER {
                        for x in BORDER..oct.width - BORDER {
                            let v = oct.dog[i].get(x, y).abs();
                            if v > best.0 {
                                best = (v, o, i, x, y);
                            }
                        }
                    }
                }
            }
            assert_eq!((best.1 as u8, best.2 as u8), (kp.octave, kp.level));
        }
        // scale follows blob radius
        let small = detect_extrema(&build_pyramid(&blob(128, 64.0, 64.0, 3.0), 4, 3, 1.6).unwrap(), 0.03, 10.0);
        let large = detect_extrema(&build_pyramid(&blob(128, 64.0, 64.0, 6.0), 4, 3, 1.6).unwrap(), 0.03, 10.0);
        let ratio = large[0].scale / small[0].scale;
        assert!((ratio - 2.0).abs() < 0.3, "scale ratio {ratio}");
    }

    #[test]
    fn straight_step_edge_yields_no_keypoints() {
        let img = GrayImage::from_fn(128, 128, |x, _| if x < 61 { 0.15 } else { 0.85 });
        let pyr = build_pyramid(&img, 4, 3, 1.6).unwrap();
        assert!(detect_extrema(&pyr, 0.03, 10.0).is_empty());
        // Oracle: along the edge the DoG Hessian has one vanishing principal curvature, so the
        // ratio test rejects every strong edge sample.
        let dog = &pyr.octaves[0].dog[1];
        for x in 55..68 {
            let y = 64;
            let v = dog.get(x, y);
            if v.abs() < 0.03 {
                continue;
            }
            let dxx = dog.get(x + 1, y) + dog.get(x - 1, y) - 2.0 * v;
            let dyy = dog.get(x, y + 1) + dog.get(x, y - 1) - 2.0 * v;
            let dxy = 0.25
                * (dog.get(x + 1, y + 1) - dog.get(x - 1, y + 1) - dog.get(x + 1, y - 1)
                    + dog.get(x - 1, y - 1));
            assert!(!passes_edge_test(dxx, dyy, dxy, 10.0));
        }
    }

    fn ramp_keypoint(pyr: &GaussianPyramid) -> Keypoint {
        Keypoint {
            x: 64.0,
            y: 64.0,
            scale: pyr.level_sigma(1.0),
            orientation: 0.0,
            response: 0.1,
            octave: 0,
            level: 1,
        }
    }

    #[test]
    fn ramp_orientation_points_along_gradient() {
        let img = GrayImage::from_fn(128, 128, |x, _| x as f32 / 160.0);
        let pyr = build_pyramid(&img, 2, 3, 1.6).unwrap();
        let out = assign_orientations(&pyr, &[ramp_keypoint(&pyr)]);
        assert_eq!(out.len(), 1);
        assert!(angle_distance(out[0].orientation, 0.0) <= PI / 36.0);

        let rotated = img.rotate90();
        let pyr = build_pyramid(&rotated, 2, 3, 1.6).unwrap();
        let out = assign_orientations(&pyr, &[ramp_keypoint(&pyr)]);
        assert_eq!(out.len(), 1);
        assert!(angle_distance(out[0].orientation, PI / 2.0) <= PI / 36.0);
    }

    #[test]
    fn equal_peaks_spawn_two_orientations() {
        let mut hist = [0f32; ORIENTATION_BINS];
        hist[4] = 2.0;
        hist[3] = 1.0;
        hist[5] = 1.0;
        hist[22] = 2.0;
        hist[21] = 1.0;
        hist[23] = 1.0;
        hist[12] = 1.5; // 75% of the maximum: ignored
        let peaks = histogram_peaks(&hist);
        assert_eq!(peaks.len(), 2);
        assert!((peaks[0] - 4.0 * TAU / 36.0).abs() < 1e-5);
        assert!((peaks[1] - 22.0 * TAU / 36.0).abs() < 1e-5);
    }

    #[test]
    fn keypoint_outside_image_is_dropped() {
        let pyr = build_pyramid(&blob(64, 30.0, 30.0, 3.0), 2, 3, 1.6).unwrap();
        let far = Keypoint {
            x: 500.0,
            y: -400.0,
            ..ramp_keypoint(&pyr)
        };
        assert!(assign_orientations(&pyr, &[far]).is_empty());
    }

    #[test]
    fn keypoint_file_layout() {
        let kp = Keypoint {
            x: 1.5,
            y: 2.5,
            scale: 3.0,
            orientation: 0.25,
            response: 0.5,
            octave: 2,
            level: 3,
        };
        let mut buf = Vec::new();
        write_keypoints(&mut buf, &[kp, kp]).unwrap();
        assert_eq!(buf.len(), 4 + 2 + 4 + 2 * 22);
        assert_eq!(&buf[..4], b"FCKP");
        assert_eq!(read_keypoints(&mut buf.as_slice()).unwrap(), vec![kp, kp]);
    }
}
