//! 128-dimensional gradient-histogram descriptor (4×4 cells × 8 orientation bins).

use std::f32::consts::TAU;

use rayon::prelude::*;

use crate::descriptor::{DescriptorSet, SiftDescriptor, SIFT_DIM};
use crate::error::Result;
use crate::image::GrayImage;
use crate::scale_space::{self, DetectorParams, GaussianPyramid, Keypoint};

const CELLS: usize = 4;
const BINS: usize = 8;
/// Cell width in units of the keypoint's octave scale.
const CELL_SCALE: f32 = 3.0;
pub const CLAMP: f32 = 0.2;

/// Pixel radius of the sampling window, including the half-cell interpolation margin.
pub fn window_radius(octave_scale: f32) -> isize {
    let cell = CELL_SCALE * octave_scale;
    (cell * std::f32::consts::SQRT_2 * (CELLS as f32 + 1.0) * 0.5).round() as isize
}

/// Unit-normalizes, then alternates clamping at [`CLAMP`] and renormalizing until the vector
/// no longer changes. Returns `None` for an all-zero input.
pub fn normalize_and_clamp(raw: &[f32]) -> Option<Vec<f32>> {
    let mut v: Vec<f64> = raw.iter().map(|&x| x as f64).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= f64::EPSILON {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    for _ in 0..=SIFT_DIM {
        let clamped: Vec<f64> = v.iter().map(|&x| x.min(CLAMP as f64)).collect();
        let n = clamped.iter().map(|x| x * x).sum::<f64>().sqrt();
        let next: Vec<f64> = clamped.iter().map(|x| x / n).collect();
        let change = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        if change < 1e-12 {
            break;
        }
    }
    Some(v.into_iter().map(|x| x as f32).collect())
}

/// Descriptor for an oriented keypoint, or `None` when the rotated window leaves the octave
/// image or the patch has no gradient.
pub fn compute_sift(pyr: &GaussianPyramid, kp: &Keypoint) -> Option<SiftDescriptor> {
    let plane = pyr.octaves.get(kp.octave as usize)?.levels.get(kp.level as usize)?;
    let sigma = kp.octave_scale();
    let (ox, oy) = kp.octave_xy();
    let (cx, cy) = (ox.round() as isize, oy.round() as isize);
    let radius = window_radius(sigma);
    let (w, h) = (plane.width as isize, plane.height as isize);
    if cx - radius < 1 || cy - radius < 1 || cx + radius > w - 2 || cy + radius > h - 2 {
        return None;
    }

    let cell = CELL_SCALE * sigma;
    let (cos_t, sin_t) = (kp.orientation.cos() / cell, kp.orientation.sin() / cell);
    let half = CELLS as f32 / 2.0;
    let weight_scale = -1.0 / (half * half * 2.0);
    let stride_c = BINS + 2;
    let stride_r = (CELLS + 2) * stride_c;
    let mut hist = vec![0f32; (CELLS + 2) * stride_r];

    // sub-pixel position relative to the rounded center
    let (fx, fy) = (ox - cx as f32, oy - cy as f32);
    for i in -radius..=radius {
        for j in -radius..=radius {
            let (dx, dy) = (j as f32 - fx, i as f32 - fy);
            let x_rot = dx * cos_t + dy * sin_t;
            let y_rot = -dx * sin_t + dy * cos_t;
            let rbin = y_rot + half - 0.5;
            let cbin = x_rot + half - 0.5;
            if rbin <= -1.0 || rbin >= CELLS as f32 || cbin <= -1.0 || cbin >= CELLS as f32 {
                continue;
            }
            let (px, py) = ((cx + j) as usize, (cy + i) as usize);
            let gx = plane.get(px + 1, py) - plane.get(px - 1, py);
            let gy = plane.get(px, py + 1) - plane.get(px, py - 1);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let angle = (gy.atan2(gx) - kp.orientation).rem_euclid(TAU);
            let obin = angle * BINS as f32 / TAU;
            let weighted = mag * ((x_rot * x_rot + y_rot * y_rot) * weight_scale).exp();

            let (r0, c0, o0) = (rbin.floor(), cbin.floor(), obin.floor());
            let (dr, dc, dob) = (rbin - r0, cbin - c0, obin - o0);
            let (r0, c0) = ((r0 as isize + 1) as usize, (c0 as isize + 1) as usize);
            let o0 = (o0 as usize) % BINS;
            for (ri, wr) in [(0, 1.0 - dr), (1, dr)] {
                for (ci, wc) in [(0, 1.0 - dc), (1, dc)] {
                    let base = (r0 + ri) * stride_r + (c0 + ci) * stride_c;
                    let v = weighted * wr * wc;
                    hist[base + o0] += v * (1.0 - dob);
                    hist[base + o0 + 1] += v * dob;
                }
            }
        }
    }

    let mut raw = [0f32; SIFT_DIM];
    for r in 0..CELLS {
        for c in 0..CELLS {
            let base = (r + 1) * stride_r + (c + 1) * stride_c;
            // bin BINS wraps onto bin 0
            hist[base] += hist[base + BINS];
            for k in 0..BINS {
                raw[(r * CELLS + c) * BINS + k] = hist[base + k];
            }
        }
    }
    let values = normalize_and_clamp(&raw)?;
    let mut out = [0f32; SIFT_DIM];
    out.copy_from_slice(&values);
    Some(SiftDescriptor(out))
}

/// SIFT descriptors with the oriented keypoints that produced them (parallel lists).
#[derive(Debug, Clone, PartialEq)]
pub struct SiftFeatures {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: DescriptorSet,
}

/// Describes already detected keypoints: orientation assignment then descriptor computation.
pub fn describe(pyr: &GaussianPyramid, detected: &[Keypoint]) -> SiftFeatures {
    let oriented = scale_space::assign_orientations(pyr, detected);
    let described: Vec<(Keypoint, SiftDescriptor)> = oriented
        .par_iter()
        .map(|kp| compute_sift(pyr, kp).map(|d| (*kp, d)))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let (keypoints, descriptors) = described.into_iter().unzip();
    SiftFeatures {
        keypoints,
        descriptors: DescriptorSet::Sift(descriptors),
    }
}

pub fn extract_sift(img: &GrayImage, params: &DetectorParams) -> Result<SiftFeatures> {
    let detection = scale_space::detect(img, params)?;
    Ok(describe(&detection.pyramid, &detection.keypoints))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scale_space::build_pyramid;
    use crate::synth;

    fn manual_kp(pyr: &GaussianPyramid, x: f32, y: f32, orientation: f32) -> Keypoint {
        Keypoint {
            x,
            y,
            scale: pyr.level_sigma(1.0),
            orientation,
            response: 0.1,
            octave: 0,
            level: 1,
        }
    }

    fn distance(a: &SiftDescriptor, b: &SiftDescriptor) -> f32 {
        a.0.iter()
            .zip(b.0.iter())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f32>()
            .sqrt()
    }

    #[test]
    fn constant_patch_has_no_descriptor() {
        let pyr = build_pyramid(&GrayImage::constant(128, 128, 0.4), 2, 3, 1.6).unwrap();
        assert!(compute_sift(&pyr, &manual_kp(&pyr, 64.0, 64.0, 0.3)).is_none());
    }

    #[test]
    fn window_outside_image_is_dropped() {
        let pyr = build_pyramid(&synth::textured(128, 128, 1), 2, 3, 1.6).unwrap();
        assert!(compute_sift(&pyr, &manual_kp(&pyr, 5.0, 64.0, 0.0)).is_none());
    }

    #[test]
    fn textured_output_is_unit_norm_and_clamp_stable() {
        let img = synth::textured(256, 256, 4);
        let feats = extract_sift(&img, &DetectorParams::default()).unwrap();
        let DescriptorSet::Sift(ds) = &feats.descriptors else {
            unreachable!()
        };
        assert!(!ds.is_empty());
        assert_eq!(ds.len(), feats.keypoints.len());
        for d in ds {
            let norm: f64 = d.0.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-6);
            assert!(d.0.iter().all(|&v| v >= 0.0));
            let again = normalize_and_clamp(&d.0).unwrap();
            for (a, b) in again.iter().zip(d.0.iter()) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn sparse_vector_clamps_to_equal_components() {
        let mut raw = [0f32; SIFT_DIM];
        raw[0] = 10.0;
        raw[1] = 1.0;
        raw[2] = 0.5;
        let v = normalize_and_clamp(&raw).unwrap();
        let expect = 1.0 / 3f32.sqrt();
        assert!(v[..3].iter().all(|x| (x - expect).abs() < 1e-6));
    }

    #[test]
    fn descriptor_survives_37_degree_rotation() {
        let angle = 37f32.to_radians();
        let img = synth::textured(160, 160, 21);
        let rot = synth::rotate_about_center(&img, angle);
        let pyr = build_pyramid(&img, 2, 3, 1.6).unwrap();
        let pyr_r = build_pyramid(&rot, 2, 3, 1.6).unwrap();
        let mut checked = 0;
        for (x, y, theta) in [(70.0, 75.0, 0.4), (85.0, 80.0, 2.0), (78.0, 90.0, 4.1), (80.0, 70.0, 5.5)] {
            let (rx, ry) = synth::rotate_point_about_center(160, 160, x, y, angle);
            let a = compute_sift(&pyr, &manual_kp(&pyr, x, y, theta)).unwrap();
            let b = compute_sift(&pyr_r, &manual_kp(&pyr_r, rx, ry, theta + angle)).unwrap();
            let d = distance(&a, &b);
            assert!(d < 0.4, "distance {d} at ({x}, {y})");
            checked += 1;
        }
        assert_eq!(checked, 4);
    }

    #[test]
    fn extraction_is_deterministic_and_empty_on_constant_images() {
        let img = synth::textured(128, 128, 8);
        let p = DetectorParams::default();
        assert_eq!(extract_sift(&img, &p).unwrap(), extract_sift(&img, &p).unwrap());
        let flat = extract_sift(&GrayImage::constant(128, 128, 0.5), &p).unwrap();
        assert!(flat.descriptors.is_empty());
    }
}
