//! Retina-inspired binary descriptor: a 43-field sampling pattern, pattern-level orientation
//! from symmetric long-baseline pairs, and 512 smoothed-intensity comparisons.
//!
//! Gaussian receptive fields are approximated by box means over an integral image, with
//! box side `2 r + 1` where `r` is the field's smoothing radius in pixels.

use std::f32::consts::{FRAC_1_SQRT_2, PI, TAU};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptor::{DescriptorSet, FreakDescriptor, FREAK_BITS};
use crate::error::{Error, Result};
use crate::image::{GrayImage, IntegralImage};
use crate::scale_space::{self, DetectorParams, Keypoint};

pub const FIELDS: usize = 43;
pub const RINGS: usize = 7;
pub const POINTS_PER_RING: usize = 6;
pub const ALL_PAIRS: usize = FIELDS * (FIELDS - 1) / 2;
pub const ORIENTATION_PAIRS: usize = 45;
pub const MIN_TRAINING_ROWS: usize = 1000;
const ALL_PAIR_WORDS: usize = ALL_PAIRS.div_ceil(64);
const ORIENTATION_SEPARATOR: &str = "--orientation--";

/// Geometry of the sampling pattern, in units of keypoint scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatternConfig {
    /// Radius of the outermost ring.
    pub outer_radius: f32,
    /// Ratio between consecutive ring radii (and smoothing radii), inward.
    pub ring_ratio: f32,
    /// Smoothing radius as a fraction of the ring radius.
    pub smoothing_factor: f32,
}

impl Default for PatternConfig {
    fn default() -> Self {
        PatternConfig {
            outer_radius: 4.0,
            ring_ratio: FRAC_1_SQRT_2,
            smoothing_factor: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceptiveField {
    pub x: f32,
    pub y: f32,
    pub sigma: f32,
}

/// Fields are ordered outer ring first; the last field is the center.
#[derive(Debug, Clone, PartialEq)]
pub struct RetinalPattern {
    pub fields: Vec<ReceptiveField>,
}

pub fn build_pattern() -> RetinalPattern {
    build_pattern_with(&PatternConfig::default())
}

/// Seven rings of six fields around a center field; odd rings are rotated by half a step.
pub fn build_pattern_with(cfg: &PatternConfig) -> RetinalPattern {
    let mut fields = Vec::with_capacity(FIELDS);
    let step = TAU / POINTS_PER_RING as f32;
    let mut radius = cfg.outer_radius;
    for ring in 0..RINGS {
        let phase = if ring % 2 == 1 { step / 2.0 } else { 0.0 };
        for j in 0..POINTS_PER_RING {
            let a = j as f32 * step + phase;
            fields.push(ReceptiveField {
                x: radius * a.cos(),
                y: radius * a.sin(),
                sigma: radius * cfg.smoothing_factor,
            });
        }
        radius *= cfg.ring_ratio;
    }
    let innermost = fields.last().map(|f| f.sigma).unwrap_or(0.0);
    fields.push(ReceptiveField {
        x: 0.0,
        y: 0.0,
        sigma: innermost * cfg.ring_ratio,
    });
    RetinalPattern { fields }
}

impl RetinalPattern {
    pub fn baseline(&self, a: usize, b: usize) -> f32 {
        let (p, q) = (self.fields[a], self.fields[b]);
        ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt()
    }

    /// Field index → (ring, position); the center is ring `RINGS`.
    fn ring_of(a: usize) -> (usize, usize) {
        (a / POINTS_PER_RING, a % POINTS_PER_RING)
    }

    /// Rotates a field index by one 60° step of the pattern.
    fn rotate_index(a: usize) -> usize {
        let (ring, pos) = Self::ring_of(a);
        if ring == RINGS {
            a
        } else {
            ring * POINTS_PER_RING + (pos + 1) % POINTS_PER_RING
        }
    }
}

/// Every unordered pair `(a, b)`, `a < b`, in lexicographic order.
pub fn all_pairs() -> Vec<(u8, u8)> {
    let mut out = Vec::with_capacity(ALL_PAIRS);
    for a in 0..FIELDS {
        for b in a + 1..FIELDS {
            out.push((a as u8, b as u8));
        }
    }
    out
}

/// 45 orientation pairs: whole orbits of the pattern's 60° symmetry, longest baselines first.
pub fn orientation_pairs(pattern: &RetinalPattern) -> Vec<(u8, u8)> {
    let canon = |a: usize, b: usize| if a < b { (a, b) } else { (b, a) };
    let mut orbits: Vec<(f32, Vec<(usize, usize)>)> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (a, b) in all_pairs() {
        let (a, b) = (a as usize, b as usize);
        if seen.contains(&(a, b)) {
            continue;
        }
        let mut orbit = Vec::new();
        let (mut x, mut y) = (a, b);
        loop {
            let p = canon(x, y);
            if !seen.insert(p) {
                break;
            }
            orbit.push(p);
            x = RetinalPattern::rotate_index(x);
            y = RetinalPattern::rotate_index(y);
        }
        orbits.push((pattern.baseline(a, b), orbit));
    }
    orbits.sort_by(|l, r| r.0.total_cmp(&l.0));
    let mut out = Vec::with_capacity(ORIENTATION_PAIRS);
    for (_, orbit) in orbits {
        if out.len() + orbit.len() <= ORIENTATION_PAIRS {
            out.extend(orbit.into_iter().map(|(a, b)| (a as u8, b as u8)));
        }
        if out.len() == ORIENTATION_PAIRS {
            break;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSelection {
    /// Bit `k` compares `descriptor_pairs[k].0` against `.1`; coarse (long) pairs first.
    pub descriptor_pairs: Vec<(u8, u8)>,
    pub orientation_pairs: Vec<(u8, u8)>,
}

static DEFAULT_PAIRS: OnceLock<PairSelection> = OnceLock::new();

impl PairSelection {
    /// The shipped selection, trained once on the built-in synthetic corpus.
    pub fn shipped() -> &'static PairSelection {
        DEFAULT_PAIRS.get_or_init(|| {
            PairSelection::from_text(include_str!("../data/freak_pairs.txt"))
                .expect("shipped pair selection is valid")
        })
    }

    /// Untrained fallback: the 512 longest baselines.
    pub fn by_baseline(pattern: &RetinalPattern) -> PairSelection {
        let mut pairs = all_pairs();
        pairs.sort_by(|&(a, b), &(c, d)| {
            pattern
                .baseline(c as usize, d as usize)
                .total_cmp(&pattern.baseline(a as usize, b as usize))
        });
        pairs.truncate(FREAK_BITS);
        PairSelection {
            descriptor_pairs: pairs,
            orientation_pairs: orientation_pairs(pattern),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.descriptor_pairs.len() != FREAK_BITS {
            return Err(Error::Data(format!(
                "{} descriptor pairs, expected {FREAK_BITS}",
                self.descriptor_pairs.len()
            )));
        }
        if self.orientation_pairs.len() != ORIENTATION_PAIRS {
            return Err(Error::Data(format!(
                "{} orientation pairs, expected {ORIENTATION_PAIRS}",
                self.orientation_pairs.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for &(a, b) in self.descriptor_pairs.iter().chain(&self.orientation_pairs) {
            if a == b || a as usize >= FIELDS || b as usize >= FIELDS {
                return Err(Error::Data(format!("invalid pair ({a}, {b})")));
            }
        }
        for &(a, b) in &self.descriptor_pairs {
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Data(format!("duplicate pair ({a}, {b})")));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (a, b) in &self.descriptor_pairs {
            let _ = writeln!(out, "{a} {b}");
        }
        out.push_str(ORIENTATION_SEPARATOR);
        out.push('\n');
        for (a, b) in &self.orientation_pairs {
            let _ = writeln!(out, "{a} {b}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut sel = PairSelection {
            descriptor_pairs: Vec::new(),
            orientation_pairs: Vec::new(),
        };
        let mut orientation = false;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if line == ORIENTATION_SEPARATOR {
                orientation = true;
                continue;
            }
            let bad = || Error::Format(format!("bad pair line {line:?}"));
            let mut it = line.split_whitespace();
            let a: u8 = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let b: u8 = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if orientation {
                sel.orientation_pairs.push((a, b));
            } else {
                sel.descriptor_pairs.push((a, b));
            }
        }
        sel.validate()?;
        Ok(sel)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Inclusive pixel box of a field for a keypoint at `rotation`, or `None` if it leaves the image.
fn field_box(
    ii: &IntegralImage,
    kp: &Keypoint,
    field: &ReceptiveField,
    rotation: f32,
) -> Option<(usize, usize, usize, usize)> {
    let (c, s) = (rotation.cos(), rotation.sin());
    let px = kp.x + kp.scale * (c * field.x - s * field.y);
    let py = kp.y + kp.scale * (s * field.x + c * field.y);
    let (cx, cy) = (px.round() as isize, py.round() as isize);
    let r = (field.sigma * kp.scale).round() as isize;
    if cx - r < 0 || cy - r < 0 || cx + r >= ii.width() as isize || cy + r >= ii.height() as isize {
        return None;
    }
    Some(((cx - r) as usize, (cy - r) as usize, (cx + r) as usize, (cy + r) as usize))
}

/// Box sum and pixel count of one field.
#[derive(Debug, Clone, Copy)]
struct FieldSample {
    sum: f64,
    area: f64,
}

impl FieldSample {
    fn mean(self) -> f64 {
        self.sum / self.area
    }

    /// `mean(self) > mean(other)`, compared by cross-multiplication.
    fn brighter_than(self, other: FieldSample) -> bool {
        self.sum * other.area > other.sum * self.area
    }
}

fn sample_all(
    ii: &IntegralImage,
    kp: &Keypoint,
    pattern: &RetinalPattern,
    rotation: f32,
) -> Option<Vec<FieldSample>> {
    pattern
        .fields
        .iter()
        .map(|f| {
            let (x0, y0, x1, y1) = field_box(ii, kp, f, rotation)?;
            Some(FieldSample {
                sum: ii.box_sum(x0, y0, x1, y1),
                area: ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64,
            })
        })
        .collect()
}

/// Mean intensity of a receptive field after rotating its offset by `rotation` about the keypoint.
pub fn smoothed_intensity(
    ii: &IntegralImage,
    kp: &Keypoint,
    field: &ReceptiveField,
    rotation: f32,
) -> Option<f32> {
    let (x0, y0, x1, y1) = field_box(ii, kp, field, rotation)?;
    let area = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
    Some((ii.box_sum(x0, y0, x1, y1) / area) as f32)
}

/// Direction of `Σ (I_a − I_b) · unit(p_a − p_b)` over the orientation pairs, in `[0, 2π)`.
///
/// A vanishing sum (magnitude below 1e-9) yields 0.
pub fn estimate_orientation(
    ii: &IntegralImage,
    kp: &Keypoint,
    pattern: &RetinalPattern,
    pairs: &PairSelection,
) -> Option<f32> {
    let samples = sample_all(ii, kp, pattern, 0.0)?;
    Some(orientation_from_samples(&samples, pattern, pairs))
}

fn orientation_vector(samples: &[FieldSample], pattern: &RetinalPattern, pairs: &PairSelection) -> (f64, f64) {
    let (mut ox, mut oy) = (0f64, 0f64);
    for &(a, b) in &pairs.orientation_pairs {
        let (a, b) = (a as usize, b as usize);
        let diff = samples[a].mean() - samples[b].mean();
        let (pa, pb) = (pattern.fields[a], pattern.fields[b]);
        let (dx, dy) = ((pa.x - pb.x) as f64, (pa.y - pb.y) as f64);
        let len = (dx * dx + dy * dy).sqrt();
        ox += diff * dx / len;
        oy += diff * dy / len;
    }
    (ox, oy)
}

fn orientation_from_samples(samples: &[FieldSample], pattern: &RetinalPattern, pairs: &PairSelection) -> f32 {
    let (ox, oy) = orientation_vector(samples, pattern, pairs);
    if (ox * ox + oy * oy).sqrt() < 1e-9 {
        return 0.0;
    }
    let angle = (oy.atan2(ox) as f32).rem_euclid(TAU);
    if angle >= TAU {
        0.0
    } else {
        angle
    }
}

/// Bit `k` is set iff field `a_k` is strictly brighter than field `b_k` in the rotated pattern.
pub fn compute_freak(
    ii: &IntegralImage,
    kp: &Keypoint,
    orientation: f32,
    pattern: &RetinalPattern,
    pairs: &PairSelection,
) -> Option<FreakDescriptor> {
    let samples = sample_all(ii, kp, pattern, orientation)?;
    let mut d = FreakDescriptor::zeros();
    for (k, &(a, b)) in pairs.descriptor_pairs.iter().enumerate() {
        if samples[a as usize].brighter_than(samples[b as usize]) {
            d.set(k);
        }
    }
    Some(d)
}

/// Orientation estimate plus descriptor; `None` when any field leaves the image.
pub fn describe_keypoint(
    ii: &IntegralImage,
    kp: &Keypoint,
    pattern: &RetinalPattern,
    pairs: &PairSelection,
) -> Option<(f32, FreakDescriptor)> {
    let orientation = estimate_orientation(ii, kp, pattern, pairs)?;
    let d = compute_freak(ii, kp, orientation, pattern, pairs)?;
    Some((orientation, d))
}

/// All 903 comparisons (lexicographic pair order) packed into 15 words; training input for
/// [`select_pairs`].
pub fn full_comparisons(
    ii: &IntegralImage,
    kp: &Keypoint,
    pattern: &RetinalPattern,
    pairs: &PairSelection,
) -> Option<Vec<u64>> {
    let orientation = estimate_orientation(ii, kp, pattern, pairs)?;
    let samples = sample_all(ii, kp, pattern, orientation)?;
    let mut row = vec![0u64; ALL_PAIR_WORDS];
    for (k, (a, b)) in all_pairs().into_iter().enumerate() {
        if samples[a as usize].brighter_than(samples[b as usize]) {
            row[k / 64] |= 1 << (k % 64);
        }
    }
    Some(row)
}

/// Pearson correlation of two 0/1 columns from their popcounts; zero when either is constant.
fn binary_correlation(p_a: f64, p_b: f64, joint: f64) -> f64 {
    let var = p_a * (1.0 - p_a) * p_b * (1.0 - p_b);
    if var <= 0.0 {
        return 0.0;
    }
    (joint - p_a * p_b) / var.sqrt()
}

/// Greedy decorrelated pair selection over training comparison rows.
///
/// Pairs are visited by increasing `|mean − 0.5|`; a pair is accepted if its absolute
/// correlation with every accepted pair is below the threshold (0.2, relaxed by 0.05 until 512
/// pairs qualify). The result is ordered by baseline length, longest first. With fewer than
/// [`MIN_TRAINING_ROWS`] rows the shipped selection is returned.
pub fn select_pairs(rows: &[Vec<u64>], pattern: &RetinalPattern) -> PairSelection {
    if rows.len() < MIN_TRAINING_ROWS {
        warn!(
            "only {} training rows (need {MIN_TRAINING_ROWS}); using the shipped pair selection",
            rows.len()
        );
        return PairSelection::shipped().clone();
    }
    let n = rows.len();
    let words = n.div_ceil(64);
    // transpose into one bitset column per pair
    let mut columns = vec![vec![0u64; words]; ALL_PAIRS];
    for (r, row) in rows.iter().enumerate() {
        for (k, column) in columns.iter_mut().enumerate() {
            if row[k / 64] >> (k % 64) & 1 == 1 {
                column[r / 64] |= 1 << (r % 64);
            }
        }
    }
    let means: Vec<f64> = columns
        .iter()
        .map(|c| c.iter().map(|w| w.count_ones() as f64).sum::<f64>() / n as f64)
        .collect();
    let mut ranked: Vec<usize> = (0..ALL_PAIRS).collect();
    ranked.sort_by(|&a, &b| {
        (means[a] - 0.5)
            .abs()
            .total_cmp(&(means[b] - 0.5).abs())
            .then(a.cmp(&b))
    });

    let corr = |a: usize, b: usize| {
        let joint: u32 = columns[a]
            .iter()
            .zip(&columns[b])
            .map(|(x, y)| (x & y).count_ones())
            .sum();
        binary_correlation(means[a], means[b], joint as f64 / n as f64)
    };

    let mut accepted: Vec<usize> = Vec::with_capacity(FREAK_BITS);
    let mut taken = vec![false; ALL_PAIRS];
    let mut threshold = 0.2;
    while accepted.len() < FREAK_BITS {
        for &p in &ranked {
            if accepted.len() == FREAK_BITS {
                break;
            }
            if taken[p] {
                continue;
            }
            if accepted.iter().all(|&q| corr(p, q).abs() < threshold) {
                accepted.push(p);
                taken[p] = true;
            }
        }
        threshold += 0.05;
    }

    let pairs = all_pairs();
    let mut chosen: Vec<(u8, u8)> = accepted.iter().map(|&k| pairs[k]).collect();
    chosen.sort_by(|&(a, b), &(c, d)| {
        pattern
            .baseline(c as usize, d as usize)
            .total_cmp(&pattern.baseline(a as usize, b as usize))
    });
    PairSelection {
        descriptor_pairs: chosen,
        orientation_pairs: orientation_pairs(pattern),
    }
}

/// FREAK descriptors with the keypoints (carrying the FREAK orientation) that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct FreakFeatures {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: DescriptorSet,
}

/// Describes detector keypoints; keypoints with any field outside the image are dropped.
pub fn describe(
    img: &GrayImage,
    keypoints: &[Keypoint],
    pattern: &RetinalPattern,
    pairs: &PairSelection,
) -> FreakFeatures {
    let ii = IntegralImage::new(img);
    let described: Vec<(Keypoint, FreakDescriptor)> = keypoints
        .par_iter()
        .map(|kp| {
            describe_keypoint(&ii, kp, pattern, pairs)
                .map(|(orientation, d)| (Keypoint { orientation, ..*kp }, d))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let (keypoints, descriptors) = described.into_iter().unzip();
    FreakFeatures {
        keypoints,
        descriptors: DescriptorSet::Freak(descriptors),
    }
}

pub fn extract_freak(
    img: &GrayImage,
    params: &DetectorParams,
    pattern: &RetinalPattern,
    pairs: &PairSelection,
) -> Result<FreakFeatures> {
    let detection = scale_space::detect(img, params)?;
    Ok(describe(img, &detection.keypoints, pattern, pairs))
}

/// Training rows for [`select_pairs`] from detector keypoints of `images`.
pub fn training_rows(
    images: &[GrayImage],
    params: &DetectorParams,
    pattern: &RetinalPattern,
) -> Result<Vec<Vec<u64>>> {
    let orientation = PairSelection {
        descriptor_pairs: Vec::new(),
        orientation_pairs: orientation_pairs(pattern),
    };
    let per_image: Vec<Result<Vec<Vec<u64>>>> = images
        .par_iter()
        .map(|img| {
            let det = scale_space::detect(img, params)?;
            let ii = IntegralImage::new(img);
            Ok(det
                .keypoints
                .iter()
                .filter_map(|kp| full_comparisons(&ii, kp, pattern, &orientation))
                .collect())
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_image {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Angle in `[0, π]` between two orientations.
pub fn orientation_error(a: f32, b: f32) -> f32 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d).min(PI)
}
