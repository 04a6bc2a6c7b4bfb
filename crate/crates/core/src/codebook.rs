//! Visual vocabulary: k-means++ seeding and Lloyd iterations over embedded descriptors, plus
//! nearest-word assignment.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptor::{DescriptorKind, DescriptorSet};
use crate::error::{Error, Result};
use crate::format::{self, CODEBOOK_MAGIC};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansParams {
    pub max_iters: usize,
    /// Stop once the summed squared centroid shift is at most `tol` times the total variance
    /// of the data.
    pub tol: f64,
    /// Independent seedings; the run with the lowest final objective is kept.
    pub restarts: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            max_iters: 100,
            tol: 1e-4,
            restarts: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    kind: DescriptorKind,
    dim: usize,
    seed: u64,
    /// `size × dim` row-major centroids.
    words: Vec<f32>,
}

/// Squared Euclidean distance accumulated in `f64`.
#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    accumulate(a, b, |x, y| x as f64 - y as f64)
}

#[inline]
fn squared_distance_f64(a: &[f32], b: &[f64]) -> f64 {
    accumulate(a, b, |x, y| x as f64 - y)
}

/// Sum of squared differences over four interleaved partial sums, which lets the compiler
/// vectorize the loop.
#[inline(always)]
fn accumulate<T: Copy>(a: &[f32], b: &[T], diff: impl Fn(f32, T) -> f64) -> f64 {
    let mut acc = [0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            let d = diff(x[k], y[k]);
            acc[k] += d * d;
        }
    }
    let mut tail = 0.0;
    for (&x, &y) in ra.iter().zip(rb) {
        let d = diff(x, y);
        tail += d * d;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Index of the nearest row of `centers` (ties → lowest index) and its distance.
fn nearest(point: &[f32], centers: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.chunks_exact(dim).enumerate() {
        let d = squared_distance_f64(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

impl Codebook {
    pub fn new(kind: DescriptorKind, seed: u64, words: Vec<f32>) -> Result<Self> {
        let dim = kind.embedded_dim();
        if !words.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: words.len() % dim,
            });
        }
        if words.len() / dim < 2 {
            return Err(Error::Parameter("a codebook needs at least 2 words".into()));
        }
        if words.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite centroid value".into()));
        }
        Ok(Codebook { kind, dim, seed, words })
    }

    pub fn kind(&self) -> DescriptorKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of words `Z`.
    pub fn size(&self) -> usize {
        self.words.len() / self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn word(&self, i: usize) -> &[f32] {
        &self.words[i * self.dim..(i + 1) * self.dim]
    }

    /// Index of the nearest word by squared Euclidean distance; ties go to the lowest index.
    pub fn assign_word(&self, d: &[f32]) -> Result<usize> {
        if d.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: d.len(),
            });
        }
        Ok(self.nearest_unchecked(d))
    }

    pub(crate) fn nearest_unchecked(&self, d: &[f32]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (j, w) in self.words.chunks_exact(self.dim).enumerate() {
            let dist = squared_distance(d, w);
            if dist < best.1 {
                best = (j, dist);
            }
        }
        best.0
    }

    /// Word index of every descriptor in `set`.
    pub fn assign_all(&self, set: &DescriptorSet) -> Result<Vec<usize>> {
        if set.kind() != self.kind {
            return Err(Error::KindMismatch {
                expected: self.kind,
                found: set.kind(),
            });
        }
        Ok((0..set.len())
            .into_par_iter()
            .map(|i| self.nearest_unchecked(&set.embedded_row(i)))
            .collect())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        format::write_header(w, CODEBOOK_MAGIC)?;
        w.write_u8(self.kind.tag())?;
        w.write_u32::<LittleEndian>(self.size() as u32)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        for &v in &self.words {
            w.write_f32::<LittleEndian>(v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        format::read_header(r, CODEBOOK_MAGIC)?;
        let kind = DescriptorKind::from_tag(r.read_u8().map_err(format::truncated)?)?;
        let size = r.read_u32::<LittleEndian>().map_err(format::truncated)? as usize;
        let dim = r.read_u32::<LittleEndian>().map_err(format::truncated)? as usize;
        if dim != kind.embedded_dim() {
            return Err(Error::DimensionMismatch {
                expected: kind.embedded_dim(),
                found: dim,
            });
        }
        let seed = r.read_u64::<LittleEndian>().map_err(format::truncated)?;
        let mut words = vec![0f32; size * dim];
        r.read_f32_into::<LittleEndian>(&mut words)
            .map_err(format::truncated)?;
        Self::new(kind, seed, words)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::save_with(path, |w| self.write_to(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut format::open(path)?)
    }
}

/// Objective value after every assignment step of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTrace {
    pub objectives: Vec<f64>,
    pub converged: bool,
}

pub fn train_codebook(set: &DescriptorSet, z: usize, seed: u64, params: &KMeansParams) -> Result<Codebook> {
    train_codebook_traced(set, z, seed, params).map(|(cb, _)| cb)
}

pub fn train_codebook_traced(
    set: &DescriptorSet,
    z: usize,
    seed: u64,
    params: &KMeansParams,
) -> Result<(Codebook, TrainingTrace)> {
    let kind = set.kind();
    let (centers, trace) = kmeans(&set.embed_all(), kind.embedded_dim(), z, seed, params)?;
    let words = centers.into_iter().map(|v| v as f32).collect();
    Ok((Codebook::new(kind, seed, words)?, trace))
}

fn distinct_rows(data: &[f32], dim: usize, limit: usize) -> usize {
    let mut seen = std::collections::HashSet::new();
    for row in data.chunks_exact(dim) {
        seen.insert(row.iter().map(|v| v.to_bits()).collect::<Vec<u32>>());
        if seen.len() >= limit {
            break;
        }
    }
    seen.len()
}

fn kmeans_pp(data: &[f32], dim: usize, z: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = data.len() / dim;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    // greedy variant: several D²-sampled candidates per step, keep the one that lowers the potential most
    let trials = 2 + (z as f64).ln() as usize;
    let mut centers: Vec<f64> = Vec::with_capacity(z * dim);
    let first = rng.random_range(0..n);
    centers.extend(row(first).iter().map(|&v| v as f64));
    let mut best: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| squared_distance_f64(row(i), &centers[..dim]))
        .collect();
    for _ in 1..z {
        let total: f64 = best.iter().sum();
        let mut candidates: Vec<usize> = (0..trials).map(|_| sample_d2(&best, total, rng)).collect();
        candidates.dedup();
        let mut chosen: Option<(f64, usize, Vec<f64>)> = None;
        for &c in &candidates {
            let cand: Vec<f64> = row(c).iter().map(|&v| v as f64).collect();
            let updated: Vec<f64> = best
                .par_iter()
                .enumerate()
                .map(|(i, &b)| b.min(squared_distance_f64(row(i), &cand)))
                .collect();
            let potential: f64 = updated.iter().sum();
            if chosen.as_ref().is_none_or(|(p, _, _)| potential < *p) {
                chosen = Some((potential, c, updated));
            }
        }
        let (_, pick, updated) = chosen.expect("at least one candidate");
        centers.extend(row(pick).iter().map(|&v| v as f64));
        best = updated;
    }
    centers
}

/// Draws an index with probability proportional to `weights`; uniform when all are zero.
fn sample_d2(weights: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    if total <= 0.0 {
        return rng.random_range(0..weights.len());
    }
    let target = rng.random_range(0.0..total);
    let mut acc = 0.0;
    for (i, &d) in weights.iter().enumerate() {
        acc += d;
        if d > 0.0 && acc > target {
            return i;
        }
    }
    // rounding can leave `target` past the last partial sum
    weights.iter().rposition(|&d| d > 0.0).unwrap_or(0)
}

/// Assignment step: labels, per-point distances and the objective.
fn assign(data: &[f32], dim: usize, centers: &[f64]) -> (Vec<usize>, Vec<f64>, f64) {
    let (labels, dists): (Vec<usize>, Vec<f64>) = data
        .par_chunks_exact(dim)
        .map(|p| nearest(p, centers, dim))
        .unzip();
    let objective = dists.iter().sum();
    (labels, dists, objective)
}

/// Update step: cluster means, with each empty cluster reseeded to the point farthest from
/// its current centroid (taken from a cluster that keeps at least one member).
fn update(data: &[f32], dim: usize, z: usize, labels: &mut [usize], dists: &mut [f64]) -> Vec<f64> {
    let mut counts = vec![0usize; z];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    for empty in 0..z {
        if counts[empty] > 0 {
            continue;
        }
        let far = (0..labels.len())
            .filter(|&i| counts[labels[i]] > 1)
            .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
        if let Some(i) = far {
            counts[labels[i]] -= 1;
            labels[i] = empty;
            counts[empty] = 1;
            dists[i] = 0.0;
        }
    }
    let mut sums = vec![0f64; z * dim];
    for (p, &l) in data.chunks_exact(dim).zip(labels.iter()) {
        for (s, &v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(p) {
            *s += v as f64;
        }
    }
    for (l, &c) in counts.iter().enumerate() {
        if c > 0 {
            sums[l * dim..(l + 1) * dim].iter_mut().for_each(|s| *s /= c as f64);
        }
    }
    sums
}

fn total_variance(data: &[f32], dim: usize) -> f64 {
    let n = (data.len() / dim) as f64;
    let mut mean = vec![0f64; dim];
    for p in data.chunks_exact(dim) {
        for (m, &v) in mean.iter_mut().zip(p) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    data.chunks_exact(dim)
        .map(|p| squared_distance_f64(p, &mean))
        .sum::<f64>()
        / n
}

/// Lloyd's algorithm on `n × dim` row-major data; returns `z × dim` centroids.
pub fn kmeans(
    data: &[f32],
    dim: usize,
    z: usize,
    seed: u64,
    params: &KMeansParams,
) -> Result<(Vec<f64>, TrainingTrace)> {
    if z < 2 {
        return Err(Error::Parameter(format!("codebook size must be at least 2, got {z}")));
    }
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: data.len(),
        });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("descriptor contains NaN or infinite values".into()));
    }
    let n = data.len() / dim;
    if n < z {
        return Err(Error::InsufficientDescriptors { have: n, need: z });
    }
    let distinct = distinct_rows(data, dim, z);
    if distinct < z {
        return Err(Error::InsufficientDescriptors {
            have: distinct,
            need: z,
        });
    }

    let threshold = params.tol * total_variance(data, dim);
    let mut best: Option<(Vec<f64>, TrainingTrace)> = None;
    for r in 0..params.restarts.max(1) {
        let run_seed = if r == 0 { seed } else { restart_seed(seed, r as u64) };
        let run = lloyd(data, dim, z, run_seed, threshold, params.max_iters);
        let better = match &best {
            None => true,
            Some((_, t)) => run.1.objectives.last() < t.objectives.last(),
        };
        if better {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn restart_seed(seed: u64, r: u64) -> u64 {
    // splitmix64 finalizer
    let mut x = seed ^ r.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn lloyd(data: &[f32], dim: usize, z: usize, seed: u64, threshold: f64, max_iters: usize) -> (Vec<f64>, TrainingTrace) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_pp(data, dim, z, &mut rng);
    let mut objectives = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters {
        let (mut labels, mut dists, objective) = assign(data, dim, &centers);
        objectives.push(objective);
        let next = update(data, dim, z, &mut labels, &mut dists);
        let shift: f64 = centers
            .chunks_exact(dim)
            .zip(next.chunks_exact(dim))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
            .sum();
        centers = next;
        if shift <= threshold {
            converged = true;
            break;
        }
    }
    let (_, _, objective) = assign(data, dim, &centers);
    objectives.push(objective);
    (centers, TrainingTrace { objectives, converged })
}

/// Sum of squared distances from every point to its nearest word.
pub fn objective(cb: &Codebook, data: &[f32]) -> f64 {
    data.chunks_exact(cb.dim())
        .map(|p| squared_distance(p, cb.word(cb.nearest_unchecked(p))))
        .sum()
}
