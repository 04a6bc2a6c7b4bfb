//! One-vs-rest linear SVMs on fused vectors and ranking by closeness of classifier scores.
//!
//! Each binary problem minimizes `½‖w‖² + C Σ max(0, 1 − yᵢ(w·xᵢ + b))`, with the bias
//! learned as the weight of a constant feature. It is solved by dual coordinate descent; the
//! duality gap bounds the distance to the optimum and serves as the stopping rule.

use std::cmp::Ordering;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{self, MODEL_MAGIC};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmParams {
    pub c_reg: f64,
    pub max_epochs: usize,
    /// Stop once `primal − dual ≤ gap_tol · primal`.
    pub gap_tol: f64,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            c_reg: 1.0,
            max_epochs: 2000,
            gap_tol: 1e-3,
        }
    }
}

/// Solver outcome for one binary problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinaryReport {
    pub epochs: usize,
    pub primal: f64,
    pub dual: f64,
}

impl BinaryReport {
    /// Upper bound on `(primal − optimum) / primal`.
    pub fn relative_gap(&self) -> f64 {
        if self.primal <= 0.0 {
            0.0
        } else {
            (self.primal - self.dual) / self.primal
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Primal objective of a binary problem for weights `w` and bias `b`.
pub fn primal_objective(xs: &[&[f64]], ys: &[f64], w: &[f64], b: f64, c: f64) -> f64 {
    let hinge: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, &y)| (1.0 - y * (dot(w, x) + b)).max(0.0))
        .sum();
    0.5 * (dot(w, w) + b * b) + c * hinge
}

/// Dual coordinate descent for one binary problem; returns `(w, b, report)`.
pub fn train_binary(xs: &[&[f64]], ys: &[f64], c: f64, params: &SvmParams, seed: u64) -> (Vec<f64>, f64, BinaryReport) {
    let dim = xs.first().map_or(0, |x| x.len());
    let n = xs.len();
    let mut w = vec![0f64; dim];
    let mut b = 0f64;
    let mut alpha = vec![0f64; n];
    // diagonal of the augmented Gram matrix
    let q: Vec<f64> = xs.iter().map(|x| dot(x, x) + 1.0).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = BinaryReport {
        epochs: 0,
        primal: primal_objective(xs, ys, &w, b, c),
        dual: 0.0,
    };
    for epoch in 1..=params.max_epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let g = ys[i] * (dot(&w, xs[i]) + b) - 1.0;
            let pg = if alpha[i] <= 0.0 {
                g.min(0.0)
            } else if alpha[i] >= c {
                g.max(0.0)
            } else {
                g
            };
            if pg.abs() <= 1e-14 {
                continue;
            }
            let old = alpha[i];
            alpha[i] = (old - g / q[i]).clamp(0.0, c);
            let step = (alpha[i] - old) * ys[i];
            if step != 0.0 {
                for (wj, &xj) in w.iter_mut().zip(xs[i]) {
                    *wj += step * xj;
                }
                b += step;
            }
        }
        let primal = primal_objective(xs, ys, &w, b, c);
        let dual = alpha.iter().sum::<f64>() - 0.5 * (dot(&w, &w) + b * b);
        report = BinaryReport {
            epochs: epoch,
            primal,
            dual,
        };
        if primal - dual <= params.gap_tol * primal.abs() {
            break;
        }
    }
    (w, b, report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    dim: usize,
    c_reg: f32,
    biases: Vec<f32>,
    /// `classes × dim` row-major.
    weights: Vec<f32>,
}

pub fn train_svm(vectors: &[&[f64]], labels: &[usize], params: &SvmParams, seed: u64) -> Result<SvmModel> {
    train_svm_report(vectors, labels, params, seed).map(|(m, _)| m)
}

/// One-vs-rest training, one binary problem per class in parallel.
pub fn train_svm_report(
    vectors: &[&[f64]],
    labels: &[usize],
    params: &SvmParams,
    seed: u64,
) -> Result<(SvmModel, Vec<BinaryReport>)> {
    if vectors.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} vectors for {} labels",
            vectors.len(),
            labels.len()
        )));
    }
    let dim = vectors.first().map_or(0, |v| v.len());
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: v.len(),
        });
    }
    if vectors.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::Data("training vector contains NaN or infinite values".into()));
    }
    if !(params.c_reg > 0.0) {
        return Err(Error::Parameter(format!("C must be positive, got {}", params.c_reg)));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let present = (0..classes).filter(|c| labels.contains(c)).count();
    if present < 2 || present != classes {
        return Err(Error::Data(format!(
            "training needs at least 2 classes, each with an example (found {present} of {classes})"
        )));
    }
    let solved: Vec<(Vec<f64>, f64, BinaryReport)> = (0..classes)
        .into_par_iter()
        .map(|c| {
            let ys: Vec<f64> = labels.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
            train_binary(vectors, &ys, params.c_reg, params, seed.wrapping_add(c as u64))
        })
        .collect();
    let mut weights = Vec::with_capacity(classes * dim);
    let mut biases = Vec::with_capacity(classes);
    let mut reports = Vec::with_capacity(classes);
    for (w, b, r) in solved {
        weights.extend(w.into_iter().map(|v| v as f32));
        biases.push(b as f32);
        reports.push(r);
    }
    Ok((
        SvmModel {
            dim,
            c_reg: params.c_reg as f32,
            biases,
            weights,
        },
        reports,
    ))
}

/// Per-class decision scores of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(pub Vec<f64>);

impl ScoreVector {
    /// Argmax, ties → lowest class index.
    pub fn predicted(&self) -> usize {
        let mut best = 0;
        for (c, &s) in self.0.iter().enumerate() {
            if s > self.0[best] {
                best = c;
            }
        }
        best
    }

    pub fn distance(&self, other: &ScoreVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

impl SvmModel {
    pub fn new(dim: usize, c_reg: f32, biases: Vec<f32>, weights: Vec<f32>) -> Result<Self> {
        if biases.len() < 2 {
            return Err(Error::Data("a model needs at least 2 classes".into()));
        }
        if weights.len() != biases.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: biases.len() * dim,
                found: weights.len(),
            });
        }
        Ok(SvmModel {
            dim,
            c_reg,
            biases,
            weights,
        })
    }

    pub fn classes(&self) -> usize {
        self.biases.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn c_reg(&self) -> f32 {
        self.c_reg
    }

    pub fn bias(&self, class: usize) -> f32 {
        self.biases[class]
    }

    pub fn weights(&self, class: usize) -> &[f32] {
        &self.weights[class * self.dim..(class + 1) * self.dim]
    }

    /// Multiplies every weight and bias by `lambda`.
    pub fn scaled(&self, lambda: f32) -> SvmModel {
        SvmModel {
            dim: self.dim,
            c_reg: self.c_reg,
            biases: self.biases.iter().map(|b| b * lambda).collect(),
            weights: self.weights.iter().map(|w| w * lambda).collect(),
        }
    }

    pub fn score(&self, v: &[f64]) -> Result<ScoreVector> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: v.len(),
            });
        }
        Ok(ScoreVector(
            (0..self.classes())
                .map(|c| {
                    self.weights(c)
                        .iter()
                        .zip(v)
                        .map(|(&w, &x)| w as f64 * x)
                        .sum::<f64>()
                        + self.biases[c] as f64
                })
                .collect(),
        ))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        format::write_header(w, MODEL_MAGIC)?;
        w.write_u32::<LittleEndian>(self.classes() as u32)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_f32::<LittleEndian>(self.c_reg)?;
        for c in 0..self.classes() {
            w.write_f32::<LittleEndian>(self.biases[c])?;
            for &x in self.weights(c) {
                w.write_f32::<LittleEndian>(x)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        format::read_header(r, MODEL_MAGIC)?;
        let classes = r.read_u32::<LittleEndian>().map_err(format::truncated)? as usize;
        let dim = r.read_u32::<LittleEndian>().map_err(format::truncated)? as usize;
        let c_reg = r.read_f32::<LittleEndian>().map_err(format::truncated)?;
        let mut biases = Vec::with_capacity(classes);
        let mut weights = vec![0f32; classes * dim];
        for c in 0..classes {
            biases.push(r.read_f32::<LittleEndian>().map_err(format::truncated)?);
            r.read_f32_into::<LittleEndian>(&mut weights[c * dim..(c + 1) * dim])
                .map_err(format::truncated)?;
        }
        Self::new(dim, c_reg, biases, weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::save_with(path, |w| self.write_to(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut format::open(path)?)
    }
}

/// How database images are ordered against a query's scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingRule {
    /// Images predicted in the query's class, by score difference on that class; the rest
    /// backfilled by score-vector distance.
    #[default]
    PredictedClassScore,
    /// Every image by score difference on the query's predicted class.
    QueryClassScore,
    /// Every image by Euclidean distance between score vectors.
    ScoreSpace,
}

impl RankingRule {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "predicted_class_score" => Ok(RankingRule::PredictedClassScore),
            "query_class_score" => Ok(RankingRule::QueryClassScore),
            "score_space" => Ok(RankingRule::ScoreSpace),
            other => Err(Error::Parameter(format!("unknown ranking rule {other:?}"))),
        }
    }
}

/// Database images with their scores precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDatabase {
    pub ids: Vec<usize>,
    pub classes: Vec<usize>,
    pub scores: Vec<ScoreVector>,
    predicted: Vec<usize>,
}

impl ScoredDatabase {
    pub fn new(model: &SvmModel, items: &[(usize, &[f64], usize)]) -> Result<Self> {
        let scores = items
            .par_iter()
            .map(|(_, v, _)| model.score(v))
            .collect::<Result<Vec<_>>>()?;
        Ok(ScoredDatabase {
            ids: items.iter().map(|i| i.0).collect(),
            classes: items.iter().map(|i| i.2).collect(),
            predicted: scores.iter().map(ScoreVector::predicted).collect(),
            scores,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedEntry {
    pub id: usize,
    pub class: usize,
    pub closeness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub predicted: usize,
    pub entries: Vec<RankedEntry>,
}

fn by_keys(a: &(f64, f64, usize), b: &(f64, f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0)
        .then(a.1.total_cmp(&b.1))
        .then(a.2.cmp(&b.2))
}

/// Ranks `db` against a query's scores; the image at database position `exclude` is skipped.
pub fn retrieve_scored(
    query: &ScoreVector,
    db: &ScoredDatabase,
    k: usize,
    rule: RankingRule,
    exclude: Option<usize>,
) -> RankedResult {
    let c = query.predicted();
    let positions = (0..db.len()).filter(|&i| Some(i) != exclude);
    // (primary key, secondary key, position)
    let mut primary: Vec<(f64, f64, usize)> = Vec::new();
    let mut rest: Vec<(f64, f64, usize)> = Vec::new();
    for i in positions {
        let s = &db.scores[i];
        let full = s.distance(query);
        let on_class = (s.0[c] - query.0[c]).abs();
        match rule {
            RankingRule::PredictedClassScore if db.predicted[i] == c => primary.push((on_class, full, i)),
            RankingRule::PredictedClassScore => rest.push((full, 0.0, i)),
            RankingRule::QueryClassScore => primary.push((on_class, full, i)),
            RankingRule::ScoreSpace => primary.push((full, 0.0, i)),
        }
    }
    primary.sort_by(by_keys);
    primary.truncate(k);
    let mut entries: Vec<RankedEntry> = primary
        .iter()
        .map(|&(key, _, i)| RankedEntry {
            id: db.ids[i],
            class: db.classes[i],
            closeness: key,
        })
        .collect();
    if entries.len() < k && !rest.is_empty() {
        // backfilled closeness continues from the last in-class value
        let base = entries.last().map_or(0.0, |e| e.closeness);
        rest.sort_by(by_keys);
        entries.extend(rest.iter().take(k - entries.len()).map(|&(d, _, i)| RankedEntry {
            id: db.ids[i],
            class: db.classes[i],
            closeness: base + d,
        }));
    }
    RankedResult { predicted: c, entries }
}

/// Scores the query and database, then ranks.
pub fn retrieve(
    model: &SvmModel,
    query: &[f64],
    database: &[(usize, &[f64], usize)],
    k: usize,
    rule: RankingRule,
) -> Result<RankedResult> {
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    if database.is_empty() {
        return Err(Error::Data("retrieval database is empty".into()));
    }
    let db = ScoredDatabase::new(model, database)?;
    Ok(retrieve_scored(&model.score(query)?, &db, k, rule, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Three Gaussian clusters in `dim` dimensions around distinct corners.
    fn clusters(per_class: usize, dim: usize, spread: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for c in 0..3 {
            for _ in 0..per_class {
                let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-spread..spread)).collect();
                v[c % dim] += 1.0;
                xs.push(v);
                ys.push(c);
            }
        }
        (xs, ys)
    }

    fn refs(xs: &[Vec<f64>]) -> Vec<&[f64]> {
        xs.iter().map(Vec::as_slice).collect()
    }

    fn accuracy(model: &SvmModel, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
        let hits = xs
            .iter()
            .zip(ys)
            .filter(|(x, &y)| model.score(x).unwrap().predicted() == y)
            .count();
        hits as f64 / xs.len() as f64
    }

    /// Projected subgradient descent on the same primal; slow but independent.
    fn subgradient_oracle(xs: &[&[f64]], ys: &[f64], c: f64, iters: usize) -> f64 {
        let dim = xs[0].len();
        let (mut w, mut b) = (vec![0f64; dim], 0f64);
        let mut best = primal_objective(xs, ys, &w, b, c);
        for t in 1..=iters {
            let mut gw = w.clone();
            let mut gb = b;
            for (x, &y) in xs.iter().zip(ys) {
                if y * (dot(&w, x) + b) < 1.0 {
                    for (g, &xj) in gw.iter_mut().zip(x.iter()) {
                        *g -= c * y * xj;
                    }
                    gb -= c * y;
                }
            }
            let eta = 0.5 / (t as f64).sqrt() / (1.0 + c * xs.len() as f64);
            for (wj, g) in w.iter_mut().zip(&gw) {
                *wj -= eta * g;
            }
            b -= eta * gb;
            best = best.min(primal_objective(xs, ys, &w, b, c));
        }
        best
    }

    #[test]
    fn separable_classes_are_learned_perfectly() {
        let (xs, ys) = clusters(10, 4, 0.2, 1);
        let model = train_svm(&refs(&xs), &ys, &SvmParams::default(), 0).unwrap();
        assert_eq!(model.dim(), 4);
        assert_eq!(accuracy(&model, &xs, &ys), 1.0);
    }

    #[test]
    fn hard_margin_toy_solution() {
        let xs = [vec![1.0, 0.0], vec![-1.0, 0.0]];
        let (w, b, r) = train_binary(&refs(&xs), &[1.0, -1.0], 100.0, &SvmParams::default(), 0);
        assert!((w[0] - 1.0).abs() < 1e-9 && w[1].abs() < 1e-12 && b.abs() < 1e-12);
        assert!((r.primal - 0.5).abs() < 1e-9);
    }

    #[test]
    fn duality_gap_certifies_one_percent_and_beats_subgradient() {
        let (xs, ys) = clusters(20, 6, 0.9, 3);
        let x = refs(&xs);
        let (model, reports) = train_svm_report(&x, &ys, &SvmParams::default(), 4).unwrap();
        assert_eq!(model.classes(), 3);
        for (c, r) in reports.iter().enumerate() {
            assert!(r.relative_gap() <= 0.01, "class {c}: gap {}", r.relative_gap());
            let yb: Vec<f64> = ys.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
            let oracle = subgradient_oracle(&x, &yb, 1.0, 4000);
            assert!(r.primal <= oracle * 1.01, "dcd {} vs subgradient {oracle}", r.primal);
        }
    }

    #[test]
    fn shuffled_labels_are_near_chance_on_held_out_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (xs, _) = clusters(60, 10, 1.0, 2);
        let mut ys: Vec<usize> = (0..xs.len()).map(|i| i % 3).collect();
        ys.shuffle(&mut rng);
        let (train, test) = xs.split_at(120);
        let model = train_svm(&refs(train), &ys[..120], &SvmParams::default(), 1).unwrap();
        let acc = accuracy(&model, test, &ys[120..]);
        assert!(acc < 0.5, "held-out accuracy {acc}");
    }

    #[test]
    fn duplicating_training_points_keeps_the_boundary() {
        let (xs, ys) = clusters(8, 3, 0.1, 5);
        let params = SvmParams {
            c_reg: 1000.0,
            gap_tol: 1e-9,
            max_epochs: 100_000,
        };
        let a = train_svm(&refs(&xs), &ys, &params, 0).unwrap();
        let doubled: Vec<Vec<f64>> = xs.iter().chain(&xs).cloned().collect();
        let dys: Vec<usize> = ys.iter().chain(&ys).copied().collect();
        let b = train_svm(&refs(&doubled), &dys, &params, 0).unwrap();
        for c in 0..3 {
            assert!((a.bias(c) - b.bias(c)).abs() < 1e-3);
            for (x, y) in a.weights(c).iter().zip(b.weights(c)) {
                assert!((x - y).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn training_input_errors() {
        let xs = [vec![1.0], vec![2.0]];
        assert!(matches!(train_svm(&refs(&xs), &[0, 0], &SvmParams::default(), 0), Err(Error::Data(_))));
        assert!(train_svm(&refs(&xs), &[0, 2], &SvmParams::default(), 0).is_err());
        let nan = [vec![f64::NAN], vec![2.0]];
        assert!(train_svm(&refs(&nan), &[0, 1], &SvmParams::default(), 0).is_err());
    }

    #[test]
    fn deterministic_training() {
        let (xs, ys) = clusters(10, 5, 0.8, 9);
        let p = SvmParams::default();
        assert_eq!(train_svm(&refs(&xs), &ys, &p, 3).unwrap(), train_svm(&refs(&xs), &ys, &p, 3).unwrap());
    }

    fn toy_model() -> SvmModel {
        SvmModel::new(2, 1.0, vec![0.1, -0.2, 0.05], vec![1.0, 0.0, 0.0, 1.0, -1.0, -1.0]).unwrap()
    }

    #[test]
    fn scoring_rules() {
        let m = toy_model();
        assert_eq!(m.score(&[0.0, 0.0]).unwrap().0, vec![0.1f32 as f64, -0.2f32 as f64, 0.05f32 as f64]);
        assert_eq!(m.score(&[1.0, 0.0]).unwrap().predicted(), 0);
        assert_eq!(m.score(&[0.0, 1.0]).unwrap().predicted(), 1);
        assert_eq!(m.score(&[-1.0, -1.0]).unwrap().predicted(), 2);
        assert!(matches!(m.score(&[1.0]), Err(Error::DimensionMismatch { .. })));
        // exact tie → lowest index
        assert_eq!(ScoreVector(vec![0.5, 0.5, 0.1]).predicted(), 0);
    }

    #[test]
    fn model_file_roundtrip() {
        let m = toy_model();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 6 + 12 + 3 * 4 * 3);
        assert_eq!(SvmModel::read_from(&mut buf.as_slice()).unwrap(), m);
        assert!(SvmModel::read_from(&mut &buf[..buf.len() - 2]).is_err());
    }

    fn database(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        clusters(n, 2, 0.6, seed)
    }

    #[test]
    fn backfill_fills_k_and_keeps_monotone_closeness() {
        let m = toy_model();
        let (xs, ys) = database(4, 2);
        let items: Vec<(usize, &[f64], usize)> = xs.iter().enumerate().map(|(i, x)| (i, x.as_slice(), ys[i])).collect();
        let r = retrieve(&m, &[1.0, 0.0], &items, 10, RankingRule::default()).unwrap();
        assert_eq!(r.entries.len(), 10);
        for w in r.entries.windows(2) {
            assert!(w[0].closeness <= w[1].closeness);
        }
        let short = retrieve(&m, &[1.0, 0.0], &items, 50, RankingRule::default()).unwrap();
        assert_eq!(short.entries.len(), items.len());
    }

    #[test]
    fn separable_top_k_share_predicted_class() {
        let (xs, ys) = clusters(15, 4, 0.2, 8);
        let model = train_svm(&refs(&xs), &ys, &SvmParams::default(), 0).unwrap();
        let items: Vec<(usize, &[f64], usize)> = xs.iter().enumerate().map(|(i, x)| (i, x.as_slice(), ys[i])).collect();
        for q in [0usize, 17, 40] {
            let r = retrieve(&model, &xs[q], &items, 10, RankingRule::default()).unwrap();
            assert_eq!(r.predicted, ys[q]);
            assert!(r.entries.iter().all(|e| e.class == ys[q]));
        }
    }

    #[test]
    fn exclusion_and_rule_switch() {
        let (xs, ys) = clusters(10, 4, 0.5, 4);
        let model = train_svm(&refs(&xs), &ys, &SvmParams::default(), 0).unwrap();
        let items: Vec<(usize, &[f64], usize)> = xs.iter().enumerate().map(|(i, x)| (100 + i, x.as_slice(), ys[i])).collect();
        let db = ScoredDatabase::new(&model, &items).unwrap();
        let q = model.score(&xs[3]).unwrap();
        for rule in [RankingRule::PredictedClassScore, RankingRule::QueryClassScore, RankingRule::ScoreSpace] {
            let with = retrieve_scored(&q, &db, 5, rule, None);
            assert_eq!(with.entries[0].id, 103);
            assert_eq!(with.entries[0].closeness, 0.0);
            let without = retrieve_scored(&q, &db, 5, rule, Some(3));
            assert!(without.entries.iter().all(|e| e.id != 103));
            assert_eq!(without.entries.len(), 5);
        }
        assert_eq!(RankingRule::parse("score-space").unwrap(), RankingRule::ScoreSpace);
        assert!(RankingRule::parse("nearest").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn self_retrieval_and_scaling_invariance(seed in 0u64..10_000, lambda in 0.1f32..10.0) {
            let (xs, ys) = database(6, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f32> = (0..6).map(|_| rng.random_range(-2.0f32..2.0)).collect();
            let b: Vec<f32> = (0..3).map(|_| rng.random_range(-0.5f32..0.5)).collect();
            let m = SvmModel::new(2, 1.0, b, w).unwrap();
            let items: Vec<(usize, &[f64], usize)> = xs.iter().enumerate().map(|(i, x)| (i, x.as_slice(), ys[i])).collect();
            let q = rng.random_range(0..xs.len());
            let r = retrieve(&m, &xs[q], &items, 8, RankingRule::default()).unwrap();
            prop_assert_eq!(r.entries[0].id, q);
            prop_assert_eq!(r.entries[0].closeness, 0.0);
            for pair in r.entries.windows(2) {
                prop_assert!(pair[0].closeness <= pair[1].closeness);
            }
            // a power-of-two factor keeps every product exact
            let scale = 2f32.powi(lambda.log2().round() as i32);
            let s = retrieve(&m.scaled(scale), &xs[q], &items, 8, RankingRule::default()).unwrap();
            prop_assert_eq!(s.predicted, r.predicted);
            let ids = |r: &RankedResult| r.entries.iter().map(|e| e.id).collect::<Vec<_>>();
            prop_assert_eq!(ids(&s), ids(&r));
            // linearity of scores
            let v = [0.3, -0.7];
            let (s1, s2) = (m.score(&v).unwrap(), m.score(&[0.6, -1.4]).unwrap());
            for c in 0..3 {
                let bias = m.bias(c) as f64;
                prop_assert!(((s2.0[c] - bias) - 2.0 * (s1.0[c] - bias)).abs() < 1e-9);
            }
        }
    }
}
