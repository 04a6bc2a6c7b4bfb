//! Repeated stratified-split experiments over a codebook-size × feature-fraction grid, with
//! precision/recall at top-k per class.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::{train_codebook, Codebook, KMeansParams};
use crate::dataset::{make_split, sample_features, DatasetManifest};
use crate::descriptor::{DescriptorKind, DescriptorSet};
use crate::encoder::{encode, fuse, ChannelMode, FusedVector, WordHistogram};
use crate::error::{Error, Result};
use crate::features::{Extractor, ImageFeatures};
use crate::image::load_image;
use crate::retrieval::{retrieve_scored, train_svm, RankedResult, RankingRule, ScoredDatabase, SvmParams};

/// `K_r`: how many of the top `k` entries belong to `class`.
pub fn correct_in_top_k(ranked: &RankedResult, class: usize, k: usize) -> usize {
    ranked.entries.iter().take(k).filter(|e| e.class == class).count()
}

/// `K_r / k`; the ranked list must hold at least `k` entries.
pub fn precision_at_k(ranked: &RankedResult, class: usize, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    if ranked.entries.len() < k {
        return Err(Error::Data(format!(
            "database too small: {} results for top-{k}",
            ranked.entries.len()
        )));
    }
    Ok(correct_in_top_k(ranked, class, k) as f64 / k as f64)
}

/// `K_r / X_c` with `X_c = class_size`.
pub fn recall_at_k(ranked: &RankedResult, class: usize, k: usize, class_size: usize) -> Result<f64> {
    if class_size == 0 {
        return Err(Error::Parameter("class size must be at least 1".into()));
    }
    Ok(correct_in_top_k(ranked, class, k) as f64 / class_size as f64)
}

/// Which images a query is ranked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryDatabase {
    /// The test split, query excluded.
    #[default]
    Test,
    /// Every image of the dataset, query excluded.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub codebook_sizes: Vec<usize>,
    pub feature_fractions: Vec<f64>,
    pub runs: usize,
    pub top_k: usize,
    pub modes: Vec<ChannelMode>,
    pub base_seed: u64,
    pub train_fraction: f64,
    pub database: QueryDatabase,
    pub ranking: RankingRule,
    pub kmeans: KMeansParams,
    pub svm: SvmParams,
    /// Queries per class shown in the HTML gallery.
    pub gallery_queries_per_class: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            codebook_sizes: vec![50, 100, 200, 300, 400, 600, 800],
            feature_fractions: vec![0.25, 0.5, 0.75],
            runs: 10,
            top_k: 20,
            modes: ChannelMode::ALL.to_vec(),
            base_seed: 0,
            train_fraction: 0.7,
            database: QueryDatabase::Test,
            ranking: RankingRule::PredictedClassScore,
            kmeans: KMeansParams::default(),
            svm: SvmParams::default(),
            gallery_queries_per_class: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.runs == 0 {
            return bad("runs must be at least 1".into());
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        if self.codebook_sizes.is_empty() || self.codebook_sizes.iter().any(|&z| z < 2) {
            return bad(format!("codebook sizes must be non-empty and ≥ 2: {:?}", self.codebook_sizes));
        }
        if self.feature_fractions.is_empty() || self.feature_fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return bad(format!("feature fractions must lie in (0, 1]: {:?}", self.feature_fractions));
        }
        if self.modes.is_empty() {
            return bad("at least one channel mode is required".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train fraction must lie in (0, 1), got {}", self.train_fraction));
        }
        Ok(())
    }

    fn needs(&self, kind: DescriptorKind) -> bool {
        self.modes.iter().any(|m| match m {
            ChannelMode::Fused => true,
            ChannelMode::SiftOnly => kind == DescriptorKind::Sift,
            ChannelMode::FreakOnly => kind == DescriptorKind::Freak,
        })
    }
}

/// Deterministic seed derivation from a list of integers (splitmix64 chaining).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut z: u64 = 0x6A09_E667_F3BC_C909;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const SALT_SAMPLE: u64 = 1;
const SALT_CODEBOOK: u64 = 2;
const SALT_SVM: u64 = 3;

/// Grid cell: indices into the config's size and fraction lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub mode: ChannelMode,
    pub size: usize,
    pub fraction: usize,
    pub run: usize,
}

/// Tallies for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    /// Manifest index of the query image.
    pub query: usize,
    pub class: usize,
    pub predicted: usize,
    /// `K_r`.
    pub correct: usize,
    /// `X_r`.
    pub retrieved: usize,
    /// `X_c` within the retrieval database.
    pub class_size_db: usize,
    /// `X_c` over the whole dataset.
    pub class_size_full: usize,
    /// Manifest indices of the ranked results with their closeness values.
    pub results: Vec<(usize, f64)>,
}

impl QueryRecord {
    pub fn precision(&self) -> f64 {
        self.correct as f64 / self.retrieved as f64
    }

    pub fn recall_db(&self) -> f64 {
        self.correct as f64 / self.class_size_db as f64
    }

    pub fn recall_full(&self) -> f64 {
        self.correct as f64 / self.class_size_full as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall_db: f64,
    pub recall_full: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub class_names: Vec<String>,
    /// Absolute image paths, by manifest index.
    pub images: Vec<PathBuf>,
    /// True class of every image, by manifest index.
    pub labels: Vec<usize>,
    pub cells: BTreeMap<Cell, Vec<QueryRecord>>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl EvalReport {
    fn cell(&self, cell: Cell) -> &[QueryRecord] {
        self.cells.get(&cell).map_or(&[], Vec::as_slice)
    }

    /// Per-class means over the queries of one run.
    pub fn class_metrics(&self, cell: Cell) -> Vec<ClassMetrics> {
        let queries = self.cell(cell);
        (0..self.class_names.len())
            .map(|c| {
                let of_class: Vec<&QueryRecord> = queries.iter().filter(|q| q.class == c).collect();
                ClassMetrics {
                    precision: mean(of_class.iter().map(|q| q.precision())),
                    recall_db: mean(of_class.iter().map(|q| q.recall_db())),
                    recall_full: mean(of_class.iter().map(|q| q.recall_full())),
                }
            })
            .collect()
    }

    /// Mean of per-class precisions for one run.
    pub fn run_map(&self, cell: Cell) -> f64 {
        mean(self.class_metrics(cell).iter().map(|m| m.precision))
    }

    /// Per-class metrics averaged over runs.
    pub fn averaged_class_metrics(&self, mode: ChannelMode, size: usize, fraction: usize) -> Vec<ClassMetrics> {
        let runs = self.config.runs;
        let mut acc = vec![ClassMetrics::default(); self.class_names.len()];
        for run in 0..runs {
            for (a, m) in acc.iter_mut().zip(self.class_metrics(Cell { mode, size, fraction, run })) {
                a.precision += m.precision / runs as f64;
                a.recall_db += m.recall_db / runs as f64;
                a.recall_full += m.recall_full / runs as f64;
            }
        }
        acc
    }

    /// Mean average precision for a grid point, averaged over runs.
    pub fn map(&self, mode: ChannelMode, size: usize, fraction: usize) -> f64 {
        mean(self.averaged_class_metrics(mode, size, fraction).iter().map(|m| m.precision))
    }

    /// Grid point with the highest MAP (first in size-then-fraction order on ties).
    pub fn best(&self, mode: ChannelMode) -> (usize, usize, f64) {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for s in 0..self.config.codebook_sizes.len() {
            for f in 0..self.config.feature_fractions.len() {
                let m = self.map(mode, s, f);
                if m > best.2 {
                    best = (s, f, m);
                }
            }
        }
        best
    }

    pub fn modes(&self) -> Vec<ChannelMode> {
        let mut m = self.config.modes.clone();
        m.sort();
        m.dedup();
        m
    }
}

/// Decodes and extracts every manifest image once.
pub fn extract_all(manifest: &DatasetManifest, extractor: &Extractor) -> Result<Vec<ImageFeatures>> {
    (0..manifest.entries.len())
        .into_par_iter()
        .map(|i| extractor.extract(&load_image(&manifest.absolute_path(i))?))
        .collect()
}

struct FnvWriter(u64);

impl std::io::Write for FnvWriter {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        for &b in buf {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01B3);
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

impl Hasher for FnvWriter {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        let _ = std::io::Write::write(self, bytes);
    }
}

/// Hash of everything a checkpoint depends on.
fn fingerprint(manifest: &DatasetManifest, features: &[ImageFeatures], config: &EvalConfig) -> Result<u64> {
    let mut h = FnvWriter(0xCBF2_9CE4_8422_2325);
    Hasher::write(&mut h, manifest.to_text().as_bytes());
    Hasher::write(&mut h, format!("{config:?}").as_bytes());
    for f in features {
        for set in [&f.sift, &f.freak] {
            set.write_to(&mut h).map_err(|e| Error::Data(e.to_string()))?;
        }
    }
    Ok(h.finish())
}

fn checkpoint_path(dir: &Path, size: usize, fraction: f64, run: usize) -> PathBuf {
    dir.join(format!("z{size}_f{fraction}_r{run}.tsv"))
}

const CHECKPOINT_HEADER: &str = "#fcbir-checkpoint v1";

fn write_checkpoint(path: &Path, fp: u64, cells: &[(Cell, Vec<QueryRecord>)]) -> Result<()> {
    let mut out = format!("{CHECKPOINT_HEADER}\n#fingerprint\t{fp:016x}\n");
    for (cell, queries) in cells {
        for q in queries {
            let _ = write!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                cell.mode, q.query, q.class, q.predicted, q.correct, q.retrieved, q.class_size_db, q.class_size_full
            );
            for (id, c) in &q.results {
                let _ = write!(out, "\t{id}:{c}");
            }
            out.push('\n');
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, out).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Query records per mode, or `None` if the file is missing, stale or unreadable.
fn read_checkpoint(path: &Path, fp: u64) -> Option<BTreeMap<ChannelMode, Vec<QueryRecord>>> {
    let text = std::fs::read_to_string(path).ok()?;
    let mut lines = text.lines();
    if lines.next()? != CHECKPOINT_HEADER {
        return None;
    }
    if lines.next()? != format!("#fingerprint\t{fp:016x}") {
        return None;
    }
    let mut out: BTreeMap<ChannelMode, Vec<QueryRecord>> = BTreeMap::new();
    for line in lines {
        let mut f = line.split('\t');
        let mode = ChannelMode::parse(f.next()?).ok()?;
        let mut num = || f.next()?.parse::<usize>().ok();
        let (query, class, predicted, correct, retrieved, db, full) =
            (num()?, num()?, num()?, num()?, num()?, num()?, num()?);
        let results = f
            .map(|r| {
                let (id, c) = r.split_once(':')?;
                Some((id.parse().ok()?, c.parse().ok()?))
            })
            .collect::<Option<Vec<(usize, f64)>>>()?;
        out.entry(mode).or_default().push(QueryRecord {
            query,
            class,
            predicted,
            correct,
            retrieved,
            class_size_db: db,
            class_size_full: full,
            results,
        });
    }
    Some(out)
}

fn pooled_sample(
    features: &[ImageFeatures],
    train: &[usize],
    kind: DescriptorKind,
    fraction: f64,
    seed: u64,
) -> Result<DescriptorSet> {
    let parts: Vec<DescriptorSet> = train
        .par_iter()
        .map(|&i| {
            let set = features[i].channel(kind);
            if fraction >= 1.0 {
                Ok(set.clone())
            } else {
                sample_features(set, fraction, derive_seed(&[seed, i as u64]))
            }
        })
        .collect::<Result<_>>()?;
    let mut pooled = DescriptorSet::empty(kind);
    for p in &parts {
        pooled.extend(p)?;
    }
    Ok(pooled)
}

/// Runs the full protocol on pre-extracted features (one entry per manifest image).
///
/// With `checkpoint_dir`, each completed (size, fraction, run) is written there and reused
/// on later calls with identical inputs.
pub fn run_experiment(
    manifest: &DatasetManifest,
    features: &[ImageFeatures],
    config: &EvalConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<EvalReport> {
    config.validate()?;
    if features.len() != manifest.entries.len() {
        return Err(Error::Data(format!(
            "{} feature sets for {} manifest entries",
            features.len(),
            manifest.entries.len()
        )));
    }
    let labels = manifest.labels();
    let class_counts = manifest.class_counts();
    let fp = match checkpoint_dir {
        Some(_) => fingerprint(manifest, features, config)?,
        None => 0,
    };
    let mut cells = BTreeMap::new();

    for run in 0..config.runs {
        let split_seed = config.base_seed.wrapping_add(run as u64);
        let split = make_split(manifest, config.train_fraction, split_seed)?;
        let database: Vec<usize> = match config.database {
            QueryDatabase::Test => split.test.clone(),
            QueryDatabase::Full => (0..manifest.entries.len()).collect(),
        };
        let mut db_counts = vec![0usize; class_counts.len()];
        for &i in &database {
            db_counts[labels[i]] += 1;
        }
        if database.len() <= config.top_k {
            return Err(Error::Data(format!(
                "retrieval database of {} images is too small for top-{} (query excluded)",
                database.len(),
                config.top_k
            )));
        }
        if let Some(c) = db_counts.iter().position(|&n| n < 2) {
            return Err(Error::Data(format!(
                "class {:?} has fewer than 2 images in the retrieval database",
                manifest.classes[c]
            )));
        }

        for (fi, &fraction) in config.feature_fractions.iter().enumerate() {
            let sample_seed = derive_seed(&[split_seed, SALT_SAMPLE, fi as u64]);
            let mut pools: BTreeMap<DescriptorKind, DescriptorSet> = BTreeMap::new();
            for (si, &size) in config.codebook_sizes.iter().enumerate() {
                let ckpt = checkpoint_dir.map(|d| checkpoint_path(d, size, fraction, run));
                if let Some(saved) = ckpt.as_deref().and_then(|p| read_checkpoint(p, fp)) {
                    if config.modes.iter().all(|m| saved.contains_key(m)) {
                        info!("run {run} Z={size} fraction={fraction}: reusing checkpoint");
                        for (mode, queries) in saved {
                            cells.insert(Cell { mode, size: si, fraction: fi, run }, queries);
                        }
                        continue;
                    }
                }
                info!("run {run} Z={size} fraction={fraction}");
                let mut codebooks: BTreeMap<DescriptorKind, Codebook> = BTreeMap::new();
                for kind in [DescriptorKind::Freak, DescriptorKind::Sift] {
                    if !config.needs(kind) {
                        continue;
                    }
                    if !pools.contains_key(&kind) {
                        let pool = pooled_sample(features, &split.train, kind, fraction, sample_seed ^ kind.tag() as u64)?;
                        pools.insert(kind, pool);
                    }
                    let seed = derive_seed(&[split_seed, SALT_CODEBOOK, si as u64, fi as u64, kind.tag() as u64]);
                    codebooks.insert(kind, train_codebook(&pools[&kind], size, seed, &config.kmeans)?);
                }
                let vectors = encode_all(features, &codebooks, size)?;
                let mut done = Vec::new();
                for &mode in &config.modes {
                    let svm_seed = derive_seed(&[split_seed, SALT_SVM, si as u64, fi as u64, mode as u64]);
                    let queries = evaluate_mode(
                        &vectors, &labels, &class_counts, &db_counts, &split.train, &split.test, &database, mode,
                        config, svm_seed,
                    )?;
                    done.push((Cell { mode, size: si, fraction: fi, run }, queries));
                }
                if let Some(p) = &ckpt {
                    write_checkpoint(p, fp, &done)?;
                }
                cells.extend(done);
            }
        }
    }
    Ok(EvalReport {
        config: config.clone(),
        class_names: manifest.classes.clone(),
        images: (0..manifest.entries.len()).map(|i| manifest.absolute_path(i)).collect(),
        labels,
        cells,
    })
}

/// Fused vectors for every image; a channel without a codebook encodes as zeros.
fn encode_all(
    features: &[ImageFeatures],
    codebooks: &BTreeMap<DescriptorKind, Codebook>,
    size: usize,
) -> Result<Vec<FusedVector>> {
    let histogram = |f: &ImageFeatures, kind: DescriptorKind| match codebooks.get(&kind) {
        Some(cb) => encode(cb, f.channel(kind)),
        None => Ok(WordHistogram::zeros(size)),
    };
    features
        .par_iter()
        .map(|f| fuse(&histogram(f, DescriptorKind::Freak)?, &histogram(f, DescriptorKind::Sift)?))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn evaluate_mode(
    vectors: &[FusedVector],
    labels: &[usize],
    class_counts: &[usize],
    db_counts: &[usize],
    train: &[usize],
    test: &[usize],
    database: &[usize],
    mode: ChannelMode,
    config: &EvalConfig,
    seed: u64,
) -> Result<Vec<QueryRecord>> {
    let xs: Vec<&[f64]> = train.iter().map(|&i| vectors[i].view(mode)).collect();
    let ys: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let model = train_svm(&xs, &ys, &config.svm, seed)?;
    let items: Vec<(usize, &[f64], usize)> = database
        .iter()
        .map(|&i| (i, vectors[i].view(mode), labels[i]))
        .collect();
    let db = ScoredDatabase::new(&model, &items)?;
    let k = config.top_k;
    test.par_iter()
        .map(|&q| {
            let scores = model.score(vectors[q].view(mode))?;
            let exclude = database.iter().position(|&i| i == q);
            let ranked = retrieve_scored(&scores, &db, k, config.ranking, exclude);
            let class = labels[q];
            let correct = correct_in_top_k(&ranked, class, k);
            precision_at_k(&ranked, class, k)?;
            Ok(QueryRecord {
                query: q,
                class,
                predicted: ranked.predicted,
                correct,
                retrieved: k,
                class_size_db: db_counts[class] - usize::from(exclude.is_some()),
                class_size_full: class_counts[class],
                results: ranked.entries.iter().map(|e| (e.id, e.closeness)).collect(),
            })
        })
        .collect()
}
