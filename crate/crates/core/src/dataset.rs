//! Class-labeled image collections, stratified splits, and per-image feature sampling.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::ImageReader;
use log::warn;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::descriptor::DescriptorSet;
use crate::error::{Error, Result};

const MANIFEST_TAG: &str = "#fcbir-manifest v1";
const SPLIT_TAG: &str = "#fcbir-split v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    /// Path relative to the manifest root.
    pub path: PathBuf,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub entries: Vec<Entry>,
}

impl DatasetManifest {
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for e in &self.entries {
            counts[e.class] += 1;
        }
        counts
    }

    pub fn absolute_path(&self, entry: usize) -> PathBuf {
        self.root.join(&self.entries[entry].path)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.class).collect()
    }

    /// `class_index<TAB>class_name<TAB>relative_path` lines after a tagged header.
    pub fn to_text(&self) -> String {
        let mut out = format!("{MANIFEST_TAG}\n#root\t{}\n", self.root.display());
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{}\t{}\t{}",
                e.class,
                self.classes[e.class],
                e.path.display()
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_TAG) {
            return Err(Error::Format("missing manifest header".into()));
        }
        let root = lines
            .next()
            .and_then(|l| l.strip_prefix("#root\t"))
            .ok_or_else(|| Error::Format("missing manifest root line".into()))?;
        let mut classes: Vec<String> = Vec::new();
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = || Error::Format(format!("manifest line {}: {line:?}", n + 3));
            let mut parts = line.splitn(3, '\t');
            let (Some(idx), Some(name), Some(path)) = (parts.next(), parts.next(), parts.next())
            else {
                return Err(bad());
            };
            let class: usize = idx.parse().map_err(|_| bad())?;
            match class.cmp(&classes.len()) {
                std::cmp::Ordering::Less if classes[class] == name => {}
                std::cmp::Ordering::Equal => classes.push(name.to_string()),
                _ => return Err(bad()),
            }
            entries.push(Entry {
                path: PathBuf::from(path),
                class,
            });
        }
        Ok(DatasetManifest {
            root: PathBuf::from(root),
            classes,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&read_text(path)?)
    }
}

/// Scans `<root>/<class_name>/<image file>`.
///
/// Classes come out in lexicographic order and files are sorted by name within a class.
/// Files whose header cannot be read as an image are skipped with a warning; classes left with
/// fewer than two images are dropped with a warning.
pub fn scan_dataset(root: &Path) -> Result<DatasetManifest> {
    let mut class_dirs: Vec<(String, PathBuf)> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_dir()).unwrap_or(false))
        .filter_map(|e| {
            let name = e.file_name().to_str()?.to_string();
            (!name.starts_with('.')).then(|| (name, e.path()))
        })
        .collect();
    class_dirs.sort();

    let mut classes = Vec::new();
    let mut entries = Vec::new();
    for (name, dir) in class_dirs {
        let mut files: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
            .filter_map(|e| e.file_name().to_str().map(str::to_string))
            .filter(|f| !f.starts_with('.'))
            .collect();
        files.sort();
        let readable: Vec<String> = files
            .into_iter()
            .filter(|f| {
                let p = dir.join(f);
                match ImageReader::open(&p).and_then(|r| r.with_guessed_format()) {
                    Ok(r) => match r.into_dimensions() {
                        Ok(_) => true,
                        Err(e) => {
                            warn!("skipping unreadable image {}: {e}", p.display());
                            false
                        }
                    },
                    Err(e) => {
                        warn!("skipping unreadable file {}: {e}", p.display());
                        false
                    }
                }
            })
            .collect();
        if readable.len() < 2 {
            warn!(
                "class {name:?} has {} readable image(s); excluded (need at least 2)",
                readable.len()
            );
            continue;
        }
        let class = classes.len();
        classes.push(name.clone());
        entries.extend(readable.into_iter().map(|f| Entry {
            path: PathBuf::from(&name).join(f),
            class,
        }));
    }
    if classes.is_empty() {
        return Err(Error::NoClasses(root.to_path_buf()));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        classes,
        entries,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub seed: u64,
    pub fraction: f64,
    /// Entry indices, ascending.
    pub train: Vec<usize>,
    /// Entry indices, ascending.
    pub test: Vec<usize>,
}

/// Round-half-up of `fraction * n`, kept inside `[1, n - 1]` so both sides are nonempty.
pub fn train_count(n: usize, fraction: f64) -> usize {
    let raw = (fraction * n as f64 + 0.5 + 1e-9).floor() as usize;
    raw.clamp(1, n.saturating_sub(1).max(1))
}

/// Per-class stratified random split; deterministic in `(manifest, fraction, seed)`.
pub fn make_split(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<SplitPlan> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Parameter(format!(
            "train fraction {fraction} outside (0, 1)"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); manifest.classes.len()];
    for (i, e) in manifest.entries.iter().enumerate() {
        by_class[e.class].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, mut members) in by_class.into_iter().enumerate() {
        if members.len() < 2 {
            return Err(Error::Data(format!(
                "class {:?} has {} image(s); at least 2 are required",
                manifest.classes[c],
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let n_train = train_count(members.len(), fraction);
        train.extend_from_slice(&members[..n_train]);
        test.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitPlan {
        seed,
        fraction,
        train,
        test,
    })
}

impl SplitPlan {
    pub fn to_text(&self) -> String {
        let mut out = format!("{SPLIT_TAG}\nseed={} fraction={}\n", self.seed, self.fraction);
        for &i in &self.train {
            let _ = writeln!(out, "train\t{i}");
        }
        for &i in &self.test {
            let _ = writeln!(out, "test\t{i}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(SPLIT_TAG) {
            return Err(Error::Format("missing split header".into()));
        }
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("missing seed/fraction line".into()))?;
        let mut seed = None;
        let mut fraction = None;
        for kv in header.split_whitespace() {
            match kv.split_once('=') {
                Some(("seed", v)) => seed = v.parse().ok(),
                Some(("fraction", v)) => fraction = v.parse().ok(),
                _ => {}
            }
        }
        let (Some(seed), Some(fraction)) = (seed, fraction) else {
            return Err(Error::Format(format!("bad split header {header:?}")));
        };
        let mut plan = SplitPlan {
            seed,
            fraction,
            train: Vec::new(),
            test: Vec::new(),
        };
        for line in lines.filter(|l| !l.is_empty()) {
            let bad = || Error::Format(format!("bad split line {line:?}"));
            let (side, idx) = line.split_once('\t').ok_or_else(bad)?;
            let idx: usize = idx.parse().map_err(|_| bad())?;
            match side {
                "train" => plan.train.push(idx),
                "test" => plan.test.push(idx),
                _ => return Err(bad()),
            }
        }
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&read_text(path)?)
    }
}

/// Uniform sample without replacement of `ceil(fraction × count)` descriptors, original order kept.
pub fn sample_features(set: &DescriptorSet, fraction: f64, seed: u64) -> Result<DescriptorSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Parameter(format!(
            "feature fraction {fraction} outside (0, 1]"
        )));
    }
    let n = set.len();
    let keep = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let keep = keep.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, n, keep).into_vec();
    picked.sort_unstable();
    Ok(set.select(&picked))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
