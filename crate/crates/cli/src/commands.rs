//! Pipeline stages. Each reads verified upstream artifacts and writes its own with a
//! provenance sidecar; a stage whose recorded inputs and parameters already match is skipped.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use fcbir_core::codebook::{train_codebook, Codebook};
use fcbir_core::dataset::{make_split, sample_features, scan_dataset, DatasetManifest, SplitPlan};
use fcbir_core::descriptor::{DescriptorKind, DescriptorSet};
use fcbir_core::encoder::{encode_features, ChannelMode, EncodedCorpus, FusedVector};
use fcbir_core::evaluation::{derive_seed, run_experiment};
use fcbir_core::features::{Channels, Extractor, ImageFeatures};
use fcbir_core::freak::{self, PairSelection};
use fcbir_core::image::load_image;
use fcbir_core::report::{emit_reports, relative_path};
use fcbir_core::retrieval::{retrieve, train_svm, RankedResult, SvmModel};
use fcbir_core::synth;
use log::info;
use rayon::prelude::*;

use crate::config::Settings;
use crate::error::CliError;
use crate::workspace::{ensure_parent, hash_bytes, hash_file, sidecar_path, Provenance, Workspace};

const INDEX_TAG: &str = "#fcbir-descriptors v1";
const SALT_SAMPLE: u64 = 11;
const SALT_CODEBOOK: u64 = 12;
const SALT_SVM: u64 = 13;

const CHANNELS: [(DescriptorKind, &str); 2] = [(DescriptorKind::Sift, "sift"), (DescriptorKind::Freak, "freak")];

fn load_manifest(ws: &Workspace) -> anyhow::Result<DatasetManifest> {
    ws.verify(&ws.manifest())?;
    Ok(DatasetManifest::load(&ws.manifest())?)
}

fn load_split(ws: &Workspace) -> anyhow::Result<SplitPlan> {
    ws.verify(&ws.split())?;
    Ok(SplitPlan::load(&ws.split())?)
}

pub fn scan(ws: &Workspace, dataset: &Path, settings: &Settings) -> anyhow::Result<()> {
    let root = dataset
        .canonicalize()
        .map_err(|e| CliError::new("io", format!("dataset root {}: {e}", dataset.display())))?;
    let manifest = scan_dataset(&root)?;
    ensure_parent(&ws.manifest())?;
    manifest.save(&ws.manifest())?;
    Provenance::new()
        .param("dataset", root.display())
        .record(&ws.manifest())?;

    let split = make_split(&manifest, settings.train_fraction, settings.seed)?;
    ensure_parent(&ws.split())?;
    split.save(&ws.split())?;
    Provenance::new()
        .input(ws, &ws.manifest())?
        .param("train_fraction", settings.train_fraction)
        .param("seed", settings.seed)
        .record(&ws.split())?;

    let counts = manifest.class_counts();
    println!(
        "{} images in {} classes; {} train / {} test",
        manifest.entries.len(),
        manifest.classes.len(),
        split.train.len(),
        split.test.len()
    );
    for (name, n) in manifest.classes.iter().zip(counts) {
        println!("  {name}\t{n}");
    }
    Ok(())
}

/// The extractor for this workspace: trained pairs when present, the shipped ones otherwise.
fn extractor(ws: &Workspace, settings: &Settings) -> anyhow::Result<(Extractor, Option<PathBuf>)> {
    let pairs_path = ws.freak_pairs();
    if pairs_path.exists() {
        ws.verify(&pairs_path)?;
        let pairs = PairSelection::load(&pairs_path)?;
        Ok((Extractor::new(settings.extraction, pairs), Some(pairs_path)))
    } else {
        Ok((Extractor::new(settings.extraction, PairSelection::shipped().clone()), None))
    }
}

fn extraction_provenance(ws: &Workspace, settings: &Settings, pairs: Option<&Path>) -> anyhow::Result<Provenance> {
    let mut prov = Provenance::new().input(ws, &ws.manifest())?;
    if let Some(p) = pairs {
        prov = prov.input(ws, p)?;
    }
    Ok(prov.param("extraction", format!("{:?}", settings.extraction)))
}

pub fn extract(ws: &Workspace, channels: Channels, settings: &Settings) -> anyhow::Result<()> {
    let manifest = load_manifest(ws)?;
    let (extractor, pairs) = extractor(ws, settings)?;
    let mut prov = extraction_provenance(ws, settings, pairs.as_deref())?
        .param("channels", format!("sift={} freak={}", channels.sift, channels.freak));
    let images: Vec<PathBuf> = (0..manifest.entries.len()).map(|i| manifest.absolute_path(i)).collect();
    for img in &images {
        prov = prov.input(ws, img)?;
    }
    let index_path = ws.descriptor_index();
    if prov.is_current(&index_path) {
        println!("descriptors are up to date");
        return Ok(());
    }
    fs::create_dir_all(ws.descriptors_dir())?;

    let rows: Vec<String> = images
        .par_iter()
        .enumerate()
        .map(|(i, path)| -> anyhow::Result<String> {
            let features = extractor.extract_channels(&load_image(path)?, channels)?;
            let mut row = format!("{i}\t{}", features.detected);
            for (kind, name) in CHANNELS {
                let wanted = match kind {
                    DescriptorKind::Sift => channels.sift,
                    DescriptorKind::Freak => channels.freak,
                };
                let file = ws.descriptor_file(i, name);
                if wanted {
                    let set = features.channel(kind);
                    let mut bytes = Vec::new();
                    set.write_to(&mut bytes)?;
                    fs::write(&file, &bytes).with_context(|| format!("writing {}", file.display()))?;
                    let _ = write!(row, "\t{}\t{}", set.len(), hash_bytes(&bytes));
                } else {
                    let _ = fs::remove_file(&file);
                    row.push_str("\t-\t-");
                }
            }
            info!("{}: {}", path.display(), row);
            Ok(row)
        })
        .collect::<anyhow::Result<_>>()?;

    let mut index = format!("{INDEX_TAG}\n#entry\tdetected\tsift_count\tsift_sha256\tfreak_count\tfreak_sha256\n");
    for r in rows {
        index.push_str(&r);
        index.push('\n');
    }
    fs::write(&index_path, index)?;
    prov.record(&index_path)?;
    println!("extracted descriptors for {} images", images.len());
    Ok(())
}

/// Loads every image's descriptors, checking each file against the extraction index.
fn load_features(ws: &Workspace, manifest: &DatasetManifest, need: Channels) -> anyhow::Result<Vec<ImageFeatures>> {
    let index_path = ws.descriptor_index();
    ws.verify(&index_path)?;
    let text = fs::read_to_string(&index_path)?;
    let rows: Vec<Vec<&str>> = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| l.split('\t').collect())
        .collect();
    if rows.len() != manifest.entries.len() || rows.iter().any(|r| r.len() != 6) {
        return Err(CliError::stale("descriptor index does not match the manifest; rerun `fcbir extract`").into());
    }
    rows.par_iter()
        .enumerate()
        .map(|(i, row)| {
            let detected: usize = row[1].parse().map_err(|_| CliError::stale("malformed descriptor index"))?;
            let mut sets = Vec::new();
            for (c, (kind, name)) in CHANNELS.iter().enumerate() {
                let wanted = match kind {
                    DescriptorKind::Sift => need.sift,
                    DescriptorKind::Freak => need.freak,
                };
                let recorded = row[3 + 2 * c];
                if !wanted {
                    sets.push(DescriptorSet::empty(*kind));
                    continue;
                }
                if recorded == "-" {
                    return Err(CliError::missing(format!(
                        "{name} descriptors were not extracted; run `fcbir extract --channel both` first"
                    ))
                    .into());
                }
                let file = ws.descriptor_file(i, name);
                let bytes = fs::read(&file).map_err(|_| {
                    CliError::missing(format!("{} not found; run `fcbir extract` first", ws.rel(&file)))
                })?;
                if hash_bytes(&bytes) != recorded {
                    return Err(CliError::stale(format!(
                        "{} changed since extraction; rerun `fcbir extract`",
                        ws.rel(&file)
                    ))
                    .into());
                }
                sets.push(DescriptorSet::read_from(&mut bytes.as_slice())?);
            }
            let freak = sets.pop().expect("two channels");
            let sift = sets.pop().expect("two channels");
            Ok(ImageFeatures { detected, sift, freak })
        })
        .collect()
}

pub fn codebook(ws: &Workspace, settings: &Settings) -> anyhow::Result<()> {
    let manifest = load_manifest(ws)?;
    let split = load_split(ws)?;
    ws.verify(&ws.descriptor_index())?;
    let z = settings.codebook_size;
    let fraction = settings.feature_fraction;
    let prov = Provenance::new()
        .input(ws, &ws.split())?
        .input(ws, &ws.descriptor_index())?
        .param("size", z)
        .param("feature_fraction", fraction)
        .param("seed", settings.seed)
        .param("kmeans", format!("{:?}", settings.kmeans));
    let targets: Vec<PathBuf> = CHANNELS.iter().map(|(_, n)| ws.codebook(n)).collect();
    if targets.iter().all(|t| prov.is_current(t)) {
        println!("codebooks are up to date");
        return Ok(());
    }
    let features = load_features(ws, &manifest, Channels::BOTH)?;
    for ((kind, name), target) in CHANNELS.iter().zip(&targets) {
        let mut pool = DescriptorSet::empty(*kind);
        for &i in &split.train {
            let seed = derive_seed(&[settings.seed, SALT_SAMPLE, i as u64]);
            pool.extend(&sample_features(features[i].channel(*kind), fraction, seed)?)?;
        }
        info!("{name}: clustering {} descriptors into {z} words", pool.len());
        let seed = derive_seed(&[settings.seed, SALT_CODEBOOK, *kind as u64]);
        let cb = train_codebook(&pool, z, seed, &settings.kmeans)?;
        ensure_parent(target)?;
        cb.save(target)?;
        prov.record(target)?;
        println!("{name} codebook: {z} words from {} descriptors", pool.len());
    }
    Ok(())
}

fn load_codebooks(ws: &Workspace) -> anyhow::Result<(Codebook, Codebook)> {
    let mut books = Vec::new();
    for (_, name) in CHANNELS {
        let path = ws.codebook(name);
        ws.verify(&path)?;
        books.push(Codebook::load(&path)?);
    }
    let freak = books.pop().expect("two codebooks");
    let sift = books.pop().expect("two codebooks");
    Ok((sift, freak))
}

pub fn encode(ws: &Workspace) -> anyhow::Result<()> {
    let manifest = load_manifest(ws)?;
    let (cb_sift, cb_freak) = load_codebooks(ws)?;
    ws.verify(&ws.descriptor_index())?;
    let target = ws.encoded();
    let prov = Provenance::new()
        .input(ws, &ws.manifest())?
        .input(ws, &ws.descriptor_index())?
        .input(ws, &ws.codebook("sift"))?
        .input(ws, &ws.codebook("freak"))?;
    if prov.is_current(&target) {
        println!("encoded corpus is up to date");
        return Ok(());
    }
    let features = load_features(ws, &manifest, Channels::BOTH)?;
    let vectors = features
        .par_iter()
        .map(|f| encode_features(f, &cb_freak, &cb_sift))
        .collect::<Result<Vec<_>, _>>()?;
    let labels = manifest.labels().into_iter().map(|l| l as u16).collect();
    let corpus = EncodedCorpus::new(cb_sift.size(), labels, vectors)?;
    ensure_parent(&target)?;
    corpus.save(&target)?;
    prov.record(&target)?;
    println!("encoded {} images into {}-dimensional fused vectors", corpus.len(), 2 * corpus.z);
    Ok(())
}

fn load_corpus(ws: &Workspace) -> anyhow::Result<EncodedCorpus> {
    ws.verify(&ws.encoded())?;
    Ok(EncodedCorpus::load(&ws.encoded())?)
}

pub fn train(ws: &Workspace, settings: &Settings) -> anyhow::Result<()> {
    let split = load_split(ws)?;
    let mode = settings.mode;
    let target = ws.model(mode.name());
    let corpus = load_corpus(ws)?;
    let prov = Provenance::new()
        .input(ws, &ws.encoded())?
        .input(ws, &ws.split())?
        .param("mode", mode)
        .param("svm", format!("{:?}", settings.svm))
        .param("seed", settings.seed);
    if prov.is_current(&target) {
        println!("{mode} model is up to date");
        return Ok(());
    }
    let xs: Vec<&[f64]> = split.train.iter().map(|&i| corpus.vectors[i].view(mode)).collect();
    let ys: Vec<usize> = split.train.iter().map(|&i| corpus.labels[i] as usize).collect();
    let model = train_svm(&xs, &ys, &settings.svm, derive_seed(&[settings.seed, SALT_SVM]))?;
    ensure_parent(&target)?;
    model.save(&target)?;
    prov.record(&target)?;
    println!(
        "trained {} one-vs-rest classifiers on {} {mode} vectors",
        model.classes(),
        xs.len()
    );
    Ok(())
}

/// Query-side vectors are rounded to the precision the corpus file stores.
fn as_stored(v: FusedVector) -> anyhow::Result<FusedVector> {
    Ok(FusedVector::from_values(
        v.values().iter().map(|&x| x as f32 as f64).collect(),
    )?)
}

pub struct QueryArgs<'a> {
    pub image: &'a Path,
    pub k: usize,
    pub test_only: bool,
    pub html: Option<&'a Path>,
}

pub fn query(ws: &Workspace, settings: &Settings, args: &QueryArgs) -> anyhow::Result<()> {
    let manifest = load_manifest(ws)?;
    let mode = settings.mode;
    let model_path = ws.model(mode.name());
    ws.verify(&model_path)?;
    let model = SvmModel::load(&model_path)?;
    let corpus = load_corpus(ws)?;
    let (cb_sift, cb_freak) = load_codebooks(ws)?;

    let (extractor, _) = extractor(ws, settings)?;
    let recorded = fs::read_to_string(sidecar_path(&ws.descriptor_index())).unwrap_or_default();
    let params_line = format!("param\textraction\t{:?}", settings.extraction);
    if !recorded.contains(&params_line) {
        return Err(CliError::config(
            "extraction parameters differ from those the corpus was built with; rerun `fcbir extract`",
        )
        .into());
    }

    let img = load_image(args.image)?;
    let features = extractor.extract(&img)?;
    let vector = as_stored(encode_features(&features, &cb_freak, &cb_sift)?)?;

    let members: Vec<usize> = if args.test_only {
        load_split(ws)?.test
    } else {
        (0..corpus.len()).collect()
    };
    let database: Vec<(usize, &[f64], usize)> = members
        .iter()
        .map(|&i| (i, corpus.vectors[i].view(mode), corpus.labels[i] as usize))
        .collect();
    let ranked = retrieve(&model, vector.view(mode), &database, args.k, settings.ranking)?;

    let mut out = std::io::stdout().lock();
    writeln!(out, "# query\t{}", args.image.display())?;
    writeln!(out, "# predicted\t{}", manifest.classes[ranked.predicted])?;
    for (rank, e) in ranked.entries.iter().enumerate() {
        writeln!(
            out,
            "{}\t{:.6}\t{}\t{}",
            rank + 1,
            e.closeness,
            manifest.classes[e.class],
            manifest.absolute_path(e.id).display()
        )?;
    }
    if let Some(html) = args.html {
        ensure_parent(html)?;
        fs::write(html, gallery(&manifest, args.image, &ranked, html))
            .with_context(|| format!("writing {}", html.display()))?;
    }
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn gallery(manifest: &DatasetManifest, query: &Path, ranked: &RankedResult, html: &Path) -> String {
    let base = html.parent().map(Path::to_path_buf).unwrap_or_default();
    let base = base.canonicalize().unwrap_or(base);
    let link = |p: &Path| {
        let abs = p.canonicalize().unwrap_or_else(|_| p.to_path_buf());
        escape(&relative_path(&base, &abs).to_string_lossy().replace('\\', "/"))
    };
    let mut s = String::from(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>fcbir query</title>\n<style>\
         body{font-family:sans-serif}figure{display:inline-block;margin:4px;text-align:center}\
         img{width:128px;height:128px;object-fit:cover}.query img{border:4px solid #36c}\
         </style></head><body>\n",
    );
    let _ = writeln!(
        s,
        "<h1>Predicted class: {}</h1>\n<figure class=\"query\"><img src=\"{}\"><figcaption>query</figcaption></figure><hr>",
        escape(&manifest.classes[ranked.predicted]),
        link(query)
    );
    for (rank, e) in ranked.entries.iter().enumerate() {
        let _ = writeln!(
            s,
            "<figure><img src=\"{}\"><figcaption>#{} {} ({:.4})</figcaption></figure>",
            link(&manifest.absolute_path(e.id)),
            rank + 1,
            escape(&manifest.classes[e.class]),
            e.closeness
        );
    }
    s.push_str("</body></html>\n");
    s
}

pub fn evaluate(ws: &Workspace, settings: &Settings) -> anyhow::Result<()> {
    let manifest = load_manifest(ws)?;
    let config = settings.eval_config();
    config.validate()?;
    let need = Channels {
        sift: config.modes.iter().any(|m| *m != ChannelMode::FreakOnly),
        freak: config.modes.iter().any(|m| *m != ChannelMode::SiftOnly),
    };
    let features = load_features(ws, &manifest, need)?;
    let reports = ws.reports_dir();
    let checkpoints = reports.join("checkpoints");
    fs::create_dir_all(&checkpoints)?;
    let report = run_experiment(&manifest, &features, &config, Some(&checkpoints))?;
    let written = emit_reports(&report, &reports)?;
    let mut prov = Provenance::new()
        .input(ws, &ws.manifest())?
        .input(ws, &ws.descriptor_index())?
        .param("config", format!("{config:?}"));
    for file in &written {
        prov = prov.param("output", format!("{}\t{}", ws.rel(file), hash_file(file)?));
    }
    prov.record(&reports.join("summary"))?;
    for mode in report.modes() {
        let (s, f, map) = report.best(mode);
        println!(
            "{mode}: best MAP {:.2}% at codebook {} with {:.0}% of features",
            map * 100.0,
            config.codebook_sizes[s],
            config.feature_fractions[f] * 100.0
        );
    }
    for file in written {
        println!("wrote {}", ws.rel(&file));
    }
    Ok(())
}

pub fn gen_synthetic(out: &Path, per_class: usize, size: usize, seed: u64) -> anyhow::Result<()> {
    if per_class < 2 {
        return Err(CliError::new("parameter", "at least 2 images per class are required").into());
    }
    synth::write_dataset(out, per_class, size, seed)?;
    println!(
        "wrote {} classes x {per_class} images of {size}x{size} to {}",
        synth::CLASS_NAMES.len(),
        out.display()
    );
    Ok(())
}

pub fn train_pairs(ws: &Workspace, settings: &Settings) -> anyhow::Result<()> {
    let manifest = load_manifest(ws)?;
    let split = load_split(ws)?;
    let target = ws.freak_pairs();
    let prov = Provenance::new()
        .input(ws, &ws.manifest())?
        .input(ws, &ws.split())?
        .param("extraction", format!("{:?}", settings.extraction));
    if prov.is_current(&target) {
        println!("pair selection is up to date");
        return Ok(());
    }
    let images = split
        .train
        .par_iter()
        .map(|&i| load_image(&manifest.absolute_path(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let pattern = freak::build_pattern_with(&settings.extraction.pattern);
    let rows = freak::training_rows(&images, &settings.extraction.detector, &pattern)?;
    if rows.len() < freak::MIN_TRAINING_ROWS {
        return Err(CliError::new(
            "insufficient-descriptors",
            format!(
                "only {} keypoints in the training split; pair selection needs {}",
                rows.len(),
                freak::MIN_TRAINING_ROWS
            ),
        )
        .into());
    }
    let selection = freak::select_pairs(&rows, &pattern);
    ensure_parent(&target)?;
    selection.save(&target)?;
    prov.record(&target)?;
    println!("selected {} pairs from {} keypoints", selection.descriptor_pairs.len(), rows.len());
    Ok(())
}
