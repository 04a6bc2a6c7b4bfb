//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Set `FCBIR_COREL_DIR` to a Corel-1000 style directory (one sub-directory per class) to
//! run the dataset-conditional full sweep; otherwise that criterion is reported as skipped.

use std::path::Path;
use std::time::{Duration, Instant};

use fcbir_core::codebook::{squared_distance, train_codebook, train_codebook_traced, KMeansParams};
use fcbir_core::dataset::{make_split, sample_features, scan_dataset};
use fcbir_core::descriptor::{DescriptorKind, DescriptorSet, FreakDescriptor, SiftDescriptor, FREAK_BITS, FREAK_WORDS, SIFT_DIM};
use fcbir_core::encoder::{encode, encode_features, fuse, ChannelMode, WordHistogram};
use fcbir_core::evaluation::{extract_all, precision_at_k, recall_at_k, run_experiment, Cell, EvalConfig};
use fcbir_core::features::Extractor;
use fcbir_core::freak::{self, PairSelection};
use fcbir_core::image::IntegralImage;
use fcbir_core::report::emit_reports;
use fcbir_core::retrieval::{retrieve_scored, train_svm, RankedEntry, RankedResult, RankingRule, ScoredDatabase, SvmParams};
use fcbir_core::scale_space::{detect, DetectorParams, Keypoint};
use fcbir_core::sift;
use fcbir_core::synth;
use fcbir_core::codebook::Codebook;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, budget: Duration) -> bool {
    elapsed <= budget
}

fn metric_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.random_range(20..60);
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
        let ranked = RankedResult {
            predicted: 0,
            entries: classes
                .iter()
                .enumerate()
                .map(|(i, &class)| RankedEntry {
                    id: i,
                    class,
                    closeness: i as f64,
                })
                .collect(),
        };
        let k = rng.random_range(1..=20);
        let query_class = rng.random_range(0..5);
        let class_size = rng.random_range(1..120);
        let mut hits = 0usize;
        for c in classes.iter().take(k) {
            if *c == query_class {
                hits += 1;
            }
        }
        let p = precision_at_k(&ranked, query_class, k).unwrap();
        let r = recall_at_k(&ranked, query_class, k, class_size).unwrap();
        if p != hits as f64 / k as f64 || r != hits as f64 / class_size as f64 {
            mismatches += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        mismatches == 0 && within(t, Duration::from_secs(1)),
        format!("200 fixtures, {mismatches} mismatches, {t:.2?}"),
    )
}

fn random_sift(rng: &mut ChaCha8Rng, n: usize) -> DescriptorSet {
    DescriptorSet::Sift(
        (0..n)
            .map(|_| {
                let mut d = [0f32; SIFT_DIM];
                d.iter_mut().for_each(|v| *v = rng.random_range(0.0..0.3));
                SiftDescriptor(d)
            })
            .collect(),
    )
}

fn random_freak(rng: &mut ChaCha8Rng) -> FreakDescriptor {
    let mut w = [0u64; FREAK_WORDS];
    w.iter_mut().for_each(|x| *x = rng.random());
    FreakDescriptor::from_words(w)
}

fn histogram_conservation() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = 0;
    for trial in 0..100 {
        let z = rng.random_range(2..40);
        let (cb, set) = if trial % 2 == 0 {
            let words: Vec<f32> = (0..z * SIFT_DIM).map(|_| rng.random_range(0.0..0.3)).collect();
            let n = rng.random_range(0..300);
            (Codebook::new(DescriptorKind::Sift, trial, words).unwrap(), random_sift(&mut rng, n))
        } else {
            let words: Vec<f32> = (0..z * FREAK_BITS).map(|_| rng.random_range(0.0..1.0)).collect();
            let n = rng.random_range(0..300);
            let set = DescriptorSet::Freak((0..n).map(|_| random_freak(&mut rng)).collect());
            (Codebook::new(DescriptorKind::Freak, trial, words).unwrap(), set)
        };
        let h = encode(&cb, &set).unwrap();
        let mut tally = vec![0u32; z];
        for i in 0..set.len() {
            let row = set.embedded_row(i);
            let mut best = 0;
            for j in 1..z {
                if squared_distance(&row, cb.word(j)) < squared_distance(&row, cb.word(best)) {
                    best = j;
                }
            }
            tally[best] += 1;
        }
        let sum: u32 = h.counts.iter().sum();
        if sum as usize != set.len() || h.total as usize != set.len() || h.counts != tally {
            failures += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        failures == 0 && within(t, Duration::from_secs(10)),
        format!("100 sets, {failures} failures, {t:.2?}"),
    )
}

fn fusion_shape() -> Outcome {
    let start = Instant::now();
    let mut bad = Vec::new();
    for z in [50, 100, 200, 300, 400, 600, 800] {
        let h = WordHistogram {
            counts: (0..z as u32).collect(),
            total: (0..z as u32).sum(),
        };
        let v = fuse(&h, &WordHistogram::zeros(z)).unwrap();
        if v.len() != 2 * z {
            bad.push(z);
        }
    }
    let t = start.elapsed();
    outcome(
        bad.is_empty() && within(t, Duration::from_secs(1)),
        format!("sizes 50..800, wrong dimension for {bad:?}, {t:.2?}"),
    )
}

/// Plain Lloyd from a random choice of distinct points, written independently of the library.
fn naive_lloyd(points: &[[f64; 2]], z: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    for i in 0..z {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    let mut centers: Vec<[f64; 2]> = idx[..z].iter().map(|&i| points[i]).collect();
    let d2 = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    for _ in 0..200 {
        let labels: Vec<usize> = points
            .iter()
            .map(|&p| (0..z).min_by(|&a, &b| d2(p, centers[a]).total_cmp(&d2(p, centers[b]))).unwrap())
            .collect();
        let mut next = centers.clone();
        for (c, center) in next.iter_mut().enumerate() {
            let members: Vec<[f64; 2]> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| *p).collect();
            if !members.is_empty() {
                let n = members.len() as f64;
                *center = [
                    members.iter().map(|p| p[0]).sum::<f64>() / n,
                    members.iter().map(|p| p[1]).sum::<f64>() / n,
                ];
            }
        }
        if next == centers {
            break;
        }
        centers = next;
    }
    points
        .iter()
        .map(|&p| centers.iter().map(|&c| d2(p, c)).fold(f64::INFINITY, f64::min))
        .sum()
}

fn kmeans_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worse, mut assign_errors, mut worst_ratio) = (0, 0, 0f64);
    for instance in 0..20 {
        let points: Vec<[f64; 2]> = (0..30)
            .map(|_| {
                let p = [rng.random_range(-1.0f32..1.0), rng.random_range(-1.0f32..1.0)];
                [p[0] as f64, p[1] as f64]
            })
            .collect();
        // 2-D points embedded in the descriptor space with zero padding
        let set = DescriptorSet::Sift(
            points
                .iter()
                .map(|p| {
                    let mut d = [0f32; SIFT_DIM];
                    d[0] = p[0] as f32;
                    d[1] = p[1] as f32;
                    SiftDescriptor(d)
                })
                .collect(),
        );
        let (cb, trace) = train_codebook_traced(&set, 3, instance, &KMeansParams::default()).unwrap();
        let solver = *trace.objectives.last().unwrap();
        let best = (0..50).map(|_| naive_lloyd(&points, 3, &mut rng)).fold(f64::INFINITY, f64::min);
        worst_ratio = worst_ratio.max(solver / best);
        if solver > best * 1.05 {
            worse += 1;
        }
        for i in 0..set.len() {
            let row = set.embedded_row(i);
            let got = cb.assign_word(&row).unwrap();
            let dists: Vec<f64> = (0..3).map(|j| squared_distance(&row, cb.word(j))).collect();
            let want = (0..3).fold(0, |b, j| if dists[j] < dists[b] { j } else { b });
            if got != want {
                assign_errors += 1;
            }
        }
    }
    let t = start.elapsed();
    outcome(
        worse == 0 && assign_errors == 0 && within(t, Duration::from_secs(30)),
        format!("20 instances, worst objective ratio {worst_ratio:.4}, {assign_errors} assignment errors, {t:.2?}"),
    )
}

fn binary_embedding() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (a, b) = (random_freak(&mut rng), random_freak(&mut rng));
        if squared_distance(&a.embed(), &b.embed()) != a.hamming(&b) as f64 {
            mismatches += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        mismatches == 0 && within(t, Duration::from_secs(1)),
        format!("1000 pairs, {mismatches} mismatches, {t:.2?}"),
    )
}

fn descriptor_invariances() -> Outcome {
    let start = Instant::now();
    let params = DetectorParams::default();
    let pattern = freak::build_pattern();
    let pairs = PairSelection::shipped();
    let (mut sift_count, mut sift_bad) = (0, 0);
    let (mut freak_count, mut freak_variant) = (0, 0);
    let (mut matched, mut possible) = (0usize, 0usize);
    let (mut hamming, mut compared) = (0u64, 0u64);
    for seed in 0..20 {
        let img = synth::textured(256, 256, 100 + seed);
        let detection = detect(&img, &params).unwrap();
        let described = sift::describe(&detection.pyramid, &detection.keypoints);
        let DescriptorSet::Sift(ds) = &described.descriptors else { unreachable!() };
        for d in ds {
            sift_count += 1;
            let norm = d.0.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                sift_bad += 1;
            }
        }

        // same keypoints on brightness-shifted and contrast-scaled copies
        let ii = IntegralImage::new(&img);
        let transformed: Vec<IntegralImage> = [(0.75f32, 0.0f32), (0.5, 0.25), (0.75, 0.125)]
            .iter()
            .map(|&(g, o)| IntegralImage::new(&img.map(|v| g * v + o)))
            .collect();
        for kp in &detection.keypoints {
            let Some((_, base)) = freak::describe_keypoint(&ii, kp, &pattern, pairs) else { continue };
            freak_count += 1;
            assert_eq!(base.words().len() * 64, FREAK_BITS);
            if transformed
                .iter()
                .any(|t| freak::describe_keypoint(t, kp, &pattern, pairs).map(|(_, d)| d) != Some(base))
            {
                freak_variant += 1;
            }
        }

        // quarter turn: repeatability and descriptor distance on correspondences
        let rot = img.rotate90();
        let rotated = detect(&rot, &params).unwrap().keypoints;
        let rii = IntegralImage::new(&rot);
        possible += detection.keypoints.len().min(rotated.len());
        for kp in &detection.keypoints {
            let (x, y) = img.rotate90_point(kp.x, kp.y);
            let dist = |q: &Keypoint| ((q.x - x).powi(2) + (q.y - y).powi(2)).sqrt();
            let Some(q) = rotated
                .iter()
                .filter(|q| dist(q) <= 2.0 && (q.scale / kp.scale).log2().abs() <= 1.0 / 3.0)
                .min_by(|a, b| dist(a).total_cmp(&dist(b)))
            else {
                continue;
            };
            matched += 1;
            if let (Some((_, a)), Some((_, b))) = (
                freak::describe_keypoint(&ii, kp, &pattern, pairs),
                freak::describe_keypoint(&rii, q, &pattern, pairs),
            ) {
                hamming += a.hamming(&b) as u64;
                compared += 1;
            }
        }
    }
    let repeatability = matched as f64 / possible as f64;
    let mean_hamming = hamming as f64 / compared.max(1) as f64;
    let t = start.elapsed();
    let pass = sift_count > 0
        && sift_bad == 0
        && freak_count > 0
        && freak_variant == 0
        && repeatability >= 0.70
        && compared > 0
        && mean_hamming <= 0.10 * FREAK_BITS as f64
        && within(t, Duration::from_secs(300));
    outcome(
        pass,
        format!(
            "SIFT {sift_bad}/{sift_count} off unit norm; FREAK {freak_variant}/{freak_count} changed by shift/contrast; \
             rotation repeatability {:.1}%, mean Hamming {mean_hamming:.1} bits ({:.1}%) over {compared}; {t:.2?}",
            repeatability * 100.0,
            mean_hamming / FREAK_BITS as f64 * 100.0
        ),
    )
}

fn desk_config() -> EvalConfig {
    EvalConfig {
        codebook_sizes: vec![100],
        feature_fractions: vec![0.5],
        runs: 5,
        ..Default::default()
    }
}

fn desk_end_to_end(root: &Path) -> Outcome {
    let start = Instant::now();
    let data = root.join("desk");
    synth::write_dataset(&data, 30, 256, 0).unwrap();
    let manifest = scan_dataset(&data).unwrap();
    let features = extract_all(&manifest, &Extractor::standard()).unwrap();
    let config = desk_config();
    let report = run_experiment(&manifest, &features, &config, None).unwrap();
    let out_a = root.join("reports_a");
    let files = emit_reports(&report, &out_a).unwrap();
    let elapsed = start.elapsed();

    let mut fused_ok = 0;
    let mut per_run = Vec::new();
    for run in 0..config.runs {
        let map = |mode| report.run_map(Cell { mode, size: 0, fraction: 0, run });
        let (f, s, b) = (map(ChannelMode::Fused), map(ChannelMode::SiftOnly), map(ChannelMode::FreakOnly));
        if f >= s - 0.02 && f >= b - 0.02 {
            fused_ok += 1;
        }
        per_run.push(format!("{:.1}/{:.1}/{:.1}", f * 100.0, s * 100.0, b * 100.0));
    }

    // a second, fully independent pass with the same seeds
    let manifest_b = scan_dataset(&data).unwrap();
    let features_b = extract_all(&manifest_b, &Extractor::standard()).unwrap();
    let report_b = run_experiment(&manifest_b, &features_b, &config, None).unwrap();
    let out_b = root.join("reports_b");
    emit_reports(&report_b, &out_b).unwrap();
    let identical = files.iter().all(|p| {
        let name = p.file_name().unwrap();
        std::fs::read(p).unwrap() == std::fs::read(out_b.join(name)).unwrap()
    });

    let pass = within(elapsed, Duration::from_secs(300)) && fused_ok >= 4 && identical;
    outcome(
        pass,
        format!(
            "pipeline {elapsed:.1?}; fused/sift/freak MAP% per run [{}] (ceiling {:.1}); fused ok in {fused_ok}/5 runs; reports identical: {identical}",
            per_run.join(", "),
            // each query's database holds (test images of its class − 1) relevant images
            (manifest.class_counts()[0] - fcbir_core::dataset::train_count(30, 0.7) - 1) as f64 / 20.0 * 100.0
        ),
    )
}

fn self_retrieval(root: &Path) -> Outcome {
    let data = root.join("desk");
    let manifest = scan_dataset(&data).unwrap();
    let features = extract_all(&manifest, &Extractor::standard()).unwrap();
    let split = make_split(&manifest, 0.7, 77).unwrap();
    let labels = manifest.labels();
    let pool = |kind| {
        let mut out = DescriptorSet::empty(kind);
        for &i in &split.train {
            out.extend(&sample_features(features[i].channel(kind), 0.5, i as u64).unwrap()).unwrap();
        }
        out
    };
    let params = KMeansParams::default();
    let cb_freak = train_codebook(&pool(DescriptorKind::Freak), 50, 1, &params).unwrap();
    let cb_sift = train_codebook(&pool(DescriptorKind::Sift), 50, 2, &params).unwrap();
    let vectors: Vec<_> = features.iter().map(|f| encode_features(f, &cb_freak, &cb_sift).unwrap()).collect();
    let xs: Vec<&[f64]> = split.train.iter().map(|&i| vectors[i].values()).collect();
    let ys: Vec<usize> = split.train.iter().map(|&i| labels[i]).collect();
    let model = train_svm(&xs, &ys, &SvmParams::default(), 5).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ok = 0;
    for _ in 0..100 {
        let query = rng.random_range(0..manifest.entries.len());
        let mut members: Vec<usize> = (0..manifest.entries.len()).filter(|&i| i != query && rng.random_bool(0.5)).collect();
        let at = rng.random_range(0..=members.len());
        members.insert(at, query);
        let items: Vec<(usize, &[f64], usize)> = members.iter().map(|&i| (i, vectors[i].values(), labels[i])).collect();
        let db = ScoredDatabase::new(&model, &items).unwrap();
        let scores = model.score(vectors[query].values()).unwrap();
        let ranked = retrieve_scored(&scores, &db, 20, RankingRule::default(), None);
        if ranked.entries[0].id == query && ranked.entries[0].closeness == 0.0 {
            ok += 1;
        }
    }
    outcome(ok == 100, format!("{ok}/100 trials ranked the query first with closeness 0"))
}

fn corel_sweep() -> Option<Outcome> {
    let dir = std::env::var_os("FCBIR_COREL_DIR")?;
    let start = Instant::now();
    let manifest = match scan_dataset(Path::new(&dir)) {
        Ok(m) => m,
        Err(e) => return Some(outcome(false, format!("cannot scan {dir:?}: {e}"))),
    };
    let features = match extract_all(&manifest, &Extractor::standard()) {
        Ok(f) => f,
        Err(e) => return Some(outcome(false, format!("extraction failed: {e}"))),
    };
    let config = EvalConfig::default();
    let report = match run_experiment(&manifest, &features, &config, None) {
        Ok(r) => r,
        Err(e) => return Some(outcome(false, format!("sweep failed: {e}"))),
    };
    let best = |mode| report.best(mode).2;
    let (f, s, b) = (best(ChannelMode::Fused), best(ChannelMode::SiftOnly), best(ChannelMode::FreakOnly));
    Some(outcome(
        f > s && f > b && (0.60..=0.85).contains(&f),
        format!(
            "best MAP fused {:.2}% sift {:.2}% freak {:.2}%; {:.1?}",
            f * 100.0,
            s * 100.0,
            b * 100.0,
            start.elapsed()
        ),
    ))
}

type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn main() {
    let root = tempfile::tempdir().expect("temporary directory");
    let criteria: Vec<(&str, Check)> = vec![
        ("metric exactness", Box::new(metric_exactness)),
        ("histogram conservation", Box::new(histogram_conservation)),
        ("fusion shape", Box::new(fusion_shape)),
        ("k-means oracle", Box::new(kmeans_oracle)),
        ("binary-embedding identity", Box::new(binary_embedding)),
        ("descriptor invariances", Box::new(descriptor_invariances)),
        ("desk-scale end-to-end", Box::new(|| desk_end_to_end(root.path()))),
        ("self-retrieval", Box::new(|| self_retrieval(root.path()))),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let result = check();
        if !result.pass {
            failed += 1;
        }
        println!("{} {name}: {}", if result.pass { "PASS" } else { "FAIL" }, result.detail);
    }
    match corel_sweep() {
        Some(result) => {
            if !result.pass {
                failed += 1;
            }
            println!("{} corel-1000 sweep: {}", if result.pass { "PASS" } else { "FAIL" }, result.detail);
        }
        None => println!("SKIP corel-1000 sweep: FCBIR_COREL_DIR not set"),
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
