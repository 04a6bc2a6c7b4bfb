//! CSV tables, curve data, raw dumps and HTML result galleries for an [`EvalReport`].

use std::fmt::Write as _;
use std::path::{Component, Path, PathBuf};

use crate::encoder::ChannelMode;
use crate::error::{Error, Result};
use crate::evaluation::{Cell, EvalReport};

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn fraction_label(f: f64) -> String {
    format!("{}%", (f * 100.0).round())
}

/// Rows: feature fractions then `Mean`; columns: codebook sizes; values: MAP in percent.
pub fn table_csv(report: &EvalReport, mode: ChannelMode) -> String {
    let sizes = &report.config.codebook_sizes;
    let fractions = &report.config.feature_fractions;
    let mut out = String::from("features_used");
    for z in sizes {
        let _ = write!(out, ",{z}");
    }
    out.push('\n');
    let grid: Vec<Vec<f64>> = (0..fractions.len())
        .map(|f| (0..sizes.len()).map(|s| report.map(mode, s, f)).collect())
        .collect();
    for (f, row) in grid.iter().enumerate() {
        out.push_str(&fraction_label(fractions[f]));
        for v in row {
            let _ = write!(out, ",{}", pct(*v));
        }
        out.push('\n');
    }
    out.push_str("Mean");
    for s in 0..sizes.len() {
        let col = grid.iter().map(|r| r[s]).sum::<f64>() / grid.len() as f64;
        let _ = write!(out, ",{}", pct(col));
    }
    out.push('\n');
    out
}

/// Per-class precision and recall (percent) at the mode's best grid point.
pub fn per_class_csv(report: &EvalReport, mode: ChannelMode) -> String {
    let (s, f, _) = report.best(mode);
    let metrics = report.averaged_class_metrics(mode, s, f);
    let mut out = format!(
        "# mode={} codebook_size={} features_used={} top_k={}\nclass,precision,recall_db,recall_full\n",
        mode,
        report.config.codebook_sizes[s],
        fraction_label(report.config.feature_fractions[f]),
        report.config.top_k
    );
    for (name, m) in report.class_names.iter().zip(&metrics) {
        let _ = writeln!(out, "{},{},{},{}", name, pct(m.precision), pct(m.recall_db), pct(m.recall_full));
    }
    let n = metrics.len() as f64;
    let _ = writeln!(
        out,
        "Mean,{},{},{}",
        pct(metrics.iter().map(|m| m.precision).sum::<f64>() / n),
        pct(metrics.iter().map(|m| m.recall_db).sum::<f64>() / n),
        pct(metrics.iter().map(|m| m.recall_full).sum::<f64>() / n)
    );
    out
}

/// MAP against codebook size: one column per mode and fraction, plus the mean over fractions.
pub fn curve_csv(report: &EvalReport) -> String {
    let modes = report.modes();
    let fractions = &report.config.feature_fractions;
    let mut out = String::from("codebook_size");
    for m in &modes {
        for f in fractions {
            let _ = write!(out, ",{m}@{}", fraction_label(*f));
        }
        let _ = write!(out, ",{m}@mean");
    }
    out.push('\n');
    for (s, z) in report.config.codebook_sizes.iter().enumerate() {
        let _ = write!(out, "{z}");
        for &m in &modes {
            let values: Vec<f64> = (0..fractions.len()).map(|f| report.map(m, s, f)).collect();
            for v in &values {
                let _ = write!(out, ",{}", pct(*v));
            }
            let _ = write!(out, ",{}", pct(values.iter().sum::<f64>() / values.len() as f64));
        }
        out.push('\n');
    }
    out
}

/// Every query record at full precision.
pub fn raw_csv(report: &EvalReport) -> String {
    let mut out = String::from(
        "mode,codebook_size,feature_fraction,run,query,class,predicted,correct,retrieved,class_size_db,class_size_full,precision,recall_db,recall_full,results\n",
    );
    for (cell, queries) in &report.cells {
        for q in queries {
            let results: Vec<String> = q.results.iter().map(|(id, c)| format!("{id}:{c}")).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                cell.mode,
                report.config.codebook_sizes[cell.size],
                report.config.feature_fractions[cell.fraction],
                cell.run,
                q.query,
                report.class_names[q.class],
                report.class_names[q.predicted],
                q.correct,
                q.retrieved,
                q.class_size_db,
                q.class_size_full,
                q.precision(),
                q.recall_db(),
                q.recall_full(),
                results.join(" ")
            );
        }
    }
    out
}

/// Path of `target` relative to directory `base` (both made absolute first).
pub fn relative_path(base: &Path, target: &Path) -> PathBuf {
    let abs = |p: &Path| {
        let p = if p.is_absolute() {
            p.to_path_buf()
        } else {
            std::env::current_dir().unwrap_or_default().join(p)
        };
        let mut out = PathBuf::new();
        for c in p.components() {
            match c {
                Component::ParentDir => {
                    out.pop();
                }
                Component::CurDir => {}
                other => out.push(other),
            }
        }
        out
    };
    let (base, target) = (abs(base), abs(target));
    let b: Vec<_> = base.components().collect();
    let t: Vec<_> = target.components().collect();
    let common = b.iter().zip(&t).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c);
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn link(out_dir: &Path, image: &Path) -> String {
    let rel = relative_path(out_dir, image);
    escape(&rel.to_string_lossy().replace('\\', "/"))
}

const STYLE: &str = "body{font-family:sans-serif;margin:1em}\
.q{margin-bottom:2em}.row{display:flex;flex-wrap:wrap;gap:6px}\
figure{margin:0;padding:3px;border:3px solid #999;font-size:11px;text-align:center}\
figure.hit{border-color:#2a2}figure.miss{border-color:#c22}figure.query{border-color:#228}\
img{width:96px;height:96px;object-fit:cover;display:block}";

/// Self-contained gallery of sample queries (run 0, best grid point of `mode`).
pub fn gallery_html(report: &EvalReport, mode: ChannelMode, out_dir: &Path) -> String {
    let (s, f, map) = report.best(mode);
    let cell = Cell {
        mode,
        size: s,
        fraction: f,
        run: 0,
    };
    let queries = report.cells.get(&cell).map_or(&[][..], Vec::as_slice);
    let per_class = report.config.gallery_queries_per_class;
    let mut out = String::new();
    let _ = write!(
        out,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{mode} retrieval</title><style>{STYLE}</style></head><body>\n\
         <h1>{mode}: codebook {}, features {}, MAP {}%</h1>\n",
        report.config.codebook_sizes[s],
        fraction_label(report.config.feature_fractions[f]),
        pct(map)
    );
    for (c, name) in report.class_names.iter().enumerate() {
        for q in queries.iter().filter(|q| q.class == c).take(per_class) {
            let _ = write!(
                out,
                "<div class=\"q\"><h2>{} (predicted {}): {}/{} correct</h2><div class=\"row\">\n\
                 <figure class=\"query\"><img src=\"{}\" alt=\"query\"><figcaption>query</figcaption></figure>\n",
                escape(name),
                escape(&report.class_names[q.predicted]),
                q.correct,
                q.retrieved,
                link(out_dir, &report.images[q.query])
            );
            for (rank, &(id, closeness)) in q.results.iter().take(report.config.top_k).enumerate() {
                let hit = report.labels[id] == q.class;
                let _ = writeln!(
                    out,
                    "<figure class=\"{}\"><img src=\"{}\" alt=\"result {}\"><figcaption>#{} {:.4}</figcaption></figure>",
                    if hit { "hit" } else { "miss" },
                    link(out_dir, &report.images[id]),
                    rank + 1,
                    rank + 1,
                    closeness
                );
            }
            out.push_str("</div></div>\n");
        }
    }
    out.push_str("</body></html>\n");
    out
}

/// Writes every report artifact into `out_dir` and returns the written paths.
pub fn emit_reports(report: &EvalReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files: Vec<(String, String)> = Vec::new();
    for mode in report.modes() {
        files.push((format!("table_{mode}.csv"), table_csv(report, mode)));
        files.push((format!("per_class_{mode}.csv"), per_class_csv(report, mode)));
        files.push((format!("gallery_{mode}.html"), gallery_html(report, mode, out_dir)));
    }
    files.push(("curve.csv".into(), curve_csv(report)));
    files.push(("raw_queries.csv".into(), raw_csv(report)));
    let mut written = Vec::new();
    for (name, body) in files {
        let path = out_dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{extract_all, run_experiment, EvalConfig};
    use crate::features::Extractor;
    use crate::synth;

    fn toy_report(root: &Path) -> EvalReport {
        synth::write_dataset(root, 8, 160, 11).unwrap();
        let manifest = crate::dataset::scan_dataset(root).unwrap();
        let features = extract_all(&manifest, &Extractor::standard()).unwrap();
        let config = EvalConfig {
            codebook_sizes: vec![8, 16],
            feature_fractions: vec![0.25, 0.5, 0.75],
            runs: 2,
            top_k: 6,
            train_fraction: 0.5,
            ..Default::default()
        };
        run_experiment(&manifest, &features, &config, None).unwrap()
    }

    #[test]
    fn artifacts_have_expected_shape_and_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let report = toy_report(&dir.path().join("data"));
        let out = dir.path().join("reports");
        let written = emit_reports(&report, &out).unwrap();
        assert_eq!(written.len(), 3 * 3 + 2);

        let table = std::fs::read_to_string(out.join("table_fused.csv")).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "features_used,8,16");
        assert_eq!(lines.len(), 1 + 4);
        assert!(lines[4].starts_with("Mean,"));
        // the Mean row is the column mean of the fraction rows
        for col in 1..3 {
            let vals: Vec<f64> = lines[1..4].iter().map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect();
            let mean: f64 = lines[4].split(',').nth(col).unwrap().parse().unwrap();
            assert!((vals.iter().sum::<f64>() / 3.0 - mean).abs() <= 0.01);
        }

        let per_class = std::fs::read_to_string(out.join("per_class_sift_only.csv")).unwrap();
        assert_eq!(per_class.lines().count(), 2 + 3 + 1);

        let gallery = std::fs::read_to_string(out.join("gallery_fused.html")).unwrap();
        assert_eq!(gallery.matches("<div class=\"q\">").count(), 3);
        assert_eq!(gallery.matches("<img ").count(), 3 * (1 + 6));
        assert!(gallery.contains("src=\"../data/"));

        let before: Vec<Vec<u8>> = written.iter().map(|p| std::fs::read(p).unwrap()).collect();
        emit_reports(&report, &out).unwrap();
        let after: Vec<Vec<u8>> = written.iter().map(|p| std::fs::read(p).unwrap()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn relative_paths() {
        assert_eq!(relative_path(Path::new("/a/b/out"), Path::new("/a/b/data/x.png")), PathBuf::from("../data/x.png"));
        assert_eq!(relative_path(Path::new("/a"), Path::new("/a/x.png")), PathBuf::from("x.png"));
        assert_eq!(relative_path(Path::new("/a/./c/../b"), Path::new("/a/b/y")), PathBuf::from("y"));
    }

    #[test]
    fn unwritable_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        let report = EvalReport {
            config: EvalConfig::default(),
            class_names: vec![],
            images: vec![],
            labels: vec![],
            cells: Default::default(),
        };
        assert!(matches!(emit_reports(&report, &blocker.join("sub")), Err(Error::Io { .. })));
    }
}
