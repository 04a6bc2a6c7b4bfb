//! Flat `key = value` configuration (TOML syntax, no tables).

use std::path::Path;

use fcbir_core::codebook::KMeansParams;
use fcbir_core::encoder::ChannelMode;
use fcbir_core::evaluation::{EvalConfig, QueryDatabase};
use fcbir_core::features::ExtractionParams;
use fcbir_core::retrieval::{RankingRule, SvmParams};
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub train_fraction: Option<f64>,

    pub octaves: Option<usize>,
    pub scales_per_octave: Option<usize>,
    pub base_sigma: Option<f32>,
    pub contrast_threshold: Option<f32>,
    pub edge_ratio: Option<f32>,
    pub freak_outer_radius: Option<f32>,
    pub freak_ring_ratio: Option<f32>,
    pub freak_smoothing_factor: Option<f32>,

    pub codebook_size: Option<usize>,
    pub feature_fraction: Option<f64>,
    pub kmeans_max_iters: Option<usize>,
    pub kmeans_tol: Option<f64>,
    pub kmeans_restarts: Option<usize>,

    pub c_reg: Option<f64>,
    pub svm_max_epochs: Option<usize>,
    pub svm_gap_tol: Option<f64>,

    pub mode: Option<String>,
    pub ranking: Option<String>,
    pub top_k: Option<usize>,
    pub database: Option<String>,

    pub codebook_sizes: Option<Vec<usize>>,
    pub feature_fractions: Option<Vec<f64>>,
    pub runs: Option<usize>,
    pub modes: Option<Vec<String>>,
    pub gallery_queries_per_class: Option<usize>,
}

/// Fully resolved parameters for every stage.
#[derive(Debug, Clone)]
pub struct Settings {
    pub seed: u64,
    pub threads: Option<usize>,
    pub train_fraction: f64,
    pub extraction: ExtractionParams,
    pub codebook_size: usize,
    pub feature_fraction: f64,
    pub kmeans: KMeansParams,
    pub svm: SvmParams,
    pub mode: ChannelMode,
    pub ranking: RankingRule,
    pub top_k: usize,
    pub sweep: EvalConfig,
}

impl Default for Settings {
    fn default() -> Self {
        let sweep = EvalConfig::default();
        Settings {
            seed: 0,
            threads: None,
            train_fraction: sweep.train_fraction,
            extraction: ExtractionParams::default(),
            codebook_size: 600,
            feature_fraction: 0.5,
            kmeans: sweep.kmeans,
            svm: sweep.svm,
            mode: ChannelMode::Fused,
            ranking: sweep.ranking,
            top_k: sweep.top_k,
            sweep,
        }
    }
}

fn parse_database(s: &str) -> Result<QueryDatabase, CliError> {
    match s.to_ascii_lowercase().as_str() {
        "test" => Ok(QueryDatabase::Test),
        "full" => Ok(QueryDatabase::Full),
        other => Err(CliError::config(format!("unknown database {other:?} (expected test or full)"))),
    }
}

fn core(e: fcbir_core::Error) -> CliError {
    CliError::config(e.to_string())
}

impl Settings {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Settings> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::config(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str::<FileConfig>(&text)
                    .map_err(|e| CliError::config(format!("{}: {}", p.display(), e.message())))?
            }
            None => FileConfig::default(),
        };
        Ok(Settings::default().apply(file)?)
    }

    pub fn apply(mut self, f: FileConfig) -> Result<Settings, CliError> {
        macro_rules! set {
            ($($src:ident => $dst:expr),* $(,)?) => {
                $(if let Some(v) = f.$src { $dst = v; })*
            };
        }
        set! {
            seed => self.seed,
            train_fraction => self.train_fraction,
            octaves => self.extraction.detector.octaves,
            scales_per_octave => self.extraction.detector.scales_per_octave,
            base_sigma => self.extraction.detector.base_sigma,
            contrast_threshold => self.extraction.detector.contrast_threshold,
            edge_ratio => self.extraction.detector.edge_ratio,
            freak_outer_radius => self.extraction.pattern.outer_radius,
            freak_ring_ratio => self.extraction.pattern.ring_ratio,
            freak_smoothing_factor => self.extraction.pattern.smoothing_factor,
            codebook_size => self.codebook_size,
            feature_fraction => self.feature_fraction,
            kmeans_max_iters => self.kmeans.max_iters,
            kmeans_tol => self.kmeans.tol,
            kmeans_restarts => self.kmeans.restarts,
            c_reg => self.svm.c_reg,
            svm_max_epochs => self.svm.max_epochs,
            svm_gap_tol => self.svm.gap_tol,
            top_k => self.top_k,
            codebook_sizes => self.sweep.codebook_sizes,
            feature_fractions => self.sweep.feature_fractions,
            runs => self.sweep.runs,
            gallery_queries_per_class => self.sweep.gallery_queries_per_class,
        }
        if f.threads.is_some() {
            self.threads = f.threads;
        }
        if let Some(m) = f.mode {
            self.mode = ChannelMode::parse(&m).map_err(core)?;
        }
        if let Some(r) = f.ranking {
            self.ranking = RankingRule::parse(&r).map_err(core)?;
        }
        if let Some(d) = f.database {
            self.sweep.database = parse_database(&d)?;
        }
        if let Some(ms) = f.modes {
            self.sweep.modes = ms.iter().map(|m| ChannelMode::parse(m)).collect::<Result<_, _>>().map_err(core)?;
        }
        Ok(self)
    }

    /// The sweep configuration with the shared keys folded in.
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            base_seed: self.seed,
            train_fraction: self.train_fraction,
            top_k: self.top_k,
            ranking: self.ranking,
            kmeans: self.kmeans,
            svm: self.svm,
            ..self.sweep.clone()
        }
    }
}
