//! The single TOML configuration file and its override rules.
//!
//! Precedence is command-line flags, then the file, then built-in defaults.
//! Endpoint URLs may also come from `DCFSCAN_EMBEDDING_URL` and
//! `DCFSCAN_GENERATION_URL`, which beat the file but lose to nothing else
//! since no flag sets them.

use std::path::{Path, PathBuf};

use dcfscan::corpus::DcfFilterConfig;
use dcfscan::embedding::EmbeddingProviderConfig;
use dcfscan::ensemble::EnsembleConfig;
use dcfscan::evaluation::{Objective, SweepGrid};
use dcfscan::kb::RetrievalParams;
use dcfscan::synthetic::SyntheticCorpusConfig;
use dcfscan::{DecisionThresholds, Mode, PipelineParams};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const EMBEDDING_URL_ENV: &str = "DCFSCAN_EMBEDDING_URL";
pub const GENERATION_URL_ENV: &str = "DCFSCAN_GENERATION_URL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub kb_index: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            kb_index: PathBuf::from("kb.dcfidx"),
            report_dir: PathBuf::from("reports"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub objective: Objective,
    pub grid: SweepGrid,
    /// How many ranked rows to print to stdout.
    pub show: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            objective: Objective::default(),
            grid: SweepGrid::default(),
            show: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub workers: usize,
    pub paths: Paths,
    pub filter: DcfFilterConfig,
    pub embedding: EmbeddingProviderConfig,
    pub retrieval: RetrievalParams,
    pub ensemble: EnsembleConfig,
    pub thresholds: DecisionThresholds,
    pub calibration: CalibrationConfig,
    pub synthetic: SyntheticCorpusConfig,
    /// τ values for the rejection trade-off table in `evaluate`.
    pub tradeoff_taus: Vec<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            workers: 4,
            paths: Paths::default(),
            filter: DcfFilterConfig::default(),
            embedding: EmbeddingProviderConfig::default(),
            retrieval: RetrievalParams::default(),
            ensemble: EnsembleConfig::default(),
            thresholds: DecisionThresholds::default(),
            calibration: CalibrationConfig::default(),
            synthetic: SyntheticCorpusConfig::default(),
            tradeoff_taus: vec![0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 1.01],
        }
    }
}

/// Values given on the command line; `None` leaves the file value alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub report_dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
        }
    }

    /// `env` is injected so tests need not touch the process environment.
    pub fn apply(&mut self, o: &Overrides, env: impl Fn(&str) -> Option<String>) {
        if let Some(url) = env(EMBEDDING_URL_ENV).filter(|s| !s.is_empty()) {
            self.embedding.endpoint_url = Some(url);
        }
        if let Some(url) = env(GENERATION_URL_ENV).filter(|s| !s.is_empty()) {
            self.ensemble.endpoint_url = Some(url);
        }
        if let Some(mode) = o.mode {
            self.mode = mode;
        }
        if let Some(seed) = o.seed {
            self.ensemble.seed = seed;
            self.synthetic.seed = seed;
        }
        if let Some(workers) = o.workers {
            self.workers = workers;
        }
        if let Some(dir) = &o.report_dir {
            self.paths.report_dir = dir.clone();
        }
    }

    pub fn params(&self) -> PipelineParams {
        PipelineParams {
            filter: self.filter,
            retrieval: self.retrieval,
            ensemble: self.ensemble.clone(),
            thresholds: self.thresholds,
            mode: self.mode,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.workers == 0 {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        self.embedding.validate()?;
        self.params().validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_shipped_values() {
        let c = PipelineConfig::from_toml("").unwrap();
        assert_eq!(c.retrieval.k, 10);
        assert_eq!(c.retrieval.sigma_min, 0.70);
        assert_eq!(c.ensemble.n_agents, 5);
        assert_eq!(c.ensemble.temperature, 0.7);
        assert_eq!(c.thresholds, DecisionThresholds::default());
        assert_eq!((c.filter.min_instr, c.filter.min_cc, c.filter.top_m), (10, 5, 5));
    }

    #[test]
    fn precedence_flags_over_file_over_defaults() {
        let mut c = PipelineConfig::from_toml("mode = \"knn_only\"\nworkers = 2\n[ensemble]\nseed = 9\n").unwrap();
        assert_eq!((c.mode, c.workers, c.ensemble.seed), (Mode::KnnOnly, 2, 9));
        c.apply(
            &Overrides {
                seed: Some(3),
                ..Overrides::default()
            },
            |_| None,
        );
        assert_eq!((c.mode, c.workers, c.ensemble.seed), (Mode::KnnOnly, 2, 3));
    }

    #[test]
    fn env_sets_endpoints_only() {
        let mut c = PipelineConfig::default();
        c.apply(&Overrides::default(), |k| (k == GENERATION_URL_ENV).then(|| "http://h:1/api".to_string()));
        assert_eq!(c.ensemble.endpoint_url.as_deref(), Some("http://h:1/api"));
        assert_eq!(c.embedding.endpoint_url, None);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        assert!(matches!(PipelineConfig::from_toml("modee = 1"), Err(CliError::Config(_))));
    }
}
