//! Declarative run configuration.
//!
//! One TOML file drives a whole run; command-line flags may override a few
//! fields afterwards. Every tunable default (learning rate, window sizes,
//! match thresholds) lives here so the effective values are auditable: the
//! canonical serialization of the loaded config is embedded in the report
//! bundle and hashed into its provenance record.
//!
//! Two path rules keep runs reproducible:
//! - relative paths resolve against the config file's directory, so a
//!   checked-in config works from any working directory;
//! - paths are canonicalized lazily (stored as written), so the canonical
//!   form — and therefore the provenance hash — depends only on the config's
//!   contents, never on where the file happens to live.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetMode, GroupLabel, Mention};
use crate::engine::Pooling;
use crate::probe::ProbeHyper;

#[derive(thiserror::Error, Debug)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config field {field} points at a missing path: {path}")]
    MissingPath { field: &'static str, path: PathBuf },
    #[error("no output directory: set [run].output_dir or pass --output-dir")]
    NoOutputDir,
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub mode: DatasetMode,
    /// Where the report bundle lands; `--output-dir` overrides it. Part of
    /// the canonical form like every other field, so changing it changes the
    /// provenance hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub manifest: PathBuf,
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub path: PathBuf,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Optional consolidation-map override; the mode's default applies
    /// otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consolidation: Option<PathBuf>,
}

fn default_lr() -> f64 {
    0.1
}

fn default_epochs() -> usize {
    500
}

fn default_l2() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    /// 0-based block index whose post-block residual is probed.
    pub layer: usize,
    /// Defaults by mode: mean over positions for toxigen, last input token
    /// for the clinical modes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooling: Option<Pooling>,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_l2")]
    pub l2_lambda: f64,
    /// Extract features from the rendered prompt instead of the raw record
    /// text.
    #[serde(default)]
    pub wrap_prompt: bool,
}

fn default_layer_window() -> usize {
    4
}

fn default_top_n() -> usize {
    20
}

fn default_k() -> usize {
    20
}

fn default_min_matches() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionSection {
    #[serde(default = "default_layer_window")]
    pub layer_window: usize,
    #[serde(default = "default_top_n")]
    pub top_n: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_min_matches")]
    pub min_matches: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keywords_direct: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keywords_indirect: Option<PathBuf>,
}

fn default_factors() -> Vec<f64> {
    vec![5.0, 10.0, 20.0]
}

fn default_max_new() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionSection {
    #[serde(default = "default_factors")]
    pub factors: Vec<f64>,
    #[serde(default = "default_max_new")]
    pub max_new: usize,
}

impl Default for InterventionSection {
    fn default() -> Self {
        Self { factors: default_factors(), max_new: default_max_new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub dataset: DatasetSection,
    pub probe: ProbeSection,
    pub attribution: AttributionSection,
    #[serde(default)]
    pub intervention: InterventionSection,
    /// Directory the config file was loaded from; every relative path in
    /// the file resolves against it.
    #[serde(skip)]
    base_dir: PathBuf,
}

/// Command-line overrides applied after the file is parsed.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub test_fraction: Option<f64>,
}

impl RunConfig {
    /// Parse, resolve the base directory, and validate values. Input-path
    /// existence is checked here too, so failures happen before any compute.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: RunConfig = toml::from_str(&raw)?;
        config.base_dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or_else(|| Path::new("."))
            .to_path_buf();
        config.apply_overrides(overrides);
        config.validate_values()?;
        config.validate_paths()?;
        Ok(config)
    }

    pub fn apply_overrides(&mut self, overrides: &Overrides) {
        if let Some(seed) = overrides.seed {
            self.run.seed = seed;
        }
        if let Some(dir) = &overrides.output_dir {
            self.run.output_dir = Some(dir.clone());
        }
        if let Some(f) = overrides.test_fraction {
            self.dataset.test_fraction = f;
        }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn model_manifest_path(&self) -> PathBuf {
        self.resolve(&self.model.manifest)
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.resolve(&self.dataset.path)
    }

    pub fn consolidation_path(&self) -> Option<PathBuf> {
        self.dataset.consolidation.as_deref().map(|p| self.resolve(p))
    }

    pub fn keywords_direct_path(&self) -> Option<PathBuf> {
        self.attribution.keywords_direct.as_deref().map(|p| self.resolve(p))
    }

    pub fn keywords_indirect_path(&self) -> Option<PathBuf> {
        self.attribution.keywords_indirect.as_deref().map(|p| self.resolve(p))
    }

    pub fn output_dir(&self) -> Result<PathBuf> {
        self.run
            .output_dir
            .as_deref()
            .map(|p| self.resolve(p))
            .ok_or(ConfigError::NoOutputDir)
    }

    /// The pooling actually used: the explicit setting, or the mode default.
    pub fn effective_pooling(&self) -> Pooling {
        self.probe.pooling.unwrap_or(match self.run.mode {
            DatasetMode::Toxigen => Pooling::MeanAllPositions,
            DatasetMode::CreactDirect | DatasetMode::CreactIndirect => Pooling::LastInputToken,
        })
    }

    pub fn probe_hyper(&self) -> ProbeHyper {
        ProbeHyper {
            lr: self.probe.lr,
            epochs: self.probe.epochs,
            l2_lambda: self.probe.l2_lambda,
            seed: self.run.seed,
        }
    }

    /// Which keyword file serves a mention kind. The clinical modes need
    /// both; toxigen groups are unkinded and use the direct list.
    pub fn keywords_path_for(&self, mention: Mention) -> Option<PathBuf> {
        match mention {
            Mention::Indirect => self.keywords_indirect_path(),
            Mention::Direct | Mention::NotApplicable => self.keywords_direct_path(),
        }
    }

    fn validate_values(&self) -> Result<()> {
        let err = |msg: String| Err(ConfigError::Invalid(msg));
        if !(self.dataset.test_fraction > 0.0 && self.dataset.test_fraction < 1.0) {
            return err(format!(
                "dataset.test_fraction must be in (0, 1), got {}",
                self.dataset.test_fraction
            ));
        }
        if !(self.probe.lr.is_finite() && self.probe.lr > 0.0) {
            return err(format!("probe.lr must be positive, got {}", self.probe.lr));
        }
        if self.probe.epochs == 0 {
            return err("probe.epochs must be at least 1".into());
        }
        if !(self.probe.l2_lambda.is_finite() && self.probe.l2_lambda >= 0.0) {
            return err(format!(
                "probe.l2_lambda must be non-negative, got {}",
                self.probe.l2_lambda
            ));
        }
        for (field, value) in [
            ("attribution.layer_window", self.attribution.layer_window),
            ("attribution.top_n", self.attribution.top_n),
            ("attribution.k", self.attribution.k),
        ] {
            if value == 0 {
                return err(format!("{field} must be at least 1"));
            }
        }
        if self.intervention.factors.is_empty() {
            return err("intervention.factors must not be empty".into());
        }
        for &k in &self.intervention.factors {
            if !(k.is_finite() && k > 0.0) {
                return err(format!("intervention.factors entries must be positive, got {k}"));
            }
        }
        if self.intervention.max_new == 0 {
            return err("intervention.max_new must be at least 1".into());
        }
        if self.run.mode != DatasetMode::Toxigen {
            if self.attribution.keywords_direct.is_none() {
                return err("clinical modes require attribution.keywords_direct".into());
            }
            if self.attribution.keywords_indirect.is_none() {
                return err("clinical modes require attribution.keywords_indirect".into());
            }
        } else if self.attribution.keywords_direct.is_none() {
            return err("toxigen mode requires attribution.keywords_direct".into());
        }
        Ok(())
    }

    fn validate_paths(&self) -> Result<()> {
        let mut referenced: Vec<(&'static str, PathBuf)> = vec![
            ("model.manifest", self.model_manifest_path()),
            ("dataset.path", self.dataset_path()),
        ];
        if let Some(p) = self.consolidation_path() {
            referenced.push(("dataset.consolidation", p));
        }
        if let Some(p) = self.keywords_direct_path() {
            referenced.push(("attribution.keywords_direct", p));
        }
        if let Some(p) = self.keywords_indirect_path() {
            referenced.push(("attribution.keywords_indirect", p));
        }
        for (field, path) in referenced {
            if !path.exists() {
                return Err(ConfigError::MissingPath { field, path });
            }
        }
        Ok(())
    }

    /// Deterministic serialization of the effective config (defaults
    /// materialized, output directory excluded). This exact string is what
    /// gets embedded in the bundle and hashed for provenance.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Parse a keyword file: a TOML table mapping group names to word lists.
pub fn load_keywords(path: &Path) -> Result<BTreeMap<GroupLabel, Vec<String>>> {
    let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parsed: BTreeMap<String, Vec<String>> = toml::from_str(&raw)?;
    let mut out = BTreeMap::new();
    for (name, words) in parsed {
        let label = GroupLabel::ALL
            .iter()
            .find(|l| l.name() == name)
            .copied()
            .ok_or_else(|| {
                ConfigError::Invalid(format!("keyword file {path:?}: unknown group {name:?}"))
            })?;
        if words.is_empty() {
            return Err(ConfigError::Invalid(format!(
                "keyword file {path:?}: group {name} has no words"
            )));
        }
        out.insert(label, words);
    }
    if out.is_empty() {
        return Err(ConfigError::Invalid(format!("keyword file {path:?} is empty")));
    }
    Ok(out)
}
