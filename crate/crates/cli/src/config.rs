//! Run configuration: one TOML document, digested for provenance.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use srtc::data::{CsvSchema, EnvironmentConfig, RssNormalization};
use srtc::distill::DistillConfig;
use srtc::eval::DEFAULT_PROBES;
use srtc::expert::ExpertConfig;
use srtc::nn::ModelDims;
use srtc::rng::derive_seed;
use srtc::DType;

use crate::error::{config_err, IoContext, Result};

pub const DEFAULT_SAMPLES: usize = 512;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StorageType {
    F32,
    #[default]
    F64,
}

impl From<StorageType> for DType {
    fn from(s: StorageType) -> Self {
        match s {
            StorageType::F32 => DType::F32,
            StorageType::F64 => DType::F64,
        }
    }
}

/// A source or target dataset: synthetic unless `csv` is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub environment: Option<EnvironmentConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<CsvSchema>,
    /// Replaces the run-wide `[expert]` section for this source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert: Option<ExpertConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub normalization: RssNormalization,
    pub target: DatasetSpec,
    pub sources: Vec<DatasetSpec>,
}

fn default_train_fraction() -> f64 {
    DEFAULT_TRAIN_FRACTION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub probes: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probes: DEFAULT_PROBES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stochastic stage derives its own stream from it.
    #[serde(default)]
    pub seed: u64,
    /// Precision of stored checkpoints. Training always runs in `f64`.
    #[serde(default)]
    pub checkpoint_dtype: StorageType,
    #[serde(default)]
    pub model: ModelDims,
    pub data: DataConfig,
    #[serde(default)]
    pub expert: ExpertConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Directory relative CSV paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base)
    }

    /// Parses and fills defaults so that the canonical form is explicit.
    pub fn from_toml(text: &str, base_dir: PathBuf) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.base_dir = base_dir;
        for spec in std::iter::once(&mut cfg.data.target).chain(cfg.data.sources.iter_mut()) {
            if spec.csv.is_some() {
                spec.schema.get_or_insert_with(CsvSchema::default);
            } else {
                spec.environment.get_or_insert_with(EnvironmentConfig::default);
                spec.samples.get_or_insert(DEFAULT_SAMPLES);
            }
        }
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self
    }

    pub fn canonical(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    /// Hex SHA-256 of [`canonical`](Self::canonical).
    pub fn digest(&self) -> Result<String> {
        let hash = Sha256::digest(self.canonical()?.as_bytes());
        Ok(hash.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_distill()?;
        if self.data.sources.is_empty() {
            return Err(config_err("at least one source dataset is required"));
        }
        let mut names = HashSet::new();
        for spec in self.datasets() {
            if !names.insert(spec.name.as_str()) {
                return Err(config_err(format!("dataset name `{}` is used twice", spec.name)));
            }
        }
        for spec in &self.data.sources {
            self.validate_dataset(spec)?;
            self.expert_config(spec)
                .validate()
                .map_err(|e| config_err(format!("expert `{}`: {e}", spec.name)))?;
        }
        Ok(())
    }

    /// The sections distilling reads: model, target, distill and eval.
    /// Source datasets are not checked since distilling never opens them.
    pub fn validate_distill(&self) -> Result<()> {
        let d = &self.model;
        if d.hidden == 0 || d.d_repr == 0 || d.d_noise == 0 {
            return Err(config_err("model widths must be >= 1"));
        }
        let tf = self.data.train_fraction;
        if !(tf > 0.0 && tf < 1.0) {
            return Err(config_err(format!("data.train_fraction must lie in (0, 1), got {tf}")));
        }
        if !(self.data.normalization.min_rss < 0.0) {
            return Err(config_err("data.normalization.min_rss must be negative"));
        }
        self.validate_dataset(&self.data.target)?;
        self.distill
            .validate()
            .map_err(|e| config_err(format!("distill: {e}")))?;
        if self.eval.probes.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(config_err("eval.probes must be finite and nonnegative"));
        }
        Ok(())
    }

    fn validate_dataset(&self, spec: &DatasetSpec) -> Result<()> {
        let name = &spec.name;
        let safe = |c: char| c.is_ascii_alphanumeric() || c == '-' || c == '_';
        if name.is_empty() || !name.chars().all(safe) {
            return Err(config_err(format!(
                "dataset name `{name}` must be nonempty [A-Za-z0-9_-]"
            )));
        }
        match &spec.csv {
            Some(path) => {
                if spec.environment.is_some() || spec.samples.is_some() {
                    return Err(config_err(format!(
                        "dataset `{name}`: csv excludes environment/samples"
                    )));
                }
                let full = self.resolve(path);
                if !full.is_file() {
                    return Err(config_err(format!(
                        "dataset `{name}`: {} does not exist",
                        full.display()
                    )));
                }
            }
            None => {
                if spec.schema.is_some() {
                    return Err(config_err(format!("dataset `{name}`: schema needs csv")));
                }
                if spec.samples.unwrap_or(DEFAULT_SAMPLES) < 2 {
                    return Err(config_err(format!("dataset `{name}`: samples must be >= 2")));
                }
                let env = spec.environment.clone().unwrap_or_default();
                srtc::data::generate_environment(&env, 0).map_err(|e| config_err(format!("dataset `{name}`: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn datasets(&self) -> impl Iterator<Item = &DatasetSpec> {
        std::iter::once(&self.data.target).chain(&self.data.sources)
    }

    pub fn source(&self, name: &str) -> Option<&DatasetSpec> {
        self.data.sources.iter().find(|s| s.name == name)
    }

    pub fn environment_seed(&self, dataset: &str) -> u64 {
        derive_seed(self.seed, &format!("data.{dataset}.environment"))
    }

    pub fn samples_seed(&self, dataset: &str) -> u64 {
        derive_seed(self.seed, &format!("data.{dataset}.samples"))
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, "data.split")
    }

    pub fn expert_config(&self, source: &DatasetSpec) -> ExpertConfig {
        ExpertConfig {
            seed: derive_seed(self.seed, &format!("expert.{}", source.name)),
            ..source.expert.clone().unwrap_or_else(|| self.expert.clone())
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            seed: derive_seed(self.seed, "distill"),
            ..self.distill.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"
seed = 3

[data.target]
name = "target"

[[data.sources]]
name = "a"
samples = 64

[[data.sources]]
name = "b"
[data.sources.environment]
n_anchors = 12
"#;

    fn toy() -> RunConfig {
        RunConfig::from_toml(TOY, PathBuf::new()).unwrap()
    }

    #[test]
    fn defaults_are_filled() {
        let cfg = toy();
        cfg.validate().unwrap();
        assert_eq!(cfg.data.target.samples, Some(DEFAULT_SAMPLES));
        assert_eq!(cfg.data.sources[1].environment.as_ref().unwrap().n_anchors, 12);
        assert_eq!(cfg.distill, DistillConfig::default());
    }

    #[test]
    fn canonical_form_round_trips() {
        let cfg = toy();
        let again = RunConfig::from_toml(&cfg.canonical().unwrap(), PathBuf::new()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.digest().unwrap(), again.digest().unwrap());
    }

    #[test]
    fn digest_tracks_content() {
        let a = toy();
        let b = toy().with_seed(Some(4));
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
        assert_eq!(a.digest().unwrap().len(), 64);
    }

    #[test]
    fn sub_seeds_differ_by_section() {
        let cfg = toy();
        let ea = cfg.expert_config(&cfg.data.sources[0]).seed;
        let eb = cfg.expert_config(&cfg.data.sources[1]).seed;
        assert_ne!(ea, eb);
        assert_ne!(cfg.environment_seed("a"), cfg.environment_seed("b"));
        assert_ne!(cfg.distill_config().seed, ea);
    }

    #[test]
    fn section_seeds_are_not_configurable() {
        let text = format!("{TOY}\n[expert]\nseed = 5\n");
        assert!(RunConfig::from_toml(&text, PathBuf::new()).is_err());
    }

    #[test]
    fn validation_failures() {
        let mut cfg = toy();
        cfg.data.sources[1].name = "a".into();
        assert!(cfg.validate().is_err());

        let mut cfg = toy();
        cfg.data.sources[0].csv = Some("missing.csv".into());
        cfg.data.sources[0].environment = None;
        cfg.data.sources[0].samples = None;
        assert!(cfg.validate().unwrap_err().to_string().contains("does not exist"));

        let mut cfg = toy();
        cfg.data.sources.clear();
        assert!(cfg.validate().is_err());

        assert!(RunConfig::from_toml("seed = 1\nbogus = 2\n", PathBuf::new()).is_err());
    }

    #[test]
    fn readme_example_parses() {
        let readme = include_str!("../../../README.md");
        let start = readme.find("```toml\n").unwrap() + 8;
        let end = start + readme[start..].find("```").unwrap();
        let cfg = RunConfig::from_toml(&readme[start..end], PathBuf::new()).unwrap();
        assert_eq!(cfg.data.sources.len(), 2);
        assert_eq!(cfg.expert.c_step, 5);
        assert_eq!(cfg.distill.weights, srtc::losses::LossWeights::new(3.0, 0.5, 0.5, 0.5));
    }
}
