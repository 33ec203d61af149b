use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunError;
use crate::calibration::CalibrationConfig;
use crate::decision::{EnsembleConfig, IndeterminatePolicy};
use crate::evaluation::{MetricConfig, DEFAULT_ALPHA};
use crate::prompting::TemplateRegistry;
use crate::scoring::{BackendProfile, Separation};

fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_workers() -> usize {
    1
}
fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_true() -> bool {
    true
}

/// Location of a dataset in canonical layout (see `corpus::Dataset::write_canonical`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignificanceConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// `[baseline, other]` source ids. Empty means the first source against
    /// every other source.
    #[serde(default)]
    pub pairs: Vec<[String; 2]>,
}

impl Default for SignificanceConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            pairs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeparationPreset {
    #[default]
    Default,
    Wide,
}

/// Margin models for synthetic backends: a preset name or explicit models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeparationSpec {
    Preset(SeparationPreset),
    Custom(Separation),
}

impl Default for SeparationSpec {
    fn default() -> Self {
        SeparationSpec::Preset(SeparationPreset::Default)
    }
}

impl SeparationSpec {
    pub fn resolve(&self) -> Separation {
        match self {
            SeparationSpec::Preset(SeparationPreset::Default) => Separation::default(),
            SeparationSpec::Preset(SeparationPreset::Wide) => Separation::wide(),
            SeparationSpec::Custom(s) => *s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Draw margins by the dataset's labels (seeds count as included).
    #[serde(default = "default_true")]
    pub planted: bool,
    #[serde(default)]
    pub separation: SeparationSpec,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            planted: true,
            separation: SeparationSpec::default(),
        }
    }
}

/// Everything one experiment needs. Loaded from TOML; relative paths are
/// resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub backends: Vec<BackendProfile>,
    /// Extra prompt templates (JSONL) on top of the built-ins.
    #[serde(default)]
    pub templates: Option<PathBuf>,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub ensembles: Vec<EnsembleConfig>,
    #[serde(default)]
    pub metrics: MetricConfig,
    #[serde(default)]
    pub significance: SignificanceConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Score cache; defaults to `scores.jsonl` in the output directory.
    #[serde(default)]
    pub cache: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    /// Topics processed in parallel.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub indeterminate_policy: IndeterminatePolicy,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
}

impl ExperimentConfig {
    /// Minimal config over a dataset directory with the given backends.
    pub fn new(data_dir: impl Into<PathBuf>, backends: Vec<BackendProfile>) -> Self {
        Self {
            data: DataConfig { dir: data_dir.into() },
            backends,
            templates: None,
            calibration: CalibrationConfig::default(),
            ensembles: Vec::new(),
            metrics: MetricConfig::default(),
            significance: SignificanceConfig::default(),
            output_dir: default_output(),
            cache: None,
            seed: 0,
            workers: default_workers(),
            indeterminate_policy: IndeterminatePolicy::default(),
            synthetic: SyntheticConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        toml::from_str(text).map_err(|e| RunError::Config(e.message().to_string()))
    }

    /// Reads a TOML config, or the config snapshot of a run manifest when
    /// the file is JSON.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, RunError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = if path.extension().is_some_and(|e| e == "json") {
            #[derive(Deserialize)]
            struct Snapshot {
                config: ExperimentConfig,
            }
            serde_json::from_str::<Snapshot>(&text)
                .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?
                .config
        } else {
            Self::from_toml(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?
        };
        // Absolute, so a manifest written elsewhere still points at the
        // same files.
        let parent = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let base = std::path::absolute(parent).unwrap_or_else(|_| parent.to_path_buf());
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.dir);
        fix(&mut self.output_dir);
        if let Some(p) = self.cache.as_mut() {
            fix(p);
        }
        if let Some(p) = self.templates.as_mut() {
            fix(p);
        }
    }

    pub fn cache_path(&self) -> PathBuf {
        self.cache
            .clone()
            .unwrap_or_else(|| self.output_dir.join("scores.jsonl"))
    }

    pub fn template_registry(&self) -> Result<TemplateRegistry, RunError> {
        match &self.templates {
            Some(p) => TemplateRegistry::load(p).map_err(|e| RunError::Config(e.to_string())),
            None => Ok(TemplateRegistry::default()),
        }
    }

    /// Backend names followed by ensemble ids.
    pub fn source_ids(&self) -> Vec<String> {
        self.backends
            .iter()
            .map(|b| b.name.clone())
            .chain(self.ensembles.iter().map(|e| e.id.clone()))
            .collect()
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let cfg = |m: String| Err(RunError::Config(m));
        if self.backends.is_empty() {
            return cfg("at least one backend is required".into());
        }
        if self.workers == 0 {
            return cfg("workers must be at least 1".into());
        }
        let registry = self.template_registry()?;
        let mut names = HashSet::new();
        for b in &self.backends {
            b.validate().map_err(RunError::Config)?;
            if !names.insert(b.name.as_str()) {
                return cfg(format!("duplicate backend name {}", b.name));
            }
            registry
                .get(&b.template)
                .map_err(|e| RunError::Config(format!("{}: {e}", b.name)))?;
        }
        for e in &self.ensembles {
            e.validate().map_err(|e| RunError::Config(e.to_string()))?;
            if !names.insert(e.id.as_str()) {
                return cfg(format!("ensemble id {} is already used", e.id));
            }
            if let Some(m) = e
                .method_ids
                .iter()
                .find(|m| !self.backends.iter().any(|b| &b.name == *m))
            {
                return cfg(format!("ensemble {}: unknown method {m}", e.id));
            }
        }
        self.calibration
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))?;
        let m = &self.metrics;
        if m.beta.is_nan() || m.beta <= 0.0 {
            return cfg("metrics.beta must be positive".into());
        }
        if !(m.wss_recall > 0.0 && m.wss_recall <= 1.0) {
            return cfg("metrics.wss_recall must be in (0, 1]".into());
        }
        if !(self.significance.alpha > 0.0 && self.significance.alpha < 1.0) {
            return cfg("significance.alpha must be in (0, 1)".into());
        }
        for [a, b] in &self.significance.pairs {
            for id in [a, b] {
                if !names.contains(id.as_str()) {
                    return cfg(format!("significance pair references unknown source {id}"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::BackendKind;

    const EXAMPLE: &str = r#"
seed = 7
workers = 2
output_dir = "out"

[data]
dir = "data"

[[backends]]
name = "syn-a"
kind = "synthetic"

[[backends]]
name = "syn-b"
kind = "synthetic"
template = "alpaca"

[[ensembles]]
id = "both"
method_ids = ["syn-a", "syn-b"]

[calibration]
target_recall = 1.0
extrapolation_variant = "pooled_median"

[synthetic]
separation = "wide"
"#;

    #[test]
    fn parses_and_validates() {
        let cfg = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.backends[1].template, "alpaca");
        assert_eq!(cfg.backends[0].kind, BackendKind::Synthetic);
        assert_eq!(cfg.synthetic.separation.resolve(), Separation::wide());
        assert_eq!(cfg.source_ids(), ["syn-a", "syn-b", "both"]);
        assert_eq!(cfg.metrics.beta, 3.0);
    }

    #[test]
    fn custom_separation() {
        let text = EXAMPLE.replace(
            "separation = \"wide\"",
            "separation = { included = { mean = 0.5, sd = 0.1, lo = 0.0, hi = 1.0 }, excluded = { mean = -0.5, sd = 0.1, lo = -1.0, hi = 0.0 } }",
        );
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.synthetic.separation.resolve().included.mean, 0.5);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = |edit: &dyn Fn(&mut ExperimentConfig)| {
            let mut cfg = ExperimentConfig::from_toml(EXAMPLE).unwrap();
            edit(&mut cfg);
            assert!(matches!(cfg.validate(), Err(RunError::Config(_))));
        };
        bad(&|c| c.backends.clear());
        bad(&|c| c.backends[1].name = "syn-a".into());
        bad(&|c| c.ensembles[0].method_ids[1] = "nope".into());
        bad(&|c| c.backends[0].template = "nope".into());
        bad(&|c| c.calibration.mode = crate::calibration::CalibrationMode::Fixed);
        bad(&|c| c.significance.pairs.push(["syn-a".into(), "x".into()]));
        bad(&|c| c.workers = 0);
        bad(&|c| c.backends[0].kind = BackendKind::Openai);
        assert!(ExperimentConfig::from_toml("[data]\ndir='d'\nbackends=[]\nbogus=1").is_err());
    }

    #[test]
    fn relative_paths_follow_config_file() {
        let mut cfg = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        cfg.resolve_paths(Path::new("/exp"));
        assert_eq!(cfg.data.dir, Path::new("/exp/data"));
        assert_eq!(cfg.cache_path(), Path::new("/exp/out/scores.jsonl"));
    }
}
