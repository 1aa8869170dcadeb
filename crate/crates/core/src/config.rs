//! Run configuration shared by the library pipeline and the CLI.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::tcn::TcnConfig;
use crate::error::{Error, Result};
use crate::featex::{effective_window, FeatureConventions};
use crate::ingest::SegmenterConfig;
use crate::synthgen::{presets, Scenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Frames per app sample; even values are bumped to the next odd one.
    pub app_window: usize,
    /// Bursts per action sample.
    pub action_window: usize,
    #[serde(flatten)]
    pub conventions: FeatureConventions,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            app_window: 30,
            action_window: 5,
            conventions: FeatureConventions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpenMaxConfig {
    pub tail_size: usize,
    /// Rejection threshold of the app classifier.
    pub delta: f64,
    /// Rejection threshold of the action classifiers; defaults to `delta`.
    pub action_delta: Option<f64>,
}

impl Default for OpenMaxConfig {
    fn default() -> Self {
        OpenMaxConfig {
            tail_size: 20,
            delta: 0.5,
            action_delta: None,
        }
    }
}

impl OpenMaxConfig {
    pub fn action_delta(&self) -> f64 {
        self.action_delta.unwrap_or(self.delta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Share of traces (per dominant app) used for training.
    pub train_fraction: f64,
    /// Cap on app samples per class drawn from the training traces; 0 keeps all.
    pub max_app_samples_per_class: usize,
    /// Apps left out of training and treated as unknown at test time.
    pub withheld_apps: Vec<String>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            train_fraction: 0.6,
            max_app_samples_per_class: 600,
            withheld_apps: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfilerConfig {
    pub behavior_window: usize,
    /// Upper bound for the number of users; 0 uses the number of MACs seen.
    pub k_max: usize,
    /// Share of the capture period (by time) used to build profiles.
    pub profile_fraction: f64,
    /// Trailing window in seconds for profile refresh; 0 uses everything.
    pub refresh_window: f64,
}

impl Default for ProfilerConfig {
    fn default() -> Self {
        ProfilerConfig {
            behavior_window: 20,
            k_max: 0,
            profile_fraction: 0.6,
            refresh_window: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Directory with capture files, logs and the scenario description.
    pub data_dir: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub profiles: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    /// Ground truth used only for scoring profiles and identification.
    pub ground_truth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// `preset:<name>` or a path to a scenario TOML file.
    pub scenario: String,
    pub loss_rate: f64,
    pub segmenter: SegmenterConfig,
    pub features: FeatureConfig,
    pub app_model: TcnConfig,
    pub action_model: TcnConfig,
    pub openmax: OpenMaxConfig,
    pub training: TrainingConfig,
    pub profiler: ProfilerConfig,
    pub paths: PathsConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            scenario: "preset:closed_world".into(),
            loss_rate: 0.0,
            segmenter: SegmenterConfig::default(),
            features: FeatureConfig::default(),
            app_model: TcnConfig::default(),
            action_model: TcnConfig::default(),
            openmax: OpenMaxConfig::default(),
            training: TrainingConfig::default(),
            profiler: ProfilerConfig::default(),
            paths: PathsConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.segmenter.validate()?;
        self.app_model.validate()?;
        self.action_model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.features.app_window < 3 {
            return bad("features.app_window must be at least 3");
        }
        if self.features.action_window < 3 || self.features.action_window % 2 == 0 {
            return bad("features.action_window must be odd and at least 3");
        }
        if self.openmax.tail_size < 3 {
            return bad("openmax.tail_size must be at least 3");
        }
        if !(0.0..=1.0).contains(&self.openmax.delta) || !(0.0..=1.0).contains(&self.openmax.action_delta()) {
            return bad("openmax.delta and openmax.action_delta must be in [0, 1]");
        }
        if !(self.training.train_fraction > 0.0 && self.training.train_fraction < 1.0) {
            return bad("training.train_fraction must be in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.loss_rate) {
            return bad("loss_rate must be in [0, 1)");
        }
        if self.profiler.behavior_window == 0 {
            return bad("profiler.behavior_window must be positive");
        }
        if !(self.profiler.profile_fraction > 0.0 && self.profiler.profile_fraction < 1.0) {
            return bad("profiler.profile_fraction must be in (0, 1)");
        }
        Ok(())
    }

    /// App window actually used (odd).
    pub fn app_window(&self) -> usize {
        let (w, changed) = effective_window(self.features.app_window);
        if changed {
            log::warn!("app_window {} is even, using {w}", self.features.app_window);
        }
        w
    }

    pub fn resolve_scenario(&self, base: Option<&Path>) -> Result<Scenario> {
        match self.scenario.strip_prefix("preset:") {
            Some(name) => presets::by_name(name, self.seed),
            None => {
                let p = PathBuf::from(&self.scenario);
                let p = match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p,
                };
                let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                Scenario::from_toml(&text)
            }
        }
    }
}
