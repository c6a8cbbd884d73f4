//! Experiment configuration: a single JSON file drives every subcommand.
//!
//! Sections mirror the library's own config types. Hyperparameter fields are
//! optional and fall back to the library defaults, so a minimal file needs
//! only `model_spec`, `dataset`, and `seed`.

use std::path::{Path, PathBuf};

use samurai_core::apc::{CounterConfig, MetricFamily, TimingMode};
use samurai_core::attack::AttackConfig;
use samurai_core::network::{ModelSpec, TrainConfig};
use samurai_core::tanto::{DetectorKind, DetectorSettings};
use samurai_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Where the labeled inputs come from. Tagged by `source`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Standard big-endian IDX image/label files, pixels scaled to [0, 1].
    MnistIdx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// Text rows of `label,pixel,pixel,...` reshaped to the model input.
    Csv {
        train: PathBuf,
        test: PathBuf,
        classes: usize,
    },
    /// Seeded 2-D Gaussian blobs, two classes centered at (1,1) and (-1,-1).
    SyntheticBlobs {
        train_count: usize,
        test_count: usize,
        spread: f64,
    },
}

impl DatasetConfig {
    pub fn label(&self) -> &'static str {
        match self {
            DatasetConfig::MnistIdx { .. } => "mnist-idx",
            DatasetConfig::Csv { .. } => "csv",
            DatasetConfig::SyntheticBlobs { .. } => "synthetic-blobs",
        }
    }

    fn referenced_paths(&self) -> Vec<&Path> {
        match self {
            DatasetConfig::MnistIdx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => vec![train_images, train_labels, test_images, test_labels],
            DatasetConfig::Csv { train, test, .. } => vec![train, test],
            DatasetConfig::SyntheticBlobs { .. } => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
}

impl TrainSection {
    pub fn resolve(&self, seed: u64) -> Result<TrainConfig> {
        TrainConfig::new(
            self.epochs.unwrap_or(20),
            self.learning_rate.unwrap_or(0.1),
            self.batch_size.unwrap_or(16),
            seed,
        )
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterSection {
    /// Absent means every family.
    pub families: Option<Vec<MetricFamily>>,
    /// Absent means every layer.
    pub include_layers: Option<Vec<usize>>,
}

impl CounterSection {
    pub fn resolve(&self, timing: TimingMode) -> Result<CounterConfig> {
        match &self.families {
            Some(families) => {
                CounterConfig::new(families.iter().copied(), self.include_layers.clone(), timing)
            }
            None => CounterConfig::new(MetricFamily::ALL, self.include_layers.clone(), timing),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub overshoot: Option<f64>,
    pub max_iterations: Option<usize>,
    pub candidate_class_count: Option<usize>,
}

impl AttackSection {
    pub fn resolve(&self) -> Result<AttackConfig> {
        let defaults = AttackConfig::default();
        AttackConfig::new(
            self.overshoot.unwrap_or(defaults.overshoot()),
            self.max_iterations.unwrap_or(defaults.max_iterations()),
            self.candidate_class_count
                .unwrap_or(defaults.candidate_class_count()),
        )
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    pub kind: Option<DetectorKind>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub hidden_width: Option<usize>,
    pub batch_size: Option<usize>,
    pub threshold: Option<f64>,
    pub holdout_fraction: Option<f64>,
}

impl DetectorSection {
    pub fn kind(&self) -> DetectorKind {
        self.kind.unwrap_or(DetectorKind::LogisticRegression)
    }

    pub fn holdout_fraction(&self) -> f64 {
        self.holdout_fraction.unwrap_or(0.2)
    }

    pub fn resolve(&self) -> Result<(DetectorKind, DetectorSettings)> {
        let kind = self.kind();
        let defaults = DetectorSettings::defaults_for(kind);
        let settings = DetectorSettings::new(
            self.epochs.unwrap_or(defaults.epochs()),
            self.learning_rate.unwrap_or(defaults.learning_rate()),
            self.weight_decay.unwrap_or(defaults.weight_decay()),
            self.hidden_width.unwrap_or(defaults.hidden_width()),
            self.batch_size.unwrap_or(defaults.batch_size()),
            self.threshold.unwrap_or(defaults.threshold()),
        )?;
        Ok((kind, settings))
    }
}

fn default_timing() -> TimingMode {
    TimingMode::Deterministic
}

fn default_out_dir() -> PathBuf {
    PathBuf::from(".")
}

/// One experiment, end to end. `seed` is mandatory so no run is accidentally
/// irreproducible; `--seed`, `--timing`, and `--out` override their fields.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Path to a model architecture JSON file.
    pub model_spec: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub counters: CounterSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub detector: DetectorSection,
    pub seed: u64,
    #[serde(default = "default_timing")]
    pub timing: TimingMode,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parses the file and checks that every referenced path exists, so a
    /// typo'd path fails up front instead of mid-pipeline.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ExperimentConfig = serde_json::from_str(&text).map_err(|e| {
            Error::format(format!("config file {}: {e}", path.display()))
        })?;
        config.check_paths()?;
        Ok(config)
    }

    fn check_paths(&self) -> Result<()> {
        let mut paths = vec![self.model_spec.as_path()];
        paths.extend(self.dataset.referenced_paths());
        for p in paths {
            std::fs::metadata(p).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }

    pub fn load_model_spec(&self) -> Result<ModelSpec> {
        let text =
            std::fs::read_to_string(&self.model_spec).map_err(|e| Error::io(&self.model_spec, e))?;
        let spec: ModelSpec = serde_json::from_str(&text).map_err(|e| {
            Error::format(format!(
                "model spec {}: {e}",
                self.model_spec.display()
            ))
        })?;
        spec.validate()?;
        Ok(spec)
    }
}
