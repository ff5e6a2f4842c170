//! Experiment configuration: presets, TOML overlay and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vac_core::attack::{AttackConfig, Norm, StepRule};
use vac_core::detect::DetectorMode;
use vac_core::vae::{Reduction, TrainConfig};
use vac_core::{ArchConfig, LikelihoodHead, OptimizerConfig, Pooling};

use crate::error::CliError;

pub const MNIST_EPSILONS: [f64; 5] = [0.0, 0.075, 0.15, 0.225, 0.3];
pub const FMNIST_EPSILONS: [f64; 5] = [0.0, 0.025, 0.05, 0.075, 0.1];
pub const MNIST_L1_GRID: [f64; 4] = [1e-6, 5e-7, 1e-7, 5e-8];
pub const FMNIST_L1_GRID: [f64; 4] = [1e-3, 1e-4, 1e-5, 1e-6];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Mnist,
    Fmnist,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Directory holding `train-*`/`t10k-*` IDX files (plain or `.gz`).
    pub dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
    /// Leading training samples attacked to fit the detectors.
    pub detector_train_limit: usize,
    /// Synthetic source only: images per split and image side.
    pub synthetic_count: usize,
    pub synthetic_side: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub conv_widths: Vec<usize>,
    pub latent_dim: usize,
    pub classifier_hidden: Vec<usize>,
    pub pooling: PoolingName,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingName {
    GlobalAverage,
    Flatten,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadName {
    Bernoulli,
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReductionName {
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub mc_samples: usize,
    pub beta: f64,
    pub capacity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity_ramp_iters: Option<usize>,
    pub epochs: usize,
    pub l1_strength: f64,
    pub likelihood: HeadName,
    pub reduction: ReductionName,
    pub chunk_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormName {
    Linf,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepName {
    Steepest,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub epsilons: Vec<f64>,
    pub alpha: f64,
    pub steps: usize,
    pub norm: NormName,
    pub step_rule: StepName,
    /// Samples attacked per streamed wave.
    pub wave: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectModeName {
    PerEpsilon,
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectSection {
    pub mode: DetectModeName,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub capacities: Vec<f64>,
    pub l1_strengths: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructSection {
    pub epsilon: f64,
    pub max_rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub optimizer: OptimizerSection,
    pub attack: AttackSection,
    pub detect: DetectSection,
    pub sweep: SweepSection,
    pub reconstruct: ReconstructSection,
}

impl ExperimentConfig {
    /// Built-in defaults for a preset and data source.
    pub fn preset(preset: Preset, source: DataSource) -> Self {
        let fmnist = source == DataSource::Fmnist;
        let (epsilons, l1_grid) = if fmnist {
            (FMNIST_EPSILONS.to_vec(), FMNIST_L1_GRID.to_vec())
        } else {
            (MNIST_EPSILONS.to_vec(), MNIST_L1_GRID.to_vec())
        };
        let mut cfg = Self {
            preset,
            seed: 0,
            out: PathBuf::from("runs").join(match source {
                DataSource::Mnist => "mnist",
                DataSource::Fmnist => "fmnist",
                DataSource::Synthetic => "synthetic",
            }),
            data: DataSection {
                source,
                dir: PathBuf::from(if fmnist { "data/fmnist" } else { "data/mnist" }),
                train_limit: Some(10_000),
                test_limit: Some(2_000),
                detector_train_limit: 1_000,
                synthetic_count: 256,
                synthetic_side: 8,
            },
            model: ModelSection {
                conv_widths: vec![16, 32, 48],
                latent_dim: 100,
                classifier_hidden: vec![64, 64],
                pooling: PoolingName::Flatten,
            },
            train: TrainSection {
                batch_size: 64,
                mc_samples: 1,
                beta: 10.0,
                capacity: if fmnist { 0.1 } else { 1.0 },
                capacity_ramp_iters: None,
                epochs: 10,
                l1_strength: 1e-6,
                likelihood: HeadName::Bernoulli,
                reduction: ReductionName::Mean,
                chunk_size: 16,
            },
            optimizer: OptimizerSection {
                learning_rate: 0.01,
                momentum: 0.9,
                weight_decay: 1e-6,
                lr_drop_epochs: vec![4, 8],
                lr_drop_factor: 10.0,
            },
            attack: AttackSection {
                epsilons,
                alpha: 0.01,
                steps: 40,
                norm: NormName::Linf,
                step_rule: StepName::Steepest,
                wave: 256,
            },
            detect: DetectSection {
                mode: DetectModeName::PerEpsilon,
            },
            sweep: SweepSection {
                capacities: vec![0.01, 0.1, 1.0, 10.0],
                l1_strengths: l1_grid,
            },
            reconstruct: ReconstructSection {
                epsilon: if fmnist { 0.1 } else { 0.3 },
                max_rows: 32,
            },
        };
        if preset == Preset::Paper {
            cfg.data.train_limit = None;
            cfg.data.test_limit = None;
            cfg.data.detector_train_limit = 10_000;
            cfg.model.conv_widths = vec![96, 192, 192];
            cfg.train.beta = 1000.0;
            cfg.train.epochs = 60;
            cfg.optimizer.lr_drop_epochs = vec![10, 30];
        }
        if source == DataSource::Synthetic {
            cfg.model = ModelSection {
                conv_widths: vec![4, 8],
                latent_dim: 8,
                classifier_hidden: vec![16],
                pooling: PoolingName::Flatten,
            };
            cfg.train.batch_size = 16;
            cfg.train.capacity = 1.0;
            cfg.train.epochs = 10;
            cfg.data.detector_train_limit = 64;
            cfg.attack.epsilons = vec![0.0, 0.1, 0.2, 0.3];
            cfg.attack.wave = 64;
            cfg.sweep.capacities = vec![1.0];
            cfg.sweep.l1_strengths = vec![0.0];
        }
        cfg
    }

    /// Resolves a configuration: preset defaults, then the file (if any),
    /// then command-line overrides.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let file_value = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::io(format!("reading config {}", path.display()), e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        let preset = match overrides.preset {
            Some(p) => p,
            None => match file_value.get("preset") {
                Some(v) => Preset::deserialize(v.clone())
                    .map_err(|e| CliError::Validation(format!("preset: {e}")))?,
                None => Preset::Desk,
            },
        };
        let source = match (overrides.source, file_value.get("data").and_then(|d| d.get("source"))) {
            (Some(s), _) => s,
            (None, Some(v)) => DataSource::deserialize(v.clone())
                .map_err(|e| CliError::Validation(format!("data.source: {e}")))?,
            (None, None) => DataSource::Mnist,
        };
        let base = toml::Table::try_from(Self::preset(preset, source)).expect("defaults serialize");
        let mut merged = base;
        merge(&mut merged, file_value);
        let mut cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Validation(format!("config: {e}")))?;
        cfg.preset = preset;
        cfg.data.source = source;
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &overrides.out {
            cfg.out = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |m: String| Err(CliError::Validation(m));
        if self.data.source != DataSource::Synthetic && !self.data.dir.is_dir() {
            return Err(CliError::io(
                format!("data.dir {}", self.data.dir.display()),
                std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found"),
            ));
        }
        if self.data.source == DataSource::Synthetic && (self.data.synthetic_count == 0 || self.data.synthetic_count % 2 != 0) {
            return fail("data.synthetic_count: must be even and positive".into());
        }
        if self.data.detector_train_limit == 0 {
            return fail("data.detector_train_limit: must be positive".into());
        }
        for (i, &e) in self.attack.epsilons.iter().enumerate() {
            if !(0.0..=1.0).contains(&e) {
                return fail(format!("attack.epsilons[{i}]: {e} outside [0, 1]"));
            }
        }
        if self.attack.epsilons.is_empty() {
            return fail("attack.epsilons: must not be empty".into());
        }
        if self.attack.wave == 0 {
            return fail("attack.wave: must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.reconstruct.epsilon) {
            return fail(format!("reconstruct.epsilon: {} outside [0, 1]", self.reconstruct.epsilon));
        }
        self.train_config()
            .validate()
            .map_err(|e| CliError::Validation(format!("train.{}", strip(e))))?;
        self.optimizer_config()
            .validate()
            .map_err(|e| CliError::Validation(format!("optimizer.{}", strip(e))))?;
        self.attack_config()
            .validate()
            .map_err(|e| CliError::Validation(format!("attack.{}", strip(e))))?;
        self.arch_config(self.image_side(), self.num_classes())
            .validate()
            .map_err(|e| CliError::Validation(format!("model.{}", strip(e))))?;
        Ok(())
    }

    pub fn image_side(&self) -> usize {
        match self.data.source {
            DataSource::Synthetic => self.data.synthetic_side,
            _ => 28,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.data.source {
            DataSource::Synthetic => 2,
            _ => 10,
        }
    }

    pub fn arch_config(&self, side: usize, num_classes: usize) -> ArchConfig {
        ArchConfig {
            channels: 1,
            height: side,
            width: side,
            conv_widths: self.model.conv_widths.clone(),
            latent_dim: self.model.latent_dim,
            classifier_hidden: self.model.classifier_hidden.clone(),
            num_classes,
            pooling: match self.model.pooling {
                PoolingName::GlobalAverage => Pooling::GlobalAverage,
                PoolingName::Flatten => Pooling::Flatten,
            },
        }
    }

    pub fn head(&self) -> LikelihoodHead {
        match self.train.likelihood {
            HeadName::Bernoulli => LikelihoodHead::Bernoulli,
            HeadName::Gaussian => LikelihoodHead::Gaussian,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            mc_samples: t.mc_samples,
            beta: t.beta,
            capacity: t.capacity,
            capacity_ramp_iters: t.capacity_ramp_iters,
            epochs: t.epochs,
            seed: self.seed,
            l1_strength: t.l1_strength,
            likelihood: self.head(),
            reduction: match t.reduction {
                ReductionName::Sum => Reduction::Sum,
                ReductionName::Mean => Reduction::Mean,
            },
            chunk_size: t.chunk_size,
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let o = &self.optimizer;
        OptimizerConfig {
            learning_rate: o.learning_rate,
            momentum: o.momentum,
            weight_decay: o.weight_decay,
            lr_drop_epochs: o.lr_drop_epochs.clone(),
            lr_drop_factor: o.lr_drop_factor,
        }
    }

    /// Attack settings; ε is set per grid point.
    pub fn attack_config(&self) -> AttackConfig {
        let a = &self.attack;
        AttackConfig {
            epsilon: 0.0,
            alpha: a.alpha,
            steps: a.steps,
            norm: match a.norm {
                NormName::Linf => Norm::Linf,
                NormName::L2 => Norm::L2,
            },
            step_rule: match a.step_rule {
                StepName::Steepest => StepRule::Steepest,
                StepName::Raw => StepRule::Raw,
            },
            lower: 0.0,
            upper: 1.0,
        }
    }

    pub fn detector_mode(&self) -> DetectorMode {
        match self.detect.mode {
            DetectModeName::PerEpsilon => DetectorMode::PerEpsilon,
            DetectModeName::Pooled => DetectorMode::Pooled,
        }
    }

    /// ε grid sorted ascending with duplicates removed.
    pub fn epsilons(&self) -> Vec<f64> {
        let mut e = self.attack.epsilons.clone();
        e.sort_by(f64::total_cmp);
        e.dedup();
        e
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub source: Option<DataSource>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

fn strip(e: vac_core::VacError) -> String {
    match e {
        vac_core::VacError::Config(m) => m.split_once(": ").map_or(m.clone(), |(_, rest)| rest.to_string()),
        other => other.to_string(),
    }
}

/// Recursively overlays `over` onto `base`.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for p in [Preset::Desk, Preset::Paper] {
            for s in [DataSource::Mnist, DataSource::Fmnist, DataSource::Synthetic] {
                let cfg = ExperimentConfig::preset(p, s);
                let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
                assert_eq!(back, cfg);
            }
        }
    }

    #[test]
    fn paper_preset_keeps_published_optimizer() {
        let cfg = ExperimentConfig::preset(Preset::Paper, DataSource::Mnist);
        assert_eq!(cfg.train.epochs, 60);
        assert_eq!(cfg.optimizer.lr_drop_epochs, vec![10, 30]);
        assert_eq!(cfg.optimizer.learning_rate, 0.01);
        assert_eq!(cfg.optimizer.weight_decay, 1e-6);
        assert_eq!(cfg.attack.steps, 40);
    }

    #[test]
    fn overlay_keeps_unset_fields() {
        let mut base = toml::Table::try_from(ExperimentConfig::preset(Preset::Desk, DataSource::Synthetic)).unwrap();
        let over: toml::Table = "[train]\nepochs = 3\n".parse().unwrap();
        merge(&mut base, over);
        let cfg: ExperimentConfig = base.try_into().unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 16);
    }
}
