//! Run configuration: a strict TOML schema, validation with actionable
//! messages, and materialization into datasets, models, and engine
//! settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_idx, make_synthetic, partition_dirichlet, Concentration, Dataset, Partition};
use crate::error::{Error, Result};
use crate::fed::{CalibrationPlan, FedConfig, Strategy};
use crate::model::{ClassifierHead, LossKind, MlpExtractor, ModelParams, Schedule};
use crate::numerics::Rng;

// RNG streams so data synthesis, partitioning, and model init never
// share a generator.
const STREAM_DATA: u64 = 0x5a3c_0010;
const STREAM_EVAL: u64 = 0x5a3c_0011;
const STREAM_PARTITION: u64 = 0x5a3c_0012;
const STREAM_MODEL: u64 = 0x5a3c_0013;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase", tag = "kind")]
pub enum DatasetConfig {
    Synthetic {
        classes: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
        /// Held-out samples per class for evaluation.
        eval_per_class: usize,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        eval_images: PathBuf,
        eval_labels: PathBuf,
    },
}

/// Dirichlet concentration: a positive float, or the string "iid".
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSpec {
    Value(f64),
    Named(IidTag),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IidTag {
    Iid,
}

impl AlphaSpec {
    pub fn to_concentration(self) -> Result<Concentration> {
        match self {
            AlphaSpec::Named(IidTag::Iid) => Ok(Concentration::Iid),
            AlphaSpec::Value(a) if a > 0.0 => Ok(Concentration::Alpha(a)),
            AlphaSpec::Value(a) => Err(Error::Config(format!(
                "partition.alpha must be positive or \"iid\", got {a}"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub clients: usize,
    pub alpha: AlphaSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; the last entry is the feature dimension l.
    pub hidden: Vec<usize>,
    pub head: HeadConfig,
    #[serde(default = "default_true")]
    pub normalize_features: bool,
    /// Logit temperature. Optional for CE (defaults to 1 with a warning).
    #[serde(default)]
    pub temperature: Option<f64>,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadConfig {
    Trainable,
    FixedRandom,
    FixedOrthonormal,
    FixedTammes,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    pub loss: LossKind,
    #[serde(default = "default_participation")]
    pub participation: f64,
}

fn default_schedule() -> Schedule {
    Schedule::Cosine
}

fn default_participation() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    #[serde(default = "default_strategy_name")]
    pub name: StrategyName,
    /// FedProx proximal coefficient.
    #[serde(default)]
    pub mu: f64,
    /// FedOpt server settings.
    #[serde(default = "default_server_lr")]
    pub server_lr: f64,
    #[serde(default)]
    pub server_momentum: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyName {
    FedAvg,
    FedProx,
    FedNova,
    FedOpt,
}

fn default_strategy_name() -> StrategyName {
    StrategyName::FedAvg
}

fn default_server_lr() -> f64 {
    1.0
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            name: StrategyName::FedAvg,
            mu: 0.0,
            server_lr: 1.0,
            server_momentum: 0.0,
        }
    }
}

impl StrategyConfig {
    pub fn to_strategy(&self) -> Strategy {
        match self.name {
            StrategyName::FedAvg => Strategy::FedAvg,
            StrategyName::FedProx => Strategy::FedProx { mu: self.mu },
            StrategyName::FedNova => Strategy::FedNova,
            StrategyName::FedOpt => Strategy::FedOpt {
                server_lr: self.server_lr,
                server_momentum: self.server_momentum,
            },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    #[serde(default = "default_plan")]
    pub plan: PlanName,
    #[serde(default = "default_interval")]
    pub interval: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// When set, `run` reports a calibration row per lambda at the end.
    #[serde(default)]
    pub lambda_grid: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanName {
    Off,
    Final,
    Every,
}

fn default_plan() -> PlanName {
    PlanName::Off
}

fn default_interval() -> usize {
    10
}

fn default_lambda() -> f64 {
    1e-3
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            plan: PlanName::Off,
            interval: default_interval(),
            lambda: default_lambda(),
            lambda_grid: Vec::new(),
        }
    }
}

impl CalibrationConfig {
    pub fn to_plan(&self) -> CalibrationPlan {
        match self.plan {
            PlanName::Off => CalibrationPlan::Off,
            PlanName::Final => CalibrationPlan::Final,
            PlanName::Every => CalibrationPlan::Every {
                interval: self.interval,
            },
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Dump normalized features of the evaluation set after the run.
    #[serde(default)]
    pub features: bool,
    #[serde(default)]
    pub features_binary: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Structural validation plus default resolution. Returns warnings to
    /// surface in the run log.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        let classes = match &self.dataset {
            DatasetConfig::Synthetic {
                classes,
                dim,
                per_class,
                spread,
                eval_per_class,
            } => {
                if *classes < 2 {
                    return Err(Error::Config("dataset.classes must be >= 2".into()));
                }
                if *dim == 0 || *per_class == 0 || *eval_per_class == 0 {
                    return Err(Error::Config(
                        "dataset.dim, per_class, and eval_per_class must be positive".into(),
                    ));
                }
                if !(*spread >= 0.0) {
                    return Err(Error::Config(format!(
                        "dataset.spread must be >= 0, got {spread}"
                    )));
                }
                Some(*classes)
            }
            DatasetConfig::Idx { .. } => None,
        };
        if self.model.hidden.is_empty() {
            return Err(Error::Config(
                "model.hidden needs at least one layer (the feature dimension)".into(),
            ));
        }
        if self.model.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("model.hidden widths must be positive".into()));
        }
        let l = *self.model.hidden.last().unwrap();
        if let Some(c) = classes {
            if matches!(
                self.model.head,
                HeadConfig::FixedOrthonormal | HeadConfig::FixedTammes
            ) && c > l
            {
                return Err(Error::Config(format!(
                    "an orthonormal head needs feature dim >= classes ({l} < {c}); \
                     raise the last model.hidden entry or switch head kind"
                )));
            }
        }
        match self.model.temperature {
            Some(t) if !(t > 0.0) => {
                return Err(Error::Config(format!(
                    "model.temperature must be positive, got {t}"
                )));
            }
            None if self.training.loss == LossKind::Ce => {
                warnings.push(
                    "model.temperature unset with CE loss; defaulting to 1.0 \
                     (accuracy is sensitive to this choice)"
                        .into(),
                );
            }
            _ => {}
        }
        if self.partition.clients == 0 {
            return Err(Error::Config("partition.clients must be positive".into()));
        }
        self.partition.alpha.to_concentration()?;
        if self.training.rounds == 0 {
            return Err(Error::Config("training.rounds must be positive".into()));
        }
        for lam in &self.calibration.lambda_grid {
            if !(*lam >= 0.0) {
                return Err(Error::Config(format!(
                    "calibration.lambda_grid entries must be >= 0, got {lam}"
                )));
            }
        }
        self.to_fed_config().validate().map_err(|e| match e {
            Error::Parameter(msg) => Error::Config(msg),
            other => other,
        })?;
        Ok(warnings)
    }

    pub fn temperature(&self) -> f64 {
        self.model.temperature.unwrap_or(1.0)
    }

    pub fn to_fed_config(&self) -> FedConfig {
        FedConfig {
            rounds: self.training.rounds,
            local_epochs: self.training.local_epochs,
            batch: self.training.batch,
            base_lr: self.training.lr,
            momentum: self.training.momentum,
            weight_decay: self.training.weight_decay,
            schedule: self.training.schedule.clone(),
            loss: self.training.loss,
            strategy: self.strategy.to_strategy(),
            participation: self.training.participation,
            seed: self.seed,
            calibration: self.calibration.to_plan(),
            lambda: self.calibration.lambda,
        }
    }

    /// Build (train, eval) datasets.
    pub fn build_datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetConfig::Synthetic {
                classes,
                dim,
                per_class,
                spread,
                eval_per_class,
            } => {
                let mut train_rng = Rng::with_stream(self.seed, STREAM_DATA);
                let train = make_synthetic(*classes, *dim, *per_class, *spread, &mut train_rng)?;
                let eval = regenerate_eval(*classes, *dim, *eval_per_class, *spread, self.seed)?;
                Ok((train, eval))
            }
            DatasetConfig::Idx {
                images,
                labels,
                eval_images,
                eval_labels,
            } => Ok((load_idx(images, labels)?, load_idx(eval_images, eval_labels)?)),
        }
    }

    pub fn build_partition(&self, train: &Dataset) -> Result<Partition> {
        partition_dirichlet(
            train,
            self.partition.clients,
            self.partition.alpha.to_concentration()?,
            &mut Rng::with_stream(self.seed, STREAM_PARTITION),
        )
    }

    pub fn build_model(&self, input_dim: usize, classes: usize) -> Result<ModelParams> {
        let mut dims = Vec::with_capacity(self.model.hidden.len() + 1);
        dims.push(input_dim);
        dims.extend_from_slice(&self.model.hidden);
        let l = *dims.last().unwrap();
        let mut rng = Rng::with_stream(self.seed, STREAM_MODEL);
        let extractor = MlpExtractor::new(&dims, &mut rng)?;
        let mut head_rng = rng.derive(1);
        let mut head = match self.model.head {
            HeadConfig::Trainable => ClassifierHead::trainable(classes, l, &mut head_rng)?,
            HeadConfig::FixedRandom => ClassifierHead::fixed_random(classes, l, &mut head_rng)?,
            HeadConfig::FixedOrthonormal => {
                ClassifierHead::orthonormal(classes, l, &mut head_rng)?
            }
            HeadConfig::FixedTammes => ClassifierHead::tammes(classes, l, &mut head_rng)?,
        };
        head.normalize_features = self.model.normalize_features;
        head.temperature = self.temperature();
        Ok(ModelParams { extractor, head })
    }
}

/// Evaluation samples around the same class means as training: the mean
/// construction consumes the data stream's first child, the noise its
/// second, so eval reuses the mean child and derives fresh noise.
fn regenerate_eval(
    classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    let data_rng = Rng::with_stream(seed, STREAM_DATA);
    let eval_rng = Rng::with_stream(seed, STREAM_EVAL);
    crate::data::make_synthetic_with(
        classes,
        dim,
        per_class,
        spread,
        &mut data_rng.derive(0),
        &mut eval_rng.derive(1),
    )
}
