use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_cifar, stratified_subset, synthetic_dataset, CifarVariant, Dataset, SyntheticKind};
use crate::error::{Error, Result};
use crate::nn::probact::{DEFAULT_ALPHA, DEFAULT_BETA};
use crate::nn::{Activation, EvalMode, Granularity, ModelSpec};
use crate::optim::{OptimizerKind, StepDecay};
use crate::tensor::derive_seed;

/// Activation selection as written in config files and on the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActivationConfig {
    /// `relu`, `leaky`, `prelu`, `swish` or `probact:<fixed|single|unbound|bounded>`.
    pub name: String,
    pub sigma: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub granularity: Granularity,
}

impl Default for ActivationConfig {
    fn default() -> Self {
        Self {
            name: "relu".into(),
            sigma: None,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            granularity: Granularity::Element,
        }
    }
}

impl ActivationConfig {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }

    pub fn fixed(sigma: f64) -> Self {
        Self {
            name: "probact:fixed".into(),
            sigma: Some(sigma),
            ..Self::default()
        }
    }

    pub fn resolve(&self, eval: EvalMode) -> Result<Activation> {
        let mut act = Activation::parse(&self.name, self.sigma, self.alpha, self.beta)?;
        if let Activation::ProbAct { config } = &mut act {
            config.eval = eval;
            config.granularity = self.granularity;
        }
        Ok(act)
    }

    /// File-name friendly label.
    pub fn label(&self) -> String {
        match (self.name.as_str(), self.sigma) {
            ("probact:fixed", Some(s)) => format!("probact-fixed-{s}"),
            (n, _) => n.replace(':', "-"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    Cifar10 {
        #[serde(default)]
        dir: Option<PathBuf>,
    },
    Cifar100 {
        #[serde(default)]
        dir: Option<PathBuf>,
    },
    Synthetic {
        shape: SyntheticKind,
        train: usize,
        test: usize,
        classes: usize,
        noise: f64,
        /// Side length of the image each point is lifted to.
        lift: usize,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            shape: SyntheticKind::Blobs,
            train: 512,
            test: 256,
            classes: 4,
            noise: 0.5,
            lift: 8,
        }
    }
}

impl DatasetConfig {
    pub fn set_dir(&mut self, path: PathBuf) {
        match self {
            DatasetConfig::Cifar10 { dir } | DatasetConfig::Cifar100 { dir } => *dir = Some(path),
            DatasetConfig::Synthetic { .. } => {}
        }
    }

    /// `(train, test)` before any subsetting.
    pub fn load(&self, data_seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetConfig::Cifar10 { dir } | DatasetConfig::Cifar100 { dir } => {
                let variant = if matches!(self, DatasetConfig::Cifar10 { .. }) {
                    CifarVariant::Cifar10
                } else {
                    CifarVariant::Cifar100
                };
                let dir = dir
                    .as_deref()
                    .ok_or_else(|| Error::Config("a CIFAR dataset needs a dataset directory".into()))?;
                load_cifar(dir, variant)
            }
            DatasetConfig::Synthetic {
                shape,
                train,
                test,
                classes,
                noise,
                lift,
            } => Ok((
                synthetic_dataset(*shape, *train, *classes, *noise, derive_seed(data_seed, 0), *lift)?,
                synthetic_dataset(*shape, *test, *classes, *noise, derive_seed(data_seed, 1), *lift)?,
            )),
        }
    }
}

/// Every source of randomness in a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub weights: u64,
    pub noise: u64,
    pub subset: u64,
    pub shuffle: u64,
    /// Generator seed for synthetic datasets.
    pub data: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self::from_base(0)
    }
}

impl Seeds {
    pub fn from_base(base: u64) -> Self {
        Self {
            weights: derive_seed(base, 1),
            noise: derive_seed(base, 2),
            subset: derive_seed(base, 3),
            shuffle: derive_seed(base, 4),
            data: derive_seed(base, 5),
        }
    }
}

/// A complete description of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `vgg16`, `vgg-lite`, `mlp` or a bracketed token list.
    pub model: String,
    pub activation: ActivationConfig,
    pub dataset: DatasetConfig,
    /// Stratified fraction of the training split.
    pub fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub schedule: StepDecay,
    pub seeds: Seeds,
    pub dropout: Option<f64>,
    pub eval_mode: EvalMode,
    pub eval_batch_size: usize,
    pub histogram_bins: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: "vgg-lite".into(),
            activation: ActivationConfig::default(),
            dataset: DatasetConfig::default(),
            fraction: 1.0,
            epochs: 20,
            batch_size: 256,
            optimizer: OptimizerKind::adam(),
            schedule: StepDecay::default(),
            seeds: Seeds::default(),
            dropout: None,
            eval_mode: EvalMode::Stochastic,
            eval_batch_size: 500,
            histogram_bins: 50,
            out_dir: None,
        }
    }
}

impl RunConfig {
    /// Reads a JSON (`.json`) or TOML (anything else) config file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path.extension().and_then(|e| e.to_str()) == Some("json"))
    }

    pub fn parse(text: &str, json: bool) -> Result<Self> {
        let cfg: RunConfig = if json {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_spec()?;
        self.resolved_activation()?;
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("fraction {} not in (0, 1]", self.fraction)));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout {p} not in [0, 1)")));
            }
        }
        if !(self.schedule.base > 0.0 && self.schedule.factor > 0.0) {
            return Err(Error::Config("schedule base and factor must be positive".into()));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        self.model.parse().map_err(|e: Error| Error::Config(e.to_string()))
    }

    pub fn resolved_activation(&self) -> Result<Activation> {
        self.activation.resolve(self.eval_mode)
    }

    /// Training split (after stratified subsetting) and test split.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = self.dataset.load(self.seeds.data)?;
        let train = if self.fraction < 1.0 {
            stratified_subset(&train, self.fraction, self.seeds.subset)?
        } else {
            train
        };
        Ok((train, test))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
