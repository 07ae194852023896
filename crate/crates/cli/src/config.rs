//! Experiment configuration: per-experiment defaults, a JSON document merged
//! on top, then command-line overrides.

use std::path::{Path, PathBuf};

use abnn::data::{KernelKind, KernelSpec};
use abnn::train::TrainConfig;
use abnn::Activation;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    ElboTable,
    #[serde(rename = "regress_1d")]
    Regress1d,
    ImageComplete,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelName {
    Mfvi,
    Amfvi,
    Povi,
    Apovi,
    Cnp,
    Convcnp,
    Lininterp,
}

impl std::str::FromStr for ModelName {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| CliError::Config(format!("unknown model {s:?}")))
    }
}

impl std::fmt::Display for ModelName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = serde_json::to_value(self).expect("unit enum");
        f.write_str(v.as_str().expect("string tag"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveName {
    Elbo,
    Npml,
    Npvi,
}

impl From<ObjectiveName> for abnn::ObjectiveKind {
    fn from(o: ObjectiveName) -> Self {
        match o {
            ObjectiveName::Elbo => Self::Elbo,
            ObjectiveName::Npml => Self::Npml,
            ObjectiveName::Npvi => Self::Npvi,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationName {
    Relu,
    Tanh,
}

impl From<ActivationName> for Activation {
    fn from(a: ActivationName) -> Self {
        match a {
            ActivationName::Relu => Activation::Relu,
            ActivationName::Tanh => Activation::Tanh,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTask {
    Gp,
    Cubic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    /// Zero skips training altogether.
    pub max_epochs: usize,
    pub early_stop_start: usize,
    pub patience: usize,
    pub smoothing: usize,
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            early_stop_start: self.early_stop_start,
            patience: self.patience,
            smoothing: self.smoothing,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub kind: String,
    pub lengthscale: f64,
    pub variance: f64,
    pub period: f64,
}

impl KernelSection {
    pub fn spec(&self) -> Result<KernelSpec> {
        let kind: KernelKind = self.kind.parse()?;
        if self.lengthscale <= 0.0 || self.variance <= 0.0 || self.period <= 0.0 {
            return Err(CliError::Config("kernel hyperparameters must be positive".into()));
        }
        Ok(KernelSpec {
            kind,
            lengthscale: self.lengthscale,
            variance: self.variance,
            period: self.period,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub kernel: KernelSection,
    /// Inclusive range of points per task.
    pub n_range: [usize; 2],
    pub interval: [f64; 2],
    pub noise_sd: f64,
    pub test_tasks: usize,
    /// Held-out task shown by the regression figure.
    pub eval_task: EvalTask,
    /// Evaluation grid of the regression figure.
    pub grid: [f64; 2],
    pub grid_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSection {
    /// IDX image file; a synthetic digit set is rendered when absent.
    pub source: Option<PathBuf>,
    /// Side length after mean-pooling.
    pub size: usize,
    pub binarise: bool,
    pub train_p: [f64; 2],
    pub test_p: [f64; 2],
    pub test_images: usize,
    /// Images rendered when no source file is given.
    pub synthetic_count: usize,
    /// Draw a fresh mask for every training image each epoch instead of
    /// fixing one mask per image up front.
    pub resample_masks: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvCnpSection {
    pub points_per_unit: f64,
    pub lengthscale: f64,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub embedding: usize,
    /// On-grid variant: channels of every layer.
    pub grid_channels: usize,
    pub head_hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub model: ModelName,
    /// Training objective; when absent, ELBO for Bayesian networks on
    /// regression, NPML otherwise.
    pub objective: Option<ObjectiveName>,
    /// Parameters are restored from this checkpoint instead of trained.
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
    /// Number of training tasks `|Ξ|`; 0 trains on each test task in turn.
    pub meta_size: usize,
    pub repetitions: usize,
    /// Weight samples per objective evaluation.
    pub mc_samples: usize,
    /// Samples for held-out ELBO estimates and predictions.
    pub eval_samples: usize,
    pub hidden: Vec<usize>,
    pub inference_hidden: Vec<usize>,
    pub activation: ActivationName,
    pub prior_var: f64,
    pub noise_var: f64,
    pub train_noise: bool,
    pub num_inducing: usize,
    pub train: TrainSection,
    /// Training schedule of per-task POVI fits in the ELBO table.
    pub povi_train: TrainSection,
    pub data: DataSection,
    pub image: ImageSection,
    pub convcnp: ConvCnpSection,
}

impl ExperimentConfig {
    /// Desk-scale defaults for `experiment`.
    pub fn defaults(experiment: Experiment) -> Self {
        let base = Self {
            experiment,
            model: ModelName::Apovi,
            objective: None,
            checkpoint: None,
            seed: 0,
            out: PathBuf::from("out"),
            meta_size: 10,
            repetitions: 5,
            mc_samples: 5,
            eval_samples: 100,
            hidden: vec![16, 16],
            inference_hidden: vec![50, 50],
            activation: ActivationName::Relu,
            prior_var: 1.0,
            noise_var: 0.05,
            train_noise: false,
            num_inducing: 10,
            train: TrainSection {
                lr: 1e-3,
                batch_size: 5,
                max_epochs: 1000,
                early_stop_start: 300,
                patience: 150,
                smoothing: 150,
            },
            povi_train: TrainSection {
                lr: 5e-3,
                batch_size: 1,
                max_epochs: 5000,
                early_stop_start: 1000,
                patience: 500,
                smoothing: 500,
            },
            data: DataSection {
                kernel: KernelSection {
                    kind: "se".into(),
                    lengthscale: 0.5,
                    variance: 1.0,
                    period: 1.0,
                },
                n_range: [10, 50],
                interval: [-2.0, 2.0],
                noise_sd: 0.05,
                test_tasks: 5,
                eval_task: EvalTask::Gp,
                grid: [-3.0, 3.0],
                grid_points: 200,
            },
            image: ImageSection {
                source: None,
                size: 16,
                binarise: true,
                train_p: [0.05, 0.95],
                test_p: [0.1, 0.3],
                test_images: 10,
                synthetic_count: 200,
                resample_masks: true,
            },
            convcnp: ConvCnpSection {
                points_per_unit: 32.0,
                lengthscale: 0.096,
                channels: vec![16, 32, 16],
                kernel: 11,
                embedding: 32,
                grid_channels: 16,
                head_hidden: 32,
            },
        };
        match experiment {
            Experiment::ElboTable => base,
            Experiment::Regress1d => Self {
                hidden: vec![50, 50],
                noise_var: 0.01,
                train_noise: true,
                repetitions: 1,
                train: TrainSection {
                    max_epochs: 500,
                    early_stop_start: 200,
                    patience: 100,
                    smoothing: 100,
                    ..base.train.clone()
                },
                data: DataSection {
                    n_range: [10, 20],
                    ..base.data.clone()
                },
                ..base
            },
            Experiment::ImageComplete => Self {
                hidden: vec![32, 32],
                inference_hidden: vec![64, 64],
                repetitions: 3,
                mc_samples: 2,
                train: TrainSection {
                    lr: 1e-3,
                    batch_size: 4,
                    max_epochs: 1000,
                    early_stop_start: 300,
                    patience: 150,
                    smoothing: 50,
                },
                ..base
            },
        }
    }

    /// Defaults overlaid with a partial JSON document.
    pub fn from_json(experiment: Experiment, json: &str) -> Result<Self> {
        let overlay: Value = serde_json::from_str(json)?;
        let mut merged = serde_json::to_value(Self::defaults(experiment))?;
        merge(&mut merged, overlay);
        let cfg: Self = serde_json::from_value(merged)?;
        if cfg.experiment != experiment {
            return Err(CliError::Config(format!(
                "config is for {:?} but the command runs {experiment:?}",
                cfg.experiment
            )));
        }
        Ok(cfg)
    }

    pub fn load(experiment: Experiment, path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::from_json(experiment, &std::fs::read_to_string(p)?),
            None => Ok(Self::defaults(experiment)),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn objective(&self) -> ObjectiveName {
        self.objective.unwrap_or(match (self.experiment, self.model) {
            (Experiment::ImageComplete, _) | (_, ModelName::Cnp | ModelName::Convcnp) => ObjectiveName::Npml,
            _ => ObjectiveName::Elbo,
        })
    }

    pub fn is_neural_process(&self) -> bool {
        matches!(self.model, ModelName::Cnp | ModelName::Convcnp)
    }

    /// Training schedule of the configured model.
    pub fn train_section(&self) -> &TrainSection {
        if self.model == ModelName::Povi {
            &self.povi_train
        } else {
            &self.train
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        self.train_section().to_train_config(seed)
    }

    pub fn validate(&self) -> Result<()> {
        use Experiment::*;
        use ModelName::*;
        let allowed: &[ModelName] = match self.experiment {
            ElboTable => &[Povi, Apovi],
            Regress1d => &[Amfvi, Apovi, Cnp, Convcnp],
            ImageComplete => &[Apovi, Convcnp, Lininterp],
        };
        if !allowed.contains(&self.model) {
            return Err(CliError::Config(format!(
                "model {} is not available for {:?}",
                self.model, self.experiment
            )));
        }
        let objective = self.objective();
        if self.is_neural_process() && objective != ObjectiveName::Npml {
            return Err(CliError::Config("neural processes are trained with npml".into()));
        }
        if self.experiment == ImageComplete && self.model == Convcnp && objective != ObjectiveName::Npml {
            return Err(CliError::Config("the image ConvCNP is trained with npml".into()));
        }
        if self.experiment == ElboTable && objective != ObjectiveName::Elbo {
            return Err(CliError::Config("the ELBO table trains with the elbo objective".into()));
        }
        if self.experiment == Regress1d && self.meta_size == 0 {
            return Err(CliError::Config("regression meta-training needs at least one task".into()));
        }
        if self.experiment == ImageComplete && self.model != Lininterp && self.meta_size == 0 {
            return Err(CliError::Config("image meta-training needs at least one image".into()));
        }
        if self.repetitions == 0 || self.mc_samples == 0 || self.eval_samples < 2 {
            return Err(CliError::Config("repetitions, mc_samples >= 1 and eval_samples >= 2 required".into()));
        }
        if self.prior_var <= 0.0 || self.noise_var <= 0.0 {
            return Err(CliError::Config("variances must be positive".into()));
        }
        let [lo, hi] = self.data.n_range;
        if lo == 0 || lo > hi {
            return Err(CliError::Config(format!("bad points-per-task range {lo}..={hi}")));
        }
        if self.train_section().max_epochs > 0 {
            self.train_config(self.seed).validate()?;
        }
        self.data.kernel.spec()?;
        for [a, b] in [self.image.train_p, self.image.test_p] {
            if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a > b {
                return Err(CliError::Config(format!("bad mask probability range [{a}, {b}]")));
            }
        }
        if self.image.size < 2 {
            return Err(CliError::Config("images must be at least 2x2".into()));
        }
        Ok(())
    }
}

/// Recursively overwrites `base` with the fields present in `overlay`.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
