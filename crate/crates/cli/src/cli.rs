//! Argument parsing and command dispatch for the `abnn` binary.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::load_checkpoint;
use crate::config::{Experiment, ExperimentConfig, ModelName};
use crate::error::Result;
use crate::experiments::{run_elbo_table, run_image_complete, run_regress_1d, run_train};

#[derive(Debug, Parser)]
#[command(name = "abnn", version, about = "Amortised Bayesian neural network experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Meta-train a model and save a checkpoint plus training history.
    Train {
        /// Experiment whose data and defaults are used.
        #[arg(long, value_enum, default_value_t = ExperimentArg::Regress1d)]
        experiment: ExperimentArg,
        #[command(flatten)]
        common: Common,
    },
    /// Held-out ELBO of POVI / APOVI networks.
    ElboTable(Common),
    /// Meta-trained 1-D regression with a predictive plot.
    #[command(name = "regress-1d")]
    Regress1d(Common),
    /// Masked image completion.
    CompleteImage(Common),
    /// Print the tensors stored in a checkpoint.
    InspectCheckpoint { path: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExperimentArg {
    ElboTable,
    #[value(name = "regress-1d")]
    Regress1d,
    CompleteImage,
}

impl From<ExperimentArg> for Experiment {
    fn from(e: ExperimentArg) -> Self {
        match e {
            ExperimentArg::ElboTable => Experiment::ElboTable,
            ExperimentArg::Regress1d => Experiment::Regress1d,
            ExperimentArg::CompleteImage => Experiment::ImageComplete,
        }
    }
}

/// Flags shared by every experiment; each overrides the JSON config.
#[derive(Clone, Debug, Default, Args)]
pub struct Common {
    /// JSON document merged over the experiment defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// mfvi, amfvi, povi, apovi, cnp, convcnp or lininterp.
    #[arg(long)]
    pub model: Option<ModelName>,
    /// Number of meta-training tasks.
    #[arg(long)]
    pub meta_size: Option<usize>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Restore parameters from this checkpoint instead of training.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

impl Common {
    pub fn resolve(&self, experiment: Experiment) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(experiment, self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(m) = self.model {
            cfg.model = m;
        }
        if let Some(n) = self.meta_size {
            cfg.meta_size = n;
        }
        if let Some(r) = self.repetitions {
            cfg.repetitions = r;
        }
        if let Some(e) = self.epochs {
            for t in [&mut cfg.train, &mut cfg.povi_train] {
                t.max_epochs = e;
                t.early_stop_start = t.early_stop_start.min(e);
            }
        }
        if let Some(c) = &self.checkpoint {
            cfg.checkpoint = Some(c.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs one command and returns the text to print.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train { experiment, common } => {
            let cfg = common.resolve(experiment.into())?;
            let trained = run_train(&cfg)?;
            Ok(format!(
                "trained {} for {} epochs (final objective {:.4}); checkpoint in {}\n",
                cfg.model,
                trained.run.epochs(),
                trained.run.raw.last().copied().unwrap_or(f64::NAN),
                cfg.out.join("model.ckpt").display()
            ))
        }
        Command::ElboTable(common) => Ok(run_elbo_table(&common.resolve(Experiment::ElboTable)?)?.summary()),
        Command::Regress1d(common) => {
            let cfg = common.resolve(Experiment::Regress1d)?;
            let out = run_regress_1d(&cfg)?;
            Ok(format!("{}predictions written to {}\n", out.metrics.summary(), cfg.out.display()))
        }
        Command::CompleteImage(common) => Ok(run_image_complete(&common.resolve(Experiment::ImageComplete)?)?.summary()),
        Command::InspectCheckpoint { path } => Ok(load_checkpoint(&path)?.describe()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_defaults() {
        let cli = Cli::try_parse_from([
            "abnn", "regress-1d", "--model", "convcnp", "--meta-size", "7", "--seed", "3", "--epochs", "50",
        ])
        .unwrap();
        let Command::Regress1d(common) = cli.command else { panic!("wrong command") };
        let cfg = common.resolve(Experiment::Regress1d).unwrap();
        assert_eq!((cfg.model, cfg.meta_size, cfg.seed, cfg.train.max_epochs), (ModelName::Convcnp, 7, 3, 50));
        assert!(cfg.train.early_stop_start <= 50);
    }

    #[test]
    fn incompatible_model_is_rejected() {
        let cli = Cli::try_parse_from(["abnn", "elbo-table", "--model", "lininterp"]).unwrap();
        let Command::ElboTable(common) = cli.command else { panic!("wrong command") };
        assert!(common.resolve(Experiment::ElboTable).is_err());
        assert!(Cli::try_parse_from(["abnn", "complete-image", "--model", "resnet"]).is_err());
    }

    #[test]
    fn json_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 11, "meta_size": 4, "train": {"lr": 0.01}}"#).unwrap();
        let common = Common { config: Some(path), meta_size: Some(9), ..Common::default() };
        let cfg = common.resolve(Experiment::ImageComplete).unwrap();
        assert_eq!((cfg.seed, cfg.meta_size, cfg.train.lr), (11, 9, 0.01));
    }
}
