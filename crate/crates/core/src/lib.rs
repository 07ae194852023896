//! Amortised variational inference for Bayesian neural networks, with
//! pseudo-observation posteriors, mean-field baselines and neural-process
//! models, all running on a small reverse-mode autodiff core.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this file fix the double-precision instantiation used by the
//! experiments.

pub mod bnn;
pub mod conv;
pub mod data;
pub mod distributions;
pub mod error;
pub mod linalg;
pub mod networks;
pub mod noise;
pub mod np;
pub mod objectives;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use bnn::{BnnConfig, BnnModel, Likelihood, PosteriorKind, WeightSample};
pub use distributions::{DiagGaussian, FullGaussian, GaussianFactorSet};
pub use error::{Error, Result};
pub use noise::EpsSource;
pub use objectives::{MetaModel, ObjectiveKind};
pub use params::{Adam, Bound, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::Tensor;
pub use train::{meta_train, TrainConfig, TrainingRun};

pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
