//! Training objectives: the ELBO, neural-process maximum likelihood (NPML)
//! and neural-process variational inference (NPVI).
//!
//! All objectives are maximised and return scalar tape variables.

use rand::Rng;

use crate::bnn::{BnnModel, PosteriorKind};
use crate::data::Task;
use crate::distributions::{kl_diag, DiagGaussian};
use crate::error::{Error, Result};
use crate::noise::EpsSource;
use crate::np::{np_log_likelihood, Cnp, ConvCnp1d, ConvCnp2d};
use crate::params::Bound;
use crate::scalar::Scalar;
use crate::tape::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveKind {
    Elbo,
    Npml,
    Npvi,
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elbo" => Ok(Self::Elbo),
            "npml" => Ok(Self::Npml),
            "npvi" => Ok(Self::Npvi),
            other => Err(Error::Contract(format!("unknown objective {other:?}"))),
        }
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Elbo => "elbo",
            Self::Npml => "npml",
            Self::Npvi => "npvi",
        })
    }
}

fn check_samples(m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::Contract("at least one Monte Carlo sample is required".into()));
    }
    Ok(())
}

/// Monte Carlo ELBO on `task`. Factorised posteriors use the analytic KL to
/// the prior; layerwise posteriors average `log p(y|W) + log p(W) − log q(W)`.
pub fn elbo_objective<'t, T: Scalar>(
    b: &Bound<'t, T>,
    model: &BnnModel,
    task: &Task<T>,
    samples: usize,
    eps: EpsSource,
) -> Result<Var<'t, T>> {
    check_samples(samples)?;
    if task.is_empty() {
        return Err(Error::Data("ELBO of an empty task".into()));
    }
    let tape = b.tape();
    let scale = T::lit(1.0 / samples as f64);
    let mut total = tape.scalar(T::zero());
    match model.kind() {
        PosteriorKind::Mfvi | PosteriorKind::Amfvi => {
            let q = model.diag_posterior(b, task)?.expect("factorised posterior");
            for m in 0..samples {
                let ws = crate::bnn::diag_sample(&q, &model.cfg, eps, m)?;
                total = total.add(model.log_likelihood(b, &ws.weights, task)?)?;
            }
            let prior = DiagGaussian::isotropic(tape, q.len(), T::lit(model.cfg.prior_var));
            total.scale(scale).sub(kl_diag(&q, &prior)?)
        }
        PosteriorKind::Povi | PosteriorKind::Apovi => {
            for m in 0..samples {
                let ws = model.sample(b, task, eps, m)?;
                let term = model
                    .log_likelihood(b, &ws.weights, task)?
                    .add(ws.log_p)?
                    .sub(ws.log_q)?;
                total = total.add(term)?;
            }
            Ok(total.scale(scale))
        }
    }
}

/// `log (1/M) Σ_m p(y_T | x_T, W_m)` with `W_m ~ q(W | context)`, evaluated
/// as a log-mean-exp.
pub fn npml_objective<'t, T: Scalar>(
    b: &Bound<'t, T>,
    model: &BnnModel,
    context: &Task<T>,
    target: &Task<T>,
    samples: usize,
    eps: EpsSource,
) -> Result<Var<'t, T>> {
    check_samples(samples)?;
    if target.is_empty() {
        return Err(Error::Data("NPML needs at least one target".into()));
    }
    let lls = (0..samples)
        .map(|m| {
            let ws = model.sample(b, context, eps, m)?;
            model.log_likelihood(b, &ws.weights, target)?.reshape(&[1])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Var::concat(&lls, 0)?
        .logsumexp()?
        .add_scalar(-T::lit(samples as f64).ln()))
}

/// `E_q[log p(y_T | x_T, W)] − KL[q(W | C ∪ T) ‖ q(W | C)]` with
/// `q = q(W | C ∪ T)`. The KL is estimated from the same draws used for the
/// likelihood term. Posteriors that ignore their conditioning set make the
/// KL term vanish.
pub fn npvi_objective<'t, T: Scalar>(
    b: &Bound<'t, T>,
    model: &BnnModel,
    context: &Task<T>,
    target: &Task<T>,
    samples: usize,
    eps: EpsSource,
) -> Result<Var<'t, T>> {
    check_samples(samples)?;
    let union = context.unmasked().union(&target.unmasked())?;
    if union.is_empty() {
        return Err(Error::Data("NPVI with empty context and target".into()));
    }
    let mut total = b.tape().scalar(T::zero());
    for m in 0..samples {
        let ws = model.sample(b, &union, eps, m)?;
        let log_q_ctx = model.log_q_at(b, context, &ws.weights)?;
        let term = model
            .log_likelihood(b, &ws.weights, target)?
            .sub(ws.log_q)?
            .add(log_q_ctx)?;
        total = total.add(term)?;
    }
    Ok(total.scale(T::lit(1.0 / samples as f64)))
}

/// Any model that can be meta-trained.
#[derive(Clone, Debug, PartialEq)]
pub enum MetaModel {
    Bnn(BnnModel),
    Cnp(Cnp),
    ConvCnp1d(ConvCnp1d),
    /// Image tasks of a fixed `height × width` grid.
    ConvCnp2d { model: ConvCnp2d, height: usize, width: usize },
}

impl MetaModel {
    pub fn name(&self) -> String {
        match self {
            Self::Bnn(m) => format!("{:?}", m.kind()).to_lowercase(),
            Self::Cnp(_) => "cnp".into(),
            Self::ConvCnp1d(_) => "convcnp".into(),
            Self::ConvCnp2d { .. } => "convcnp2d".into(),
        }
    }
}

/// Evaluates `kind` for one task. `context` conditions the prediction and
/// `target` is scored; ELBO scores `target` alone. Neural processes only
/// support NPML, and the image ConvCNP reads its context from the target's
/// mask.
pub fn objective<'t, T: Scalar>(
    b: &Bound<'t, T>,
    model: &MetaModel,
    kind: ObjectiveKind,
    samples: usize,
    context: &Task<T>,
    target: &Task<T>,
    eps: EpsSource,
) -> Result<Var<'t, T>> {
    let tape = b.tape();
    match (model, kind) {
        (MetaModel::Bnn(m), ObjectiveKind::Elbo) => elbo_objective(b, m, target, samples, eps),
        (MetaModel::Bnn(m), ObjectiveKind::Npml) => npml_objective(b, m, context, target, samples, eps),
        (MetaModel::Bnn(m), ObjectiveKind::Npvi) => npvi_objective(b, m, context, target, samples, eps),
        (MetaModel::Cnp(m), ObjectiveKind::Npml) => {
            let pred = m.predict(b, context, &target.x)?;
            np_log_likelihood(&pred, tape.constant(target.y.clone()))
        }
        (MetaModel::ConvCnp1d(m), ObjectiveKind::Npml) => {
            let pred = m.predict(b, context, &target.x)?;
            np_log_likelihood(&pred, tape.constant(target.y.clone()))
        }
        (MetaModel::ConvCnp2d { model, height, width }, ObjectiveKind::Npml) => {
            let mask = target
                .mask
                .as_ref()
                .ok_or_else(|| Error::Contract("image ConvCNP needs a masked target task".into()))?;
            let pred = model.predict_grid(b, *height, *width, mask, &target.y)?;
            np_log_likelihood(&pred, tape.constant(target.y.clone()))
        }
        (m, k) => Err(Error::Unsupported(format!("{k} objective for a {} model", m.name()))),
    }
}

/// Context drawn from `task` with an inclusion probability uniform on
/// `[0.1, 0.9]`; the target is the whole task.
pub fn context_target_split<T: Scalar, R: Rng + ?Sized>(task: &Task<T>, rng: &mut R) -> (Task<T>, Task<T>) {
    let frac: f64 = rng.random_range(0.1..=0.9);
    let idx: Vec<usize> = (0..task.len()).filter(|_| rng.random::<f64>() < frac).collect();
    let mut context = task.subset(&idx);
    context.mask = None;
    (context, task.unmasked())
}
