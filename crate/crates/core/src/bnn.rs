//! Bayesian neural networks and their variational posteriors.
//!
//! Weights of layer `ℓ` form a `[D^{ℓ-1} + 1, D^ℓ]` matrix whose last row is
//! the bias, and every entry has the prior `N(0, σ_p²)`. Four posteriors are
//! provided:
//!
//! * MFVI: a free factorised Gaussian over all weights.
//! * AMFVI: a factorised Gaussian formed as the product of the prior with one
//!   factor per datapoint, each emitted by an inference network.
//! * POVI: layerwise conditional posteriors given learnable inducing inputs,
//!   pseudo-targets and layer-shared pseudo-precisions.
//! * APOVI: the same layerwise construction with the data themselves as
//!   inducing inputs and pseudo-observations amortised by a bank of
//!   inference networks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Task;
use crate::distributions::{
    blr_posterior, blr_posterior_shared, log_prob_isotropic, DiagGaussian, FullGaussian, GaussianFactorSet,
    LOG_VAR_MAX, LOG_VAR_MIN,
};
use crate::error::{dim_err, Error, Result};
use crate::networks::{InferenceNetBank, Mlp};
use crate::noise::EpsSource;
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{sigmoid, Activation, Tape, Var};
use crate::tensor::Tensor;

/// Scale of the logit pseudo-targets standing in for binary outputs in the
/// final pseudo-observation layer: `y ∈ {0, 1}` becomes `κ·(2y − 1)`.
pub const BERNOULLI_PSEUDO_LOGIT: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Likelihood {
    Gaussian { noise_var: f64, trainable: bool },
    Bernoulli,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnnConfig {
    /// `[D⁰ = D, D¹, …, D^L = P]`.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub prior_var: f64,
    pub likelihood: Likelihood,
}

impl BnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::Contract(format!("bad BNN widths {:?}", self.widths)));
        }
        if self.prior_var <= 0.0 {
            return Err(Error::Contract("prior variance must be positive".into()));
        }
        if let Likelihood::Gaussian { noise_var, .. } = self.likelihood {
            if noise_var <= 0.0 {
                return Err(Error::Contract("noise variance must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    /// Shape `[D^{ℓ-1} + 1, D^ℓ]` of `W^ℓ` for `ℓ = 1..=L`.
    pub fn layer_shape(&self, layer: usize) -> [usize; 2] {
        [self.widths[layer - 1] + 1, self.widths[layer]]
    }

    /// Total number of weights including bias rows.
    pub fn num_weights(&self) -> usize {
        (1..=self.depth()).map(|l| self.layer_shape(l).iter().product::<usize>()).sum()
    }
}

/// Features `[ψ(H), 1]` feeding layer `ℓ` (no activation before layer 1).
fn layer_features<'t, T: Scalar>(h: Var<'t, T>, layer: usize, act: Activation) -> Result<Var<'t, T>> {
    let h = if layer == 1 { h } else { h.activation(act) };
    h.append_ones()
}

/// Output pre-activations `F^L` of a weight sample on inputs `x: [N, D]`.
pub fn bnn_forward<'t, T: Scalar>(cfg: &BnnConfig, weights: &[Var<'t, T>], x: Var<'t, T>) -> Result<Var<'t, T>> {
    if weights.len() != cfg.depth() {
        return Err(dim_err(
            "bnn_forward",
            format!("{} weight matrices for depth {}", weights.len(), cfg.depth()),
        ));
    }
    let mut h = x;
    for (i, &w) in weights.iter().enumerate() {
        h = layer_features(h, i + 1, cfg.activation)?.matmul(w)?;
    }
    Ok(h)
}

/// `Σ log p(y | f)` for outputs `f` (pre-link) and targets `y`, both `[N, P]`.
/// `log_noise_var` must be given for the Gaussian case.
pub fn log_likelihood<'t, T: Scalar>(
    kind: &Likelihood,
    log_noise_var: Option<Var<'t, T>>,
    f: Var<'t, T>,
    y: Var<'t, T>,
) -> Result<Var<'t, T>> {
    if f.shape() != y.shape() {
        return Err(dim_err(
            "log_likelihood",
            format!("predictions {:?}, targets {:?}", f.shape(), y.shape()),
        ));
    }
    match kind {
        Likelihood::Gaussian { .. } => {
            let s = log_noise_var.ok_or_else(|| Error::Contract("Gaussian likelihood needs a noise variance".into()))?;
            let n = T::lit(f.len() as f64);
            let quad = y.sub(f)?.square().sum().mul(s.neg().exp()?.reshape(&[])?)?;
            Ok(quad
                .add(s.reshape(&[])?.scale(n))?
                .add_scalar(n * T::ln_2pi())
                .scale(T::lit(-0.5)))
        }
        Likelihood::Bernoulli => {
            if y.value().data().iter().any(|&v| v != T::zero() && v != T::one()) {
                return Err(Error::Data("Bernoulli targets must be 0 or 1".into()));
            }
            // y·f − log(1 + eᶠ)
            Ok(f.mul(y)?.sub(f.softplus())?.sum())
        }
    }
}

/// Observation model with its (optionally trainable) noise variance.
#[derive(Clone, Debug, PartialEq)]
pub struct LikelihoodModel {
    pub kind: Likelihood,
    log_noise: Option<ParamId>,
}

impl LikelihoodModel {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, kind: Likelihood) -> Self {
        let log_noise = match kind {
            Likelihood::Gaussian { noise_var, trainable: true } => Some(store.add(
                format!("{name}.log_noise_var"),
                Tensor::scalar(T::lit(noise_var.ln())),
            )),
            _ => None,
        };
        Self { kind, log_noise }
    }

    pub fn log_noise_var<'t, T: Scalar>(&self, b: &Bound<'t, T>, tape: &'t Tape<T>) -> Option<Var<'t, T>> {
        match self.kind {
            Likelihood::Gaussian { noise_var, .. } => Some(match self.log_noise {
                Some(id) => b.get(id),
                None => tape.scalar(T::lit(noise_var.ln())),
            }),
            Likelihood::Bernoulli => None,
        }
    }

    /// Current noise variance, if Gaussian.
    pub fn noise_var<T: Scalar>(&self, store: &ParamStore<T>) -> Option<f64> {
        match self.kind {
            Likelihood::Gaussian { noise_var, .. } => Some(match self.log_noise {
                Some(id) => store.get(id).item().as_f64().exp(),
                None => noise_var,
            }),
            Likelihood::Bernoulli => None,
        }
    }

    pub fn log_likelihood<'t, T: Scalar>(
        &self,
        b: &Bound<'t, T>,
        f: Var<'t, T>,
        y: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        log_likelihood(&self.kind, self.log_noise_var(b, f.tape()), f, y)
    }
}

/// Pseudo-observation precisions for one layer.
#[derive(Clone, Copy, Debug)]
pub enum Precisions<'t, T: Scalar> {
    /// `[N, D^ℓ]`: one precision per datapoint and neuron.
    PerNeuron(Var<'t, T>),
    /// `[N]`: shared by every neuron of the layer.
    Shared(Var<'t, T>),
}

/// Pseudo-observations `N(V_{n,d}; x^ℓ_{n,d}, 1/λ_{n,d})` for one layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerPseudo<'t, T: Scalar> {
    /// `[N, D^ℓ]`.
    pub targets: Var<'t, T>,
    pub precisions: Precisions<'t, T>,
}

/// Conditional Gaussian posterior of one layer, neuron by neuron.
#[derive(Clone, Debug)]
pub struct LayerPosterior<'t, T: Scalar> {
    /// `[D^{ℓ-1} + 1, D^ℓ]`, column `d` the mean of neuron `d`.
    pub means: Var<'t, T>,
    /// One covariance factor per neuron, or a single shared one.
    pub chols: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> LayerPosterior<'t, T> {
    pub fn neuron(&self, d: usize) -> Result<FullGaussian<'t, T>> {
        let chol = if self.chols.len() == 1 { self.chols[0] } else { self.chols[d] };
        FullGaussian::new(self.means.column(d)?, chol)
    }
}

/// One draw of all weights with its log-densities.
#[derive(Clone, Debug)]
pub struct WeightSample<'t, T: Scalar> {
    /// `W^ℓ` for `ℓ = 1..=L`.
    pub weights: Vec<Var<'t, T>>,
    pub log_q: Var<'t, T>,
    pub log_p: Var<'t, T>,
    /// Layerwise conditionals (pseudo-observation posteriors only).
    pub layers: Vec<LayerPosterior<'t, T>>,
}

/// Whether the layerwise engine draws new weights or scores given ones.
#[derive(Clone, Copy, Debug)]
pub enum LayerwiseMode<'a, 't, T: Scalar> {
    Sample { eps: EpsSource, sample: usize },
    Evaluate(&'a [Var<'t, T>]),
}

/// The layerwise pseudo-observation posterior shared by POVI and APOVI.
///
/// Starting from `inputs: [M, D]`, each layer regresses the pseudo-targets on
/// the bias-augmented features of the propagated inputs, forms one Gaussian
/// per neuron, draws (or scores) that neuron's weights, and propagates the
/// inputs through the drawn layer.
pub fn layerwise_posterior<'t, T: Scalar>(
    cfg: &BnnConfig,
    inputs: Var<'t, T>,
    pseudo: &[LayerPseudo<'t, T>],
    mode: LayerwiseMode<'_, 't, T>,
) -> Result<WeightSample<'t, T>> {
    let tape = inputs.tape();
    if pseudo.len() != cfg.depth() {
        return Err(dim_err(
            "layerwise_posterior",
            format!("{} pseudo layers for depth {}", pseudo.len(), cfg.depth()),
        ));
    }
    let prior_var = T::lit(cfg.prior_var);
    let mut h = inputs;
    let mut weights = Vec::with_capacity(cfg.depth());
    let mut layers = Vec::with_capacity(cfg.depth());
    let mut log_q = tape.scalar(T::zero());
    let mut log_p = tape.scalar(T::zero());
    for (idx, ps) in pseudo.iter().enumerate() {
        let layer = idx + 1;
        let [din, dout] = cfg.layer_shape(layer);
        let phi = layer_features(h, layer, cfg.activation)?;
        if ps.targets.shape() != [phi.shape()[0], dout] {
            return Err(dim_err(
                "layerwise_posterior",
                format!("layer {layer}: pseudo-targets {:?}, expected [{}, {dout}]", ps.targets.shape(), phi.shape()[0]),
            ));
        }
        let post = match ps.precisions {
            Precisions::Shared(lambda) => {
                let (means, chol) = blr_posterior_shared(phi, ps.targets, lambda, prior_var)?;
                LayerPosterior { means, chols: vec![chol] }
            }
            Precisions::PerNeuron(lambda) => {
                let mut means = Vec::with_capacity(dout);
                let mut chols = Vec::with_capacity(dout);
                for d in 0..dout {
                    let g = blr_posterior(phi, ps.targets.column(d)?, lambda.column(d)?, prior_var)?;
                    means.push(g.mean.as_column()?);
                    chols.push(g.chol_cov);
                }
                LayerPosterior { means: Var::concat(&means, 1)?, chols }
            }
        };
        let w = match mode {
            LayerwiseMode::Sample { eps, sample } => {
                let cols = (0..dout)
                    .map(|d| {
                        let e = tape.constant(Tensor::from_vec(eps.normal(sample, layer, d, din)));
                        post.neuron(d)?.sample(e)?.as_column()
                    })
                    .collect::<Result<Vec<_>>>()?;
                Var::concat(&cols, 1)?
            }
            LayerwiseMode::Evaluate(ws) => {
                let w = *ws.get(idx).ok_or_else(|| dim_err("layerwise_posterior", "too few weights"))?;
                if w.shape() != [din, dout] {
                    return Err(dim_err(
                        "layerwise_posterior",
                        format!("layer {layer} weights {:?}, expected [{din}, {dout}]", w.shape()),
                    ));
                }
                w
            }
        };
        for d in 0..dout {
            log_q = log_q.add(post.neuron(d)?.log_prob(w.column(d)?)?)?;
        }
        log_p = log_p.add(log_prob_isotropic(w, prior_var))?;
        h = phi.matmul(w)?;
        weights.push(w);
        layers.push(post);
    }
    Ok(WeightSample { weights, log_q, log_p, layers })
}

fn precision_from_log_var<'t, T: Scalar>(log_var: Var<'t, T>) -> Result<Var<'t, T>> {
    log_var
        .clamp(T::lit(LOG_VAR_MIN), T::lit(LOG_VAR_MAX))
        .neg()
        .exp()
}

/// Final-layer pseudo-targets: the outputs themselves, or scaled logits for
/// binary outputs.
pub fn final_pseudo_targets<'t, T: Scalar>(kind: &Likelihood, y: Var<'t, T>) -> Var<'t, T> {
    match kind {
        Likelihood::Gaussian { .. } => y,
        Likelihood::Bernoulli => y
            .scale(T::lit(2.0 * BERNOULLI_PSEUDO_LOGIT))
            .add_scalar(-T::lit(BERNOULLI_PSEUDO_LOGIT)),
    }
}

/// Free factorised Gaussian over every weight.
#[derive(Clone, Debug, PartialEq)]
pub struct MfviPosterior {
    pub means: Vec<ParamId>,
    pub log_vars: Vec<ParamId>,
}

impl MfviPosterior {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &BnnConfig,
        init_log_var: f64,
        rng: &mut R,
    ) -> Self {
        let mut means = Vec::new();
        let mut log_vars = Vec::new();
        for l in 1..=cfg.depth() {
            let [din, dout] = cfg.layer_shape(l);
            let sd = (1.0 / (din - 1).max(1) as f64).sqrt();
            let data = (0..din * dout)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(rng);
                    T::lit(sd * e)
                })
                .collect();
            means.push(store.add(format!("{name}.mean{l}"), Tensor::new(vec![din, dout], data).expect("sized")));
            log_vars.push(store.add(
                format!("{name}.log_var{l}"),
                Tensor::full(&[din, dout], T::lit(init_log_var)),
            ));
        }
        Self { means, log_vars }
    }

    pub fn distribution<'t, T: Scalar>(&self, b: &Bound<'t, T>) -> Result<DiagGaussian<'t, T>> {
        let flat = |ids: &[ParamId]| -> Result<Var<'t, T>> {
            let parts = ids
                .iter()
                .map(|&id| {
                    let v = b.get(id);
                    v.reshape(&[v.len()])
                })
                .collect::<Result<Vec<_>>>()?;
            Var::concat(&parts, 0)
        };
        DiagGaussian::new(flat(&self.means)?, flat(&self.log_vars)?)
    }
}

/// Amortised factorised posterior: one inference network maps each `(x, y)`
/// to a diagonal factor over all weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AmfviPosterior {
    pub net: Mlp,
}

impl AmfviPosterior {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &BnnConfig,
        hidden: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut widths = vec![cfg.widths[0] + cfg.widths[cfg.depth()]];
        widths.extend_from_slice(hidden);
        widths.push(2 * cfg.num_weights());
        Self {
            net: Mlp::new(store, &format!("{name}.g"), &widths, activation, rng),
        }
    }

    /// Per-datapoint factors for `task`.
    pub fn factors<'t, T: Scalar>(
        &self,
        b: &Bound<'t, T>,
        cfg: &BnnConfig,
        x: Var<'t, T>,
        y: Var<'t, T>,
    ) -> Result<GaussianFactorSet<'t, T>> {
        let n_w = cfg.num_weights();
        let out = self.net.forward(b, Var::concat(&[x, y], 1)?)?;
        GaussianFactorSet::new(out.narrow(1, 0, n_w)?, out.narrow(1, n_w, n_w)?)
    }
}

/// Learnable inducing inputs, pseudo-targets and layer-shared precisions.
#[derive(Clone, Debug, PartialEq)]
pub struct PoviPosterior {
    pub inducing: ParamId,
    pub pseudo_targets: Vec<ParamId>,
    pub log_precisions: Vec<ParamId>,
}

impl PoviPosterior {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &BnnConfig,
        num_inducing: usize,
        rng: &mut R,
    ) -> Self {
        let mut normal = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(rng);
                    T::lit(e)
                })
                .collect();
            Tensor::new(shape.to_vec(), data).expect("sized")
        };
        let inducing = store.add(format!("{name}.inducing"), normal(&[num_inducing, cfg.widths[0]]));
        let mut pseudo_targets = Vec::new();
        let mut log_precisions = Vec::new();
        for l in 1..=cfg.depth() {
            pseudo_targets.push(store.add(format!("{name}.v{l}"), normal(&[num_inducing, cfg.widths[l]])));
            log_precisions.push(store.add(
                format!("{name}.log_prec{l}"),
                Tensor::zeros(&[num_inducing]),
            ));
        }
        Self {
            inducing,
            pseudo_targets,
            log_precisions,
        }
    }

    pub fn num_inducing<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.inducing).shape()[0]
    }

    /// Places the inducing inputs on (a prefix of) the task inputs and the
    /// final pseudo-targets on the matching outputs.
    pub fn init_from_task<T: Scalar>(&self, store: &mut ParamStore<T>, task: &Task<T>) -> Result<()> {
        let m = self.num_inducing(store);
        let mut u = store.get(self.inducing).clone();
        let last = *self.pseudo_targets.last().expect("depth >= 1");
        let mut v = store.get(last).clone();
        for i in 0..m.min(task.len()) {
            for j in 0..task.x_dim() {
                u[[i, j]] = task.x[[i, j]];
            }
            for j in 0..task.y_dim() {
                v[[i, j]] = task.y[[i, j]];
            }
        }
        store.set(self.inducing, u)?;
        store.set(last, v)
    }

    pub fn pseudo<'t, T: Scalar>(&self, b: &Bound<'t, T>) -> Result<Vec<LayerPseudo<'t, T>>> {
        self.pseudo_targets
            .iter()
            .zip(&self.log_precisions)
            .map(|(&v, &lp)| {
                // log-precision clamped like every log-variance
                let lambda = b
                    .get(lp)
                    .clamp(T::lit(-LOG_VAR_MAX), T::lit(-LOG_VAR_MIN))
                    .exp()?;
                Ok(LayerPseudo {
                    targets: b.get(v),
                    precisions: Precisions::Shared(lambda),
                })
            })
            .collect()
    }
}

/// Amortised pseudo-observation posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct ApoviPosterior {
    pub bank: InferenceNetBank,
}

impl ApoviPosterior {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &BnnConfig,
        hidden: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let p = cfg.widths[cfg.depth()];
        Self {
            bank: InferenceNetBank::new(store, name, &cfg.widths, p, hidden, activation, rng),
        }
    }

    /// Amortised pseudo-observations for `x: [N, D]`, `y: [N, P]`.
    pub fn pseudo<'t, T: Scalar>(
        &self,
        b: &Bound<'t, T>,
        cfg: &BnnConfig,
        x: Var<'t, T>,
        y: Var<'t, T>,
    ) -> Result<Vec<LayerPseudo<'t, T>>> {
        let params = self.bank.infer(b, x, y)?;
        params
            .into_iter()
            .map(|p| {
                let targets = match p.mean {
                    Some(m) => m,
                    None => final_pseudo_targets(&cfg.likelihood, y),
                };
                Ok(LayerPseudo {
                    targets,
                    precisions: Precisions::PerNeuron(precision_from_log_var(p.log_var)?),
                })
            })
            .collect()
    }
}

/// Draws from the APOVI posterior conditioned on `task`.
pub fn apovi_sample<'t, T: Scalar>(
    post: &ApoviPosterior,
    b: &Bound<'t, T>,
    cfg: &BnnConfig,
    task: &Task<T>,
    eps: EpsSource,
    sample: usize,
) -> Result<WeightSample<'t, T>> {
    let tape = b.tape();
    let x = tape.constant(task.x.clone());
    let y = tape.constant(task.y.clone());
    let pseudo = post.pseudo(b, cfg, x, y)?;
    layerwise_posterior(cfg, x, &pseudo, LayerwiseMode::Sample { eps, sample })
}

/// APOVI sampling with caller-supplied pseudo-observations; the inputs still
/// act as inducing points.
pub fn apovi_sample_with_pseudo<'t, T: Scalar>(
    cfg: &BnnConfig,
    x: Var<'t, T>,
    pseudo: &[LayerPseudo<'t, T>],
    eps: EpsSource,
    sample: usize,
) -> Result<WeightSample<'t, T>> {
    layerwise_posterior(cfg, x, pseudo, LayerwiseMode::Sample { eps, sample })
}

/// Draws from the POVI posterior.
pub fn povi_sample<'t, T: Scalar>(
    post: &PoviPosterior,
    b: &Bound<'t, T>,
    cfg: &BnnConfig,
    eps: EpsSource,
    sample: usize,
) -> Result<WeightSample<'t, T>> {
    let pseudo = post.pseudo(b)?;
    layerwise_posterior(cfg, b.get(post.inducing), &pseudo, LayerwiseMode::Sample { eps, sample })
}

/// Noise for a flattened diagonal posterior, routed per `(sample, layer, neuron)`.
fn diag_eps<T: Scalar>(cfg: &BnnConfig, eps: EpsSource, sample: usize) -> Tensor<T> {
    let mut all = Vec::with_capacity(cfg.num_weights());
    for l in 1..=cfg.depth() {
        let [din, dout] = cfg.layer_shape(l);
        all.extend(eps.matrix::<T>(sample, l, din, dout).into_data());
    }
    Tensor::from_vec(all)
}

fn split_layers<'t, T: Scalar>(cfg: &BnnConfig, flat: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
    let mut offset = 0;
    (1..=cfg.depth())
        .map(|l| {
            let [din, dout] = cfg.layer_shape(l);
            let w = flat.narrow(0, offset, din * dout)?.reshape(&[din, dout])?;
            offset += din * dout;
            Ok(w)
        })
        .collect()
}

fn flatten_layers<'t, T: Scalar>(weights: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let parts = weights
        .iter()
        .map(|w| w.reshape(&[w.len()]))
        .collect::<Result<Vec<_>>>()?;
    Var::concat(&parts, 0)
}

/// Reparameterised draw from a factorised posterior over all weights.
pub fn diag_sample<'t, T: Scalar>(
    q: &DiagGaussian<'t, T>,
    cfg: &BnnConfig,
    eps: EpsSource,
    sample: usize,
) -> Result<WeightSample<'t, T>> {
    let tape = q.mean.tape();
    let e = tape.constant(diag_eps(cfg, eps, sample));
    let flat = q.reparam_sample(e)?;
    Ok(WeightSample {
        weights: split_layers(cfg, flat)?,
        log_q: q.log_prob(flat)?,
        log_p: log_prob_isotropic(flat, T::lit(cfg.prior_var)),
        layers: Vec::new(),
    })
}

/// Draws from the MFVI posterior.
pub fn mfvi_sample<'t, T: Scalar>(
    post: &MfviPosterior,
    b: &Bound<'t, T>,
    cfg: &BnnConfig,
    eps: EpsSource,
    sample: usize,
) -> Result<WeightSample<'t, T>> {
    diag_sample(&post.distribution(b)?, cfg, eps, sample)
}

/// The AMFVI posterior for `task`: prior times one factor per datapoint.
pub fn amfvi_posterior<'t, T: Scalar>(
    post: &AmfviPosterior,
    b: &Bound<'t, T>,
    cfg: &BnnConfig,
    task: &Task<T>,
) -> Result<DiagGaussian<'t, T>> {
    let tape = b.tape();
    let x = tape.constant(task.x.clone());
    let y = tape.constant(task.y.clone());
    let factors = post.factors(b, cfg, x, y)?;
    let prior = DiagGaussian::isotropic(tape, cfg.num_weights(), T::lit(cfg.prior_var));
    crate::distributions::gaussian_product(&factors, &prior)
}

/// Which variational family a [`BnnModel`] uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosteriorKind {
    Mfvi,
    Amfvi,
    Povi,
    Apovi,
}

impl std::str::FromStr for PosteriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mfvi" => Ok(Self::Mfvi),
            "amfvi" => Ok(Self::Amfvi),
            "povi" => Ok(Self::Povi),
            "apovi" => Ok(Self::Apovi),
            other => Err(Error::Contract(format!("unknown posterior {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Posterior {
    Mfvi(MfviPosterior),
    Amfvi(AmfviPosterior),
    Povi(PoviPosterior),
    Apovi(ApoviPosterior),
}

/// Construction options that only some posteriors read.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorOptions {
    /// Hidden widths of inference networks (AMFVI, APOVI).
    pub inference_hidden: Vec<usize>,
    pub inference_activation: Activation,
    /// Inducing points (POVI).
    pub num_inducing: usize,
    /// Initial weight log-variance (MFVI).
    pub init_log_var: f64,
}

impl Default for PosteriorOptions {
    fn default() -> Self {
        Self {
            inference_hidden: vec![50, 50],
            inference_activation: Activation::Relu,
            num_inducing: 10,
            init_log_var: -6.0,
        }
    }
}

/// Moment-matched predictive distribution, `[T, P]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

/// A BNN with its variational posterior and observation model.
#[derive(Clone, Debug, PartialEq)]
pub struct BnnModel {
    pub cfg: BnnConfig,
    pub posterior: Posterior,
    pub likelihood: LikelihoodModel,
}

impl BnnModel {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        kind: PosteriorKind,
        cfg: BnnConfig,
        opts: &PosteriorOptions,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let posterior = match kind {
            PosteriorKind::Mfvi => Posterior::Mfvi(MfviPosterior::new(store, "mfvi", &cfg, opts.init_log_var, rng)),
            PosteriorKind::Amfvi => Posterior::Amfvi(AmfviPosterior::new(
                store,
                "amfvi",
                &cfg,
                &opts.inference_hidden,
                opts.inference_activation,
                rng,
            )),
            PosteriorKind::Povi => Posterior::Povi(PoviPosterior::new(store, "povi", &cfg, opts.num_inducing, rng)),
            PosteriorKind::Apovi => Posterior::Apovi(ApoviPosterior::new(
                store,
                "apovi",
                &cfg,
                &opts.inference_hidden,
                opts.inference_activation,
                rng,
            )),
        };
        let likelihood = LikelihoodModel::new(store, "lik", cfg.likelihood);
        Ok(Self { cfg, posterior, likelihood })
    }

    pub fn kind(&self) -> PosteriorKind {
        match self.posterior {
            Posterior::Mfvi(_) => PosteriorKind::Mfvi,
            Posterior::Amfvi(_) => PosteriorKind::Amfvi,
            Posterior::Povi(_) => PosteriorKind::Povi,
            Posterior::Apovi(_) => PosteriorKind::Apovi,
        }
    }

    /// Whether the posterior depends on the conditioning task.
    pub fn is_amortised(&self) -> bool {
        matches!(self.posterior, Posterior::Amfvi(_) | Posterior::Apovi(_))
    }

    /// The factorised posterior for MFVI/AMFVI (`None` for the layerwise ones).
    pub fn diag_posterior<'t, T: Scalar>(
        &self,
        b: &Bound<'t, T>,
        conditioning: &Task<T>,
    ) -> Result<Option<DiagGaussian<'t, T>>> {
        match &self.posterior {
            Posterior::Mfvi(p) => Ok(Some(p.distribution(b)?)),
            Posterior::Amfvi(p) => Ok(Some(amfvi_posterior(p, b, &self.cfg, conditioning)?)),
            _ => Ok(None),
        }
    }

    /// One weight draw from `q(W | conditioning)`; non-amortised posteriors
    /// ignore the conditioning task.
    pub fn sample<'t, T: Scalar>(
        &self,
        b: &Bound<'t, T>,
        conditioning: &Task<T>,
        eps: EpsSource,
        sample: usize,
    ) -> Result<WeightSample<'t, T>> {
        match &self.posterior {
            Posterior::Mfvi(p) => mfvi_sample(p, b, &self.cfg, eps, sample),
            Posterior::Amfvi(p) => diag_sample(&amfvi_posterior(p, b, &self.cfg, conditioning)?, &self.cfg, eps, sample),
            Posterior::Povi(p) => povi_sample(p, b, &self.cfg, eps, sample),
            Posterior::Apovi(p) => apovi_sample(p, b, &self.cfg, conditioning, eps, sample),
        }
    }

    /// `log q(W | conditioning)` at given weights.
    pub fn log_q_at<'t, T: Scalar>(
        &self,
        b: &Bound<'t, T>,
        conditioning: &Task<T>,
        weights: &[Var<'t, T>],
    ) -> Result<Var<'t, T>> {
        let mode = LayerwiseMode::Evaluate(weights);
        match &self.posterior {
            Posterior::Mfvi(_) | Posterior::Amfvi(_) => {
                let q = self.diag_posterior(b, conditioning)?.expect("factorised posterior");
                q.log_prob(flatten_layers(weights)?)
            }
            Posterior::Povi(p) => {
                let pseudo = p.pseudo(b)?;
                Ok(layerwise_posterior(&self.cfg, b.get(p.inducing), &pseudo, mode)?.log_q)
            }
            Posterior::Apovi(p) => {
                let tape = b.tape();
                let x = tape.constant(conditioning.x.clone());
                let y = tape.constant(conditioning.y.clone());
                let pseudo = p.pseudo(b, &self.cfg, x, y)?;
                Ok(layerwise_posterior(&self.cfg, x, &pseudo, mode)?.log_q)
            }
        }
    }

    /// `log p(y | x, W)` for one weight sample.
    pub fn log_likelihood<'t, T: Scalar>(
        &self,
        b: &Bound<'t, T>,
        weights: &[Var<'t, T>],
        task: &Task<T>,
    ) -> Result<Var<'t, T>> {
        let tape = weights
            .first()
            .map(|w| w.tape())
            .ok_or_else(|| Error::Contract("empty weight sample".into()))?;
        let f = bnn_forward(&self.cfg, weights, tape.constant(task.x.clone()))?;
        self.likelihood.log_likelihood(b, f, tape.constant(task.y.clone()))
    }

    /// Moment-matched prediction at `x_star` from `samples` posterior draws
    /// conditioned on `conditioning`.
    pub fn predict<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        conditioning: &Task<T>,
        x_star: &Tensor<T>,
        samples: usize,
        seed: u64,
    ) -> Result<Prediction<T>> {
        let eps = EpsSource::new(seed);
        let mut outputs = Vec::with_capacity(samples);
        for m in 0..samples {
            let tape = Tape::new();
            let b = store.bind_frozen(&tape);
            let ws = self.sample(&b, conditioning, eps, m)?;
            outputs.push((*bnn_forward(&self.cfg, &ws.weights, tape.constant(x_star.clone()))?.value()).clone());
        }
        predict_from_samples(&outputs, &self.cfg.likelihood, self.likelihood.noise_var(store))
    }
}

/// Mean and variance of per-sample outputs. Gaussian: sample mean and
/// unbiased variance plus the noise variance. Bernoulli: mean probability
/// `p̂` and variance `p̂(1 − p̂)`.
pub fn predict_from_samples<T: Scalar>(
    outputs: &[Tensor<T>],
    likelihood: &Likelihood,
    noise_var: Option<f64>,
) -> Result<Prediction<T>> {
    let s = outputs.len();
    if s < 2 {
        return Err(Error::Contract(format!("prediction needs at least 2 samples, got {s}")));
    }
    let shape = outputs[0].shape().to_vec();
    let n = outputs[0].len();
    let mut mean = vec![T::zero(); n];
    let mut var = vec![T::zero(); n];
    let link = |v: T| match likelihood {
        Likelihood::Bernoulli => sigmoid(v),
        Likelihood::Gaussian { .. } => v,
    };
    // shifted by the first draw so identical draws give exact moments
    let first: Vec<T> = outputs[0].data().iter().map(|&v| link(v)).collect();
    for o in outputs {
        for (k, &v) in o.data().iter().enumerate() {
            mean[k] += link(v) - first[k];
        }
    }
    let sf = T::lit(s as f64);
    mean.iter_mut().zip(&first).for_each(|(m, &f)| *m = f + *m / sf);
    match likelihood {
        Likelihood::Gaussian { .. } => {
            for o in outputs {
                for (k, &v) in o.data().iter().enumerate() {
                    let d = v - mean[k];
                    var[k] += d * d;
                }
            }
            let noise = T::lit(noise_var.unwrap_or(0.0));
            var.iter_mut().for_each(|v| *v = *v / T::lit((s - 1) as f64) + noise);
        }
        Likelihood::Bernoulli => {
            for (v, &p) in var.iter_mut().zip(&mean) {
                *v = p * (T::one() - p);
            }
        }
    }
    Ok(Prediction {
        mean: Tensor::new(shape.clone(), mean)?,
        var: Tensor::new(shape, var)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(widths: &[usize], likelihood: Likelihood) -> BnnConfig {
        BnnConfig {
            widths: widths.to_vec(),
            activation: Activation::Tanh,
            prior_var: 1.0,
            likelihood,
        }
    }

    fn gauss(noise_var: f64) -> Likelihood {
        Likelihood::Gaussian { noise_var, trainable: false }
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn invert(a: &Tensor<f64>) -> Tensor<f64> {
        // plain Gauss-Jordan with partial pivoting
        let n = a.shape()[0];
        let mut m = a.clone();
        let mut inv = Tensor::eye(n);
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| m[[i, c]].abs().total_cmp(&m[[j, c]].abs())).unwrap();
            for k in 0..n {
                let (t1, t2) = (m[[c, k]], inv[[c, k]]);
                m[[c, k]] = m[[p, k]];
                inv[[c, k]] = inv[[p, k]];
                m[[p, k]] = t1;
                inv[[p, k]] = t2;
            }
            let d = m[[c, c]];
            for k in 0..n {
                m[[c, k]] /= d;
                inv[[c, k]] /= d;
            }
            for r in 0..n {
                if r != c {
                    let f = m[[r, c]];
                    for k in 0..n {
                        m[[r, k]] -= f * m[[c, k]];
                        inv[[r, k]] -= f * inv[[c, k]];
                    }
                }
            }
        }
        inv
    }

    #[test]
    fn forward_trivial_weights() {
        let c = cfg(&[2, 3, 1], gauss(1.0));
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(vec![2, 2], &[1.0, 2.0, -3.0, 0.5]).unwrap());
        let ws = vec![tape.zeros(&[3, 3]), tape.zeros(&[4, 1])];
        assert!(bnn_forward(&c, &ws, x).unwrap().value().data().iter().all(|&v| v == 0.0));

        let c1 = cfg(&[2, 1], gauss(1.0));
        let w = tape.constant(Tensor::from_f64(vec![3, 1], &[0.0, 1.0, 0.0]).unwrap());
        assert_eq!(bnn_forward(&c1, &[w], x).unwrap().value().data(), &[2.0, 0.5]);
        assert!(bnn_forward(&c, &[w], x).is_err());
    }

    #[test]
    fn forward_matches_row_wise_oracle() {
        let c = cfg(&[3, 4, 2], gauss(1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (w1, w2, x) = (random(&mut rng, &[4, 4]), random(&mut rng, &[5, 2]), random(&mut rng, &[6, 3]));
        let tape = Tape::<f64>::new();
        let out = bnn_forward(&c, &[tape.constant(w1.clone()), tape.constant(w2.clone())], tape.constant(x.clone()))
            .unwrap()
            .value();
        for n in 0..6 {
            let h: Vec<f64> = (0..4)
                .map(|j| (0..3).map(|i| x[[n, i]] * w1[[i, j]]).sum::<f64>() + w1[[3, j]])
                .collect();
            for p in 0..2 {
                let o = (0..4).map(|j| h[j].tanh() * w2[[j, p]]).sum::<f64>() + w2[[4, p]];
                assert!((out[[n, p]] - o).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn likelihood_reference_values() {
        let tape = Tape::<f64>::new();
        let y = tape.constant(Tensor::from_f64(vec![3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
        let ll = log_likelihood(&gauss(1.0), Some(tape.scalar(0.0)), y, y).unwrap().item();
        assert!((ll + 3.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);

        let f = tape.constant(Tensor::from_f64(vec![1, 1], &[0.0]).unwrap());
        let one = tape.constant(Tensor::from_f64(vec![1, 1], &[1.0]).unwrap());
        let lb = log_likelihood(&Likelihood::Bernoulli, None, f, one).unwrap().item();
        assert!((lb - 0.5f64.ln()).abs() < 1e-15);
        assert!(matches!(
            log_likelihood(&Likelihood::Bernoulli, None, f, f.add_scalar(0.5)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn gaussian_likelihood_matches_diag_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (f, y) = (random(&mut rng, &[4, 2]), random(&mut rng, &[4, 2]));
        let tape = Tape::<f64>::new();
        let s = 0.37f64;
        let ll = log_likelihood(&gauss(1.0), Some(tape.scalar(s.ln())), tape.constant(f.clone()), tape.constant(y.clone()))
            .unwrap()
            .item();
        let q = DiagGaussian::new(tape.constant(f.reshape(&[8]).unwrap()), tape.constant(Tensor::full(&[8], s.ln()))).unwrap();
        let oracle = q.log_prob(tape.constant(y.reshape(&[8]).unwrap())).unwrap().item();
        assert!((ll - oracle).abs() < 1e-12);
    }

    #[test]
    fn mfvi_draw_is_mean_plus_scaled_routed_noise() {
        let c = cfg(&[1, 3, 1], gauss(1.0));
        let mut store = ParamStore::<f64>::new();
        let post = MfviPosterior::new(&mut store, "q", &c, -1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let tape = Tape::<f64>::new();
        let b = store.bind(&tape);
        let eps = EpsSource::new(5);
        let s = mfvi_sample(&post, &b, &c, eps, 2).unwrap();
        let sd = (-0.5f64).exp();
        for l in 1..=2 {
            let [r, k] = c.layer_shape(l);
            let e = eps.matrix::<f64>(2, l, r, k);
            let mean = store.get(post.means[l - 1]);
            let w = s.weights[l - 1].value();
            for (i, &wv) in w.data().iter().enumerate() {
                assert!((wv - mean.data()[i] - sd * e.data()[i]).abs() < 1e-12);
            }
        }
        let q = post.distribution(&b).unwrap();
        let flat = flatten_layers(&s.weights).unwrap();
        assert!((q.log_prob(flat).unwrap().item() - s.log_q.item()).abs() < 1e-12);
    }

    #[test]
    fn mfvi_at_prior_has_zero_mean_log_ratio() {
        let c = cfg(&[1, 2, 1], gauss(1.0));
        let mut store = ParamStore::<f64>::new();
        let post = MfviPosterior::new(&mut store, "q", &c, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        for &id in &post.means {
            let z = Tensor::zeros(store.get(id).shape());
            store.set(id, z).unwrap();
        }
        let eps = EpsSource::new(17);
        let n = 10_000;
        let ratios: Vec<f64> = (0..n)
            .map(|m| {
                let tape = Tape::<f64>::new();
                let b = store.bind_frozen(&tape);
                let s = mfvi_sample(&post, &b, &c, eps, m).unwrap();
                s.log_q.item() - s.log_p.item()
            })
            .collect();
        let mean = ratios.iter().sum::<f64>() / n as f64;
        let sd = (ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!(mean.abs() <= 3.0 * sd / (n as f64).sqrt() + 1e-12);
    }

    fn amfvi_setup() -> (BnnConfig, ParamStore<f64>, AmfviPosterior) {
        let c = cfg(&[1, 1], gauss(0.1));
        let mut store = ParamStore::<f64>::new();
        let post = AmfviPosterior::new(&mut store, "a", &c, &[8], Activation::Relu, &mut ChaCha8Rng::seed_from_u64(3));
        (c, store, post)
    }

    #[test]
    fn amfvi_empty_task_is_prior() {
        let (c, store, post) = amfvi_setup();
        let tape = Tape::<f64>::new();
        let b = store.bind(&tape);
        let q = amfvi_posterior(&post, &b, &c, &Task::empty(1, 1)).unwrap();
        assert!(q.mean.value().data().iter().all(|&m| m == 0.0));
        assert!(q.log_var.value().data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn amfvi_two_points_add_precisions() {
        let (c, store, post) = amfvi_setup();
        let task = Task::from_xy(&[0.3, -1.2], &[0.5, 0.1]).unwrap();
        let tape = Tape::<f64>::new();
        let b = store.bind(&tape);
        let q = amfvi_posterior(&post, &b, &c, &task).unwrap();
        let x = tape.constant(task.x.clone());
        let y = tape.constant(task.y.clone());
        let f = post.factors(&b, &c, x, y).unwrap();
        let (m, lv) = (f.means.value(), f.log_vars.value());
        for k in 0..c.num_weights() {
            let (p1, p2) = ((-lv[[0, k]]).exp(), (-lv[[1, k]]).exp());
            let prec = 1.0 + p1 + p2;
            let mean = (p1 * m[[0, k]] + p2 * m[[1, k]]) / prec;
            assert!((q.mean.value().data()[k] - mean).abs() < 1e-12);
            assert!((q.log_var.value().data()[k] + prec.ln()).abs() < 1e-12);
        }
        let perm = task.subset(&[1, 0]);
        let qp = amfvi_posterior(&post, &b, &c, &perm).unwrap();
        assert!(qp.mean.value().max_abs_diff(&q.mean.value()) < 1e-12);
        assert!(qp.log_var.value().max_abs_diff(&q.log_var.value()) < 1e-12);
    }

    /// BLR posterior of `y` on `[X, 1]` with prior `N(0, σ_p² I)` via dense inversion.
    fn blr_oracle(x: &Tensor<f64>, y: &[f64], noise_var: f64, prior_var: f64) -> (Vec<f64>, Tensor<f64>) {
        let (n, d) = x.dims2("oracle").unwrap();
        let phi = |i: usize, j: usize| if j == d { 1.0 } else { x[[i, j]] };
        let mut p = Tensor::zeros(&[d + 1, d + 1]);
        for a in 0..=d {
            p[[a, a]] = 1.0 / prior_var;
            for b in 0..=d {
                p[[a, b]] += (0..n).map(|i| phi(i, a) * phi(i, b)).sum::<f64>() / noise_var;
            }
        }
        let cov = invert(&p);
        let rhs: Vec<f64> = (0..=d).map(|a| (0..n).map(|i| phi(i, a) * y[i]).sum::<f64>() / noise_var).collect();
        let mean = (0..=d).map(|a| (0..=d).map(|b| cov[[a, b]] * rhs[b]).sum()).collect();
        (mean, cov)
    }

    fn pinned_single_layer(x: &Tensor<f64>, y: &Tensor<f64>, noise_var: f64) -> (Tensor<f64>, Vec<Tensor<f64>>) {
        let c = cfg(&[x.shape()[1], y.shape()[1]], gauss(noise_var));
        let tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let pseudo = [LayerPseudo {
            targets: tape.constant(y.clone()),
            precisions: Precisions::PerNeuron(tape.constant(y.map(|_| 1.0 / noise_var))),
        }];
        let s = apovi_sample_with_pseudo(&c, xv, &pseudo, EpsSource::new(1), 0).unwrap();
        let post = &s.layers[0];
        let covs = (0..y.shape()[1])
            .map(|d| (*post.neuron(d).unwrap().covariance().unwrap().value()).clone())
            .collect();
        ((*post.means.value()).clone(), covs)
    }

    #[test]
    fn single_layer_recovers_conjugate_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (n, d) in [(5, 1), (12, 3), (20, 2)] {
            let x = random(&mut rng, &[n, d]);
            let y = random(&mut rng, &[n, 2]);
            let (means, covs) = pinned_single_layer(&x, &y, 0.3);
            for k in 0..2 {
                let (m, cov) = blr_oracle(&x, &y.data().iter().skip(k).step_by(2).copied().collect::<Vec<_>>(), 0.3, 1.0);
                for a in 0..=d {
                    assert!((means[[a, k]] - m[a]).abs() < 1e-8);
                }
                assert!(covs[k].max_abs_diff(&cov) < 1e-8);
            }
        }
    }

    #[test]
    fn apovi_without_data_samples_the_prior() {
        let c = cfg(&[1, 4, 1], gauss(0.1));
        let mut store = ParamStore::<f64>::new();
        let post = ApoviPosterior::new(&mut store, "p", &c, &[8], Activation::Relu, &mut ChaCha8Rng::seed_from_u64(1));
        let tape = Tape::<f64>::new();
        let b = store.bind(&tape);
        let s = apovi_sample(&post, &b, &c, &Task::empty(1, 1), EpsSource::new(3), 0).unwrap();
        assert!((s.log_q.item() - s.log_p.item()).abs() < 1e-10);
    }

    #[test]
    fn apovi_permutation_and_self_consistency() {
        let c = cfg(&[1, 5, 1], gauss(0.1));
        let mut store = ParamStore::<f64>::new();
        let post = ApoviPosterior::new(&mut store, "p", &c, &[8], Activation::Relu, &mut ChaCha8Rng::seed_from_u64(1));
        let task = Task::from_xy(&[-1.0, 0.2, 0.9, 1.5], &[0.3, -0.1, 0.8, 0.2]).unwrap();
        let perm = task.subset(&[2, 0, 3, 1]);
        let tape = Tape::<f64>::new();
        let b = store.bind(&tape);
        let eps = EpsSource::new(9);
        let s1 = apovi_sample(&post, &b, &c, &task, eps, 0).unwrap();
        let s2 = apovi_sample(&post, &b, &c, &perm, eps, 0).unwrap();
        for (a, z) in s1.layers.iter().zip(&s2.layers) {
            assert!(a.means.value().max_abs_diff(&z.means.value()) < 1e-10);
            for d in 0..a.chols.len() {
                let ca = a.neuron(d).unwrap().covariance().unwrap().value();
                let cz = z.neuron(d).unwrap().covariance().unwrap().value();
                assert!(ca.max_abs_diff(&cz) < 1e-10);
            }
        }
        for (a, z) in s1.weights.iter().zip(&s2.weights) {
            assert!(a.value().max_abs_diff(&z.value()) < 1e-10);
        }
        // log_q re-evaluated neuron by neuron
        let mut total = 0.0;
        for (l, post) in s1.layers.iter().enumerate() {
            for d in 0..c.widths[l + 1] {
                total += post.neuron(d).unwrap().log_prob(s1.weights[l].column(d).unwrap()).unwrap().item();
            }
        }
        assert!((total - s1.log_q.item()).abs() < 1e-10);
        let evaluated = BnnModel {
            cfg: c.clone(),
            posterior: Posterior::Apovi(post.clone()),
            likelihood: LikelihoodModel::new(&mut ParamStore::<f64>::new(), "l", c.likelihood),
        }
        .log_q_at(&b, &task, &s1.weights)
        .unwrap();
        assert!((evaluated.item() - s1.log_q.item()).abs() < 1e-10);
    }

    #[test]
    fn povi_matches_apovi_on_data_inducing_points() {
        let noise_var = 0.2;
        let c = cfg(&[2, 1], gauss(noise_var));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, &[6, 2]);
        let y = random(&mut rng, &[6, 1]);
        let mut store = ParamStore::<f64>::new();
        let post = PoviPosterior::new(&mut store, "p", &c, 6, &mut rng);
        post.init_from_task(&mut store, &Task::new(x.clone(), y.clone(), None).unwrap()).unwrap();
        store.set(post.log_precisions[0], Tensor::full(&[6], -noise_var.ln())).unwrap();
        let tape = Tape::<f64>::new();
        let b = store.bind(&tape);
        let s = povi_sample(&post, &b, &c, EpsSource::new(4), 0).unwrap();
        let (means, covs) = pinned_single_layer(&x, &y, noise_var);
        assert!(s.layers[0].means.value().max_abs_diff(&means) < 1e-10);
        let cov = s.layers[0].neuron(0).unwrap().covariance().unwrap().value();
        assert!(cov.max_abs_diff(&covs[0]) < 1e-10);
    }

    #[test]
    fn povi_floor_precision_is_nearly_prior() {
        let c = cfg(&[1, 3, 1], gauss(0.1));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let post = PoviPosterior::new(&mut store, "p", &c, 4, &mut rng);
        for &id in &post.log_precisions {
            store.set(id, Tensor::full(&[4], -1e3)).unwrap();
        }
        let n = 500;
        let eps = EpsSource::new(1);
        let kl = (0..n)
            .map(|m| {
                let tape = Tape::<f64>::new();
                let s = povi_sample(&post, &store.bind_frozen(&tape), &c, eps, m).unwrap();
                s.log_q.item() - s.log_p.item()
            })
            .sum::<f64>()
            / n as f64;
        assert!(kl.abs() < 1e-3);
    }

    #[test]
    fn prediction_moments() {
        let out = vec![Tensor::<f64>::from_f64(vec![2, 1], &[0.4, -1.0]).unwrap(); 3];
        let p = predict_from_samples(&out, &gauss(0.25), Some(0.25)).unwrap();
        assert_eq!(p.mean, out[0]);
        assert!(p.var.data().iter().all(|&v| v == 0.25));

        let logits = vec![Tensor::<f64>::from_f64(vec![1, 1], &[0.0]).unwrap(); 4];
        let pb = predict_from_samples(&logits, &Likelihood::Bernoulli, None).unwrap();
        assert_eq!(pb.mean.data(), &[0.5]);
        assert_eq!(pb.var.data(), &[0.25]);
        assert!(predict_from_samples(&out[..1], &gauss(1.0), Some(1.0)).is_err());
    }

    #[test]
    fn prediction_error_shrinks_with_samples() {
        let c = cfg(&[1, 4, 1], gauss(0.1));
        let mut store = ParamStore::<f64>::new();
        let model = BnnModel::new(
            &mut store,
            PosteriorKind::Mfvi,
            c,
            &PosteriorOptions { init_log_var: -1.0, ..PosteriorOptions::default() },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let xs = Tensor::<f64>::from_f64(vec![1, 1], &[0.5]).unwrap();
        let spread = |s: usize| {
            let means: Vec<f64> = (0..20)
                .map(|r| model.predict(&store, &Task::empty(1, 1), &xs, s, 100 + r).unwrap().mean.item())
                .collect();
            let m = means.iter().sum::<f64>() / 20.0;
            means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 19.0
        };
        let (small, large) = (spread(4), spread(64));
        // 16x more samples; allow generous slack around the 1/S rate
        assert!(large < small / 4.0);
    }
}
