//! Conditional neural processes: a mean-aggregating CNP and two convolutional
//! variants, one working off the grid on 1-D inputs and one working directly
//! on image grids.

use rand::Rng;

use crate::bnn::{log_likelihood, Likelihood};
use crate::data::{ImageTask, Task};
use crate::distributions::{LOG_VAR_MAX, LOG_VAR_MIN};
use crate::error::{dim_err, Error, Result};
use crate::networks::{set_conv, ConvSpec, GridCnn, Mlp, SetConvConfig};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Activation, Var};
use crate::tensor::Tensor;

/// Added to every predictive variance.
pub const VAR_FLOOR: f64 = 1e-6;
/// Keeps the density-normalised value channel finite where no context is near.
pub const DENSITY_EPS: f64 = 1e-8;

/// Factorised per-target predictions, `[T, P]` each.
#[derive(Clone, Copy, Debug)]
pub enum NpPrediction<'t, T: Scalar> {
    Gaussian { mean: Var<'t, T>, var: Var<'t, T> },
    Bernoulli { logits: Var<'t, T> },
}

impl<'t, T: Scalar> NpPrediction<'t, T> {
    /// Splits a `[T, 2P]` head output into mean and floored variance.
    pub fn from_head(out: Var<'t, T>) -> Result<Self> {
        let (_, c) = out.value().dims2("NpPrediction::from_head")?;
        if c % 2 != 0 {
            return Err(dim_err("NpPrediction::from_head", format!("{c} head outputs")));
        }
        let p = c / 2;
        let mean = out.narrow(1, 0, p)?;
        let var = out
            .narrow(1, p, p)?
            .clamp(T::lit(LOG_VAR_MIN), T::lit(LOG_VAR_MAX))
            .exp()?
            .add_scalar(T::lit(VAR_FLOOR));
        Ok(Self::Gaussian { mean, var })
    }

    /// Predictive mean (probabilities for Bernoulli outputs).
    pub fn mean(&self) -> Var<'t, T> {
        match *self {
            Self::Gaussian { mean, .. } => mean,
            Self::Bernoulli { logits } => logits.sigmoid(),
        }
    }
}

/// `Σ_t log p(y_t | prediction_t)`.
pub fn np_log_likelihood<'t, T: Scalar>(pred: &NpPrediction<'t, T>, y: Var<'t, T>) -> Result<Var<'t, T>> {
    match *pred {
        NpPrediction::Gaussian { mean, var } => {
            if mean.shape() != y.shape() || var.shape() != y.shape() {
                return Err(dim_err(
                    "np_log_likelihood",
                    format!("prediction {:?}, targets {:?}", mean.shape(), y.shape()),
                ));
            }
            let n = T::lit(y.len() as f64);
            let quad = y.sub(mean)?.square().div(var)?.sum();
            Ok(quad
                .add(var.ln()?.sum())?
                .add_scalar(n * T::ln_2pi())
                .scale(T::lit(-0.5)))
        }
        NpPrediction::Bernoulli { logits } => log_likelihood(&Likelihood::Bernoulli, None, logits, y),
    }
}

/// Encoder–mean–decoder CNP.
#[derive(Clone, Debug, PartialEq)]
pub struct Cnp {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub x_dim: usize,
    pub y_dim: usize,
    pub r_dim: usize,
}

impl Cnp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        x_dim: usize,
        y_dim: usize,
        hidden: &[usize],
        r_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut enc = vec![x_dim + y_dim];
        enc.extend_from_slice(hidden);
        enc.push(r_dim);
        let mut dec = vec![r_dim + x_dim];
        dec.extend_from_slice(hidden);
        dec.push(2 * y_dim);
        Self {
            encoder: Mlp::new(store, &format!("{name}.enc"), &enc, activation, rng),
            decoder: Mlp::new(store, &format!("{name}.dec"), &dec, activation, rng),
            x_dim,
            y_dim,
            r_dim,
        }
    }

    /// Mean of the per-context encodings, `[1, R]` (zeros for no context).
    pub fn represent<'t, T: Scalar>(&self, b: &Bound<'t, T>, context: &Task<T>) -> Result<Var<'t, T>> {
        let tape = b.tape();
        if context.x_dim() != self.x_dim || context.y_dim() != self.y_dim {
            return Err(dim_err("cnp_predict", "context dimensions differ from the model"));
        }
        if context.is_empty() {
            return Ok(tape.zeros(&[1, self.r_dim]));
        }
        let xy = Var::concat(&[tape.constant(context.x.clone()), tape.constant(context.y.clone())], 1)?;
        let enc = self.encoder.forward(b, xy)?;
        Ok(enc
            .sum_axis(0)?
            .reshape(&[1, self.r_dim])?
            .scale(T::lit(1.0 / context.len() as f64)))
    }

    pub fn decode<'t, T: Scalar>(&self, b: &Bound<'t, T>, r: Var<'t, T>, targets: &Tensor<T>) -> Result<NpPrediction<'t, T>> {
        let (n, d) = targets.dims2("cnp_predict")?;
        if d != self.x_dim {
            return Err(dim_err("cnp_predict", format!("targets have {d} inputs, model {}", self.x_dim)));
        }
        let tape = r.tape();
        let rs = r.index_rows(&vec![0; n])?;
        let out = self.decoder.forward(b, Var::concat(&[rs, tape.constant(targets.clone())], 1)?)?;
        NpPrediction::from_head(out)
    }

    pub fn predict<'t, T: Scalar>(
        &self,
        b: &Bound<'t, T>,
        context: &Task<T>,
        targets: &Tensor<T>,
    ) -> Result<NpPrediction<'t, T>> {
        self.decode(b, self.represent(b, context)?, targets)
    }
}

/// Hyperparameters of the off-grid 1-D ConvCNP.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvCnp1dConfig {
    pub points_per_unit: f64,
    /// Grid extends this far beyond the outermost context/target input.
    pub margin: f64,
    pub init_lengthscale: f64,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub embedding: usize,
}

impl Default for ConvCnp1dConfig {
    fn default() -> Self {
        Self {
            points_per_unit: 125.0,
            margin: 0.1,
            init_lengthscale: 0.096,
            channels: vec![16, 32, 16],
            kernel: 11,
            embedding: 32,
        }
    }
}

/// Off-grid ConvCNP for scalar inputs: SetConv onto a uniform grid, a 1-D
/// CNN, a SetConv back to the targets and a pointwise MLP head.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvCnp1d {
    pub cfg: ConvCnp1dConfig,
    pub y_dim: usize,
    pub encoder: SetConvConfig,
    pub cnn: GridCnn,
    pub decoder: SetConvConfig,
    pub head: Mlp,
}

impl ConvCnp1d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: ConvCnp1dConfig,
        y_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.points_per_unit <= 0.0 || cfg.margin < 0.0 || cfg.kernel % 2 == 0 {
            return Err(Error::Contract(format!(
                "bad ConvCNP grid: {} points per unit, margin {}, kernel {}",
                cfg.points_per_unit, cfg.margin, cfg.kernel
            )));
        }
        let encoder = SetConvConfig::new(store, &format!("{name}.enc"), cfg.init_lengthscale, true);
        let mut specs: Vec<ConvSpec> = cfg
            .channels
            .iter()
            .map(|&c| ConvSpec { c_out: c, kernel: cfg.kernel, residual: false, activate: true })
            .collect();
        specs.push(ConvSpec { c_out: cfg.embedding, kernel: cfg.kernel, residual: false, activate: false });
        let cnn = GridCnn::new(store, &format!("{name}.cnn"), 1, 1 + y_dim, &specs, Activation::Relu, rng)?;
        let decoder = SetConvConfig::new(store, &format!("{name}.dec"), cfg.init_lengthscale, false);
        let head = Mlp::new(
            store,
            &format!("{name}.head"),
            &[cfg.embedding, cfg.embedding, 2 * y_dim],
            Activation::Relu,
            rng,
        );
        Ok(Self { cfg, y_dim, encoder, cnn, decoder, head })
    }

    /// Grid points `k / ppu` covering every input plus the margin. Using
    /// integer multiples of the spacing keeps the grid aligned under shifts
    /// by whole cells.
    pub fn grid<T: Scalar>(&self, context: &Task<T>, targets: &Tensor<T>) -> Tensor<T> {
        let xs = context.x.data().iter().chain(targets.data()).map(|v| v.as_f64());
        let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
        let ppu = self.cfg.points_per_unit;
        let k0 = ((lo - self.cfg.margin) * ppu).floor() as i64;
        let k1 = ((hi + self.cfg.margin) * ppu).ceil() as i64;
        let pts: Vec<T> = (k0..=k1).map(|k| T::lit(k as f64 / ppu)).collect();
        let n = pts.len();
        Tensor::new(vec![n, 1], pts).expect("column grid")
    }

    pub fn predict<'t, T: Scalar>(
        &self,
        b: &Bound<'t, T>,
        context: &Task<T>,
        targets: &Tensor<T>,
    ) -> Result<NpPrediction<'t, T>> {
        let tape = b.tape();
        if context.x_dim() != 1 || targets.dims2("convcnp_predict")?.1 != 1 || context.y_dim() != self.y_dim {
            return Err(dim_err("convcnp_predict", "off-grid ConvCNP takes scalar inputs"));
        }
        if targets.shape()[0] == 0 {
            return Err(Error::Contract("convcnp_predict needs at least one target".into()));
        }
        let grid = self.grid(context, targets);
        let g = grid.shape()[0];
        let h = set_conv(b, &self.encoder, &context.x, tape.constant(context.y.clone()), &grid)?;
        let density = h.narrow(1, 0, 1)?;
        let inv = tape
            .ones(&[g])
            .div(density.reshape(&[g])?.add_scalar(T::lit(DENSITY_EPS)))?;
        let values = h.narrow(1, 1, self.y_dim)?.row_scale(inv)?;
        let signal = Var::concat(&[density, values], 1)?.transpose()?;
        let emb = self.cnn.forward(b, signal)?.transpose()?;
        let at_targets = set_conv(b, &self.decoder, &grid, emb, targets)?;
        NpPrediction::from_head(self.head.forward(b, at_targets)?)
    }
}

/// Hyperparameters of the on-grid 2-D ConvCNP.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvCnp2dConfig {
    pub channels: usize,
    pub outer_kernel: usize,
    pub residual_layers: usize,
    pub residual_kernel: usize,
    pub head_hidden: usize,
}

impl Default for ConvCnp2dConfig {
    fn default() -> Self {
        Self {
            channels: 256,
            outer_kernel: 5,
            residual_layers: 3,
            residual_kernel: 3,
            head_hidden: 128,
        }
    }
}

/// On-grid ConvCNP: the masked image and its mask enter a residual CNN and
/// a per-pixel MLP emits the predictive parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvCnp2d {
    pub cfg: ConvCnp2dConfig,
    pub y_dim: usize,
    pub cnn: GridCnn,
    pub head: Mlp,
}

impl ConvCnp2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: ConvCnp2dConfig,
        y_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let c = cfg.channels;
        let mut specs = vec![ConvSpec { c_out: c, kernel: cfg.outer_kernel, residual: false, activate: true }];
        specs.extend((0..cfg.residual_layers).map(|_| ConvSpec {
            c_out: c,
            kernel: cfg.residual_kernel,
            residual: true,
            activate: true,
        }));
        specs.push(ConvSpec { c_out: c, kernel: cfg.outer_kernel, residual: false, activate: true });
        let cnn = GridCnn::new(store, &format!("{name}.cnn"), 2, 2 * y_dim, &specs, Activation::Relu, rng)?;
        let head = Mlp::new(
            store,
            &format!("{name}.head"),
            &[c, cfg.head_hidden, 2 * y_dim],
            Activation::Relu,
            rng,
        );
        Ok(Self { cfg, y_dim, cnn, head })
    }

    /// Predictions at every pixel (row-major) from the unmasked pixels of
    /// `values: [H·W, P]`.
    pub fn predict_grid<'t, T: Scalar>(
        &self,
        b: &Bound<'t, T>,
        height: usize,
        width: usize,
        mask: &[bool],
        values: &Tensor<T>,
    ) -> Result<NpPrediction<'t, T>> {
        let n = height * width;
        let p = self.y_dim;
        if mask.len() != n || values.shape() != [n, p] {
            return Err(dim_err(
                "convcnp_predict",
                format!("{}x{} grid, mask of {}, values {:?}", height, width, mask.len(), values.shape()),
            ));
        }
        // channels: one density per output followed by the masked values
        let mut signal = Tensor::zeros(&[2 * p, height, width]);
        for k in 0..n {
            if mask[k] {
                for j in 0..p {
                    signal.data_mut()[j * n + k] = T::one();
                    signal.data_mut()[(p + j) * n + k] = values[[k, j]];
                }
            }
        }
        let tape = b.tape();
        let feat = self.cnn.forward(b, tape.constant(signal))?;
        let c = self.cfg.channels;
        let pixels = feat.reshape(&[c, n])?.transpose()?;
        NpPrediction::from_head(self.head.forward(b, pixels)?)
    }

    pub fn predict<'t, T: Scalar>(&self, b: &Bound<'t, T>, task: &ImageTask<T>) -> Result<NpPrediction<'t, T>> {
        self.predict_grid(b, task.height(), task.width(), &task.mask, &task.task.y)
    }
}
