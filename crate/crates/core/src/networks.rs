//! Deterministic network components: bias-folded MLPs, the per-layer
//! inference-network bank, SetConv encoders and grid CNNs.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::distributions::{LOG_VAR_MAX, LOG_VAR_MIN};
use crate::error::{dim_err, Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Activation, Var};
use crate::tensor::Tensor;

fn gaussian_init<T: Scalar, R: Rng + ?Sized>(shape: &[usize], var: f64, rng: &mut R) -> Tensor<T> {
    let sd = var.sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            T::lit(sd * e)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Weight matrix `[fan_in + 1, fan_out]` whose last row is the bias.
fn dense_init<T: Scalar, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let mut w = gaussian_init::<T, R>(&[fan_in + 1, fan_out], 1.0 / fan_in.max(1) as f64, rng);
    for j in 0..fan_out {
        w[[fan_in, j]] = T::zero();
    }
    w
}

/// Multi-layer perceptron with biases folded into the weights: each layer
/// computes `[h, 1]·W`. The final layer is left un-activated.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub widths: Vec<usize>,
    pub activation: Activation,
    layers: Vec<ParamId>,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| store.add(format!("{name}.w{i}"), dense_init(w[0], w[1], rng)))
            .collect();
        Self {
            widths: widths.to_vec(),
            activation,
            layers,
        }
    }

    pub fn layer_ids(&self) -> &[ParamId] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    /// Row-wise forward pass of an `[N, in]` matrix.
    pub fn forward<'t, T: Scalar>(&self, b: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (_, d) = x.value().dims2("mlp_forward")?;
        if d != self.input_dim() {
            return Err(dim_err(
                "mlp_forward",
                format!("input width {d}, network expects {}", self.input_dim()),
            ));
        }
        let mut h = x;
        for (i, &id) in self.layers.iter().enumerate() {
            if i > 0 {
                h = h.activation(self.activation);
            }
            h = h.append_ones()?.matmul(b.get(id))?;
        }
        Ok(h)
    }

    /// Forward pass of a single input vector.
    pub fn forward_vec<'t, T: Scalar>(&self, b: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let n = x.len();
        let out = self.forward(b, x.reshape(&[1, n])?)?;
        out.reshape(&[self.output_dim()])
    }
}

/// Amortised pseudo-observation parameters for one primary layer.
#[derive(Clone, Copy, Debug)]
pub struct PseudoParams<'t, T: Scalar> {
    /// `[N, D^ℓ]` pseudo-means; `None` for the final layer, whose pseudo-means
    /// are the observed outputs.
    pub mean: Option<Var<'t, T>>,
    /// `[N, D^ℓ]` log pseudo-variances, clamped to `[-10, 10]`.
    pub log_var: Var<'t, T>,
}

/// One inference network per primary layer, each reading `concat(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceNetBank {
    nets: Vec<Mlp>,
    layer_widths: Vec<usize>,
}

impl InferenceNetBank {
    /// `layer_widths` are the primary widths `[D⁰, …, D^L]`; `hidden` the
    /// hidden widths of each inference network.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        layer_widths: &[usize],
        y_dim: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let depth = layer_widths.len() - 1;
        let input = layer_widths[0] + y_dim;
        let nets = (1..=depth)
            .map(|l| {
                let out = if l == depth { layer_widths[l] } else { 2 * layer_widths[l] };
                let mut widths = vec![input];
                widths.extend_from_slice(hidden);
                widths.push(out);
                Mlp::new(store, &format!("{name}.g{l}"), &widths, activation, rng)
            })
            .collect();
        Self {
            nets,
            layer_widths: layer_widths.to_vec(),
        }
    }

    pub fn nets(&self) -> &[Mlp] {
        &self.nets
    }

    pub fn depth(&self) -> usize {
        self.nets.len()
    }

    /// Pseudo-parameters for every datapoint of `x: [N, D]`, `y: [N, P]`.
    pub fn infer<'t, T: Scalar>(
        &self,
        b: &Bound<'t, T>,
        x: Var<'t, T>,
        y: Var<'t, T>,
    ) -> Result<Vec<PseudoParams<'t, T>>> {
        let input = Var::concat(&[x, y], 1)?;
        let depth = self.depth();
        self.nets
            .iter()
            .enumerate()
            .map(|(i, net)| {
                let out = net.forward(b, input)?;
                let d = self.layer_widths[i + 1];
                let clamp = |v: Var<'t, T>| v.clamp(T::lit(LOG_VAR_MIN), T::lit(LOG_VAR_MAX));
                if i + 1 == depth {
                    Ok(PseudoParams {
                        mean: None,
                        log_var: clamp(out),
                    })
                } else {
                    Ok(PseudoParams {
                        mean: Some(out.narrow(1, 0, d)?),
                        log_var: clamp(out.narrow(1, d, d)?),
                    })
                }
            })
            .collect()
    }
}

/// `exp(−d²/σ²)`.
pub fn rbf_weight<T: Scalar>(distance: T, lengthscale: T) -> T {
    let r = distance / lengthscale;
    (-r * r).exp()
}

/// Trainable SetConv: a log-lengthscale and whether to emit the density channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SetConvConfig {
    pub log_lengthscale: ParamId,
    pub density: bool,
}

impl SetConvConfig {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, lengthscale: f64, density: bool) -> Self {
        Self {
            log_lengthscale: store.add(
                format!("{name}.log_lengthscale"),
                Tensor::scalar(T::lit(lengthscale.ln())),
            ),
            density,
        }
    }
}

/// Squared Euclidean distances between the rows of `a: [Q, D]` and `b: [C, D]`.
pub fn sq_distances<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (q, d) = a.dims2("sq_distances")?;
    let (c, d2) = b.dims2("sq_distances")?;
    if d != d2 {
        return Err(dim_err("sq_distances", format!("dimensions {d} and {d2}")));
    }
    let mut out = Tensor::zeros(&[q, c]);
    for i in 0..q {
        for j in 0..c {
            let mut s = T::zero();
            for k in 0..d {
                let diff = a[[i, k]] - b[[j, k]];
                s += diff * diff;
            }
            out[[i, j]] = s;
        }
    }
    Ok(out)
}

/// SetConv: row `q` is `Σ_c (1, y_c)·w(‖x_q − x_c‖)` (the leading density
/// column is dropped when `cfg.density` is false).
pub fn set_conv<'t, T: Scalar>(
    b: &Bound<'t, T>,
    cfg: &SetConvConfig,
    context_x: &Tensor<T>,
    context_y: Var<'t, T>,
    queries: &Tensor<T>,
) -> Result<Var<'t, T>> {
    let (nq, _) = queries.dims2("set_conv")?;
    if nq == 0 {
        return Err(Error::Contract("set_conv needs at least one query".into()));
    }
    let (nc, _) = context_y.value().dims2("set_conv")?;
    if context_x.shape()[0] != nc {
        return Err(dim_err(
            "set_conv",
            format!("{} context inputs, {nc} outputs", context_x.shape()[0]),
        ));
    }
    let tape = context_y.tape();
    let d2 = tape.constant(sq_distances(queries, context_x)?);
    let inv_l2 = b.get(cfg.log_lengthscale).scale(T::lit(-2.0)).exp()?;
    let w = d2.scale_by(inv_l2)?.neg().exp()?;
    let channels = if cfg.density {
        Var::concat(&[tape.ones(&[nc, 1]), context_y], 1)?
    } else {
        context_y
    };
    w.matmul(channels)
}

/// Layout of one convolution layer in a [`GridCnn`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_out: usize,
    pub kernel: usize,
    /// Adds the layer input to its output; requires equal channel counts.
    pub residual: bool,
    /// Applies the network activation after the bias.
    pub activate: bool,
}

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    spec: ConvSpec,
    c_in: usize,
    kernel: ParamId,
    bias: ParamId,
}

/// Stack of same-padded convolutions over `[C, L]` (1-D) or `[C, H, W]`
/// (2-D) signals.
#[derive(Clone, Debug, PartialEq)]
pub struct GridCnn {
    pub dims: usize,
    pub activation: Activation,
    layers: Vec<ConvLayer>,
}

impl GridCnn {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: usize,
        c_in: usize,
        specs: &[ConvSpec],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if !(1..=2).contains(&dims) {
            return Err(Error::Contract(format!("grid CNNs are 1-D or 2-D, got {dims}")));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut c = c_in;
        for (i, &spec) in specs.iter().enumerate() {
            if spec.residual && spec.c_out != c {
                return Err(dim_err(
                    "GridCnn",
                    format!("residual layer {i} maps {c} to {} channels", spec.c_out),
                ));
            }
            let shape: Vec<usize> = if dims == 1 {
                vec![spec.c_out, c, spec.kernel]
            } else {
                vec![spec.c_out, c, spec.kernel, spec.kernel]
            };
            let fan_in = c * spec.kernel.pow(dims as u32);
            let kernel = store.add(
                format!("{name}.k{i}"),
                gaussian_init(&shape, 1.0 / fan_in as f64, rng),
            );
            let bias = store.add(format!("{name}.b{i}"), Tensor::zeros(&[spec.c_out]));
            layers.push(ConvLayer {
                spec,
                c_in: c,
                kernel,
                bias,
            });
            c = spec.c_out;
        }
        Ok(Self {
            dims,
            activation,
            layers,
        })
    }

    pub fn output_channels(&self) -> Option<usize> {
        self.layers.last().map(|l| l.spec.c_out)
    }

    pub fn kernel_ids(&self) -> Vec<ParamId> {
        self.layers.iter().map(|l| l.kernel).collect()
    }

    pub fn forward<'t, T: Scalar>(&self, b: &Bound<'t, T>, signal: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut h = signal;
        for layer in &self.layers {
            let c = h.shape().first().copied().unwrap_or(0);
            if c != layer.c_in {
                return Err(dim_err(
                    "grid_cnn_forward",
                    format!("signal has {c} channels, layer expects {}", layer.c_in),
                ));
            }
            let k = b.get(layer.kernel);
            let conv = if self.dims == 1 { h.conv1d(k)? } else { h.conv2d(k)? };
            let mut out = conv.add_channel_bias(b.get(layer.bias))?;
            if layer.spec.activate {
                out = out.activation(self.activation);
            }
            if layer.spec.residual {
                out = out.add(h)?;
            }
            h = out;
        }
        Ok(h)
    }
}
