//! Gaussian algebra on tape variables: reparameterised draws, log-densities,
//! analytic KL, products of diagonal factors and Bayesian linear regression.

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Bounds applied to every log-variance produced by a network or parameter.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

fn same_len<T: Scalar>(op: &'static str, a: Var<'_, T>, b: Var<'_, T>) -> Result<()> {
    if a.len() != b.len() {
        return Err(dim_err(op, format!("lengths {} and {}", a.len(), b.len())));
    }
    Ok(())
}

fn flat<'t, T: Scalar>(v: Var<'t, T>) -> Result<Var<'t, T>> {
    let n = v.len();
    v.reshape(&[n])
}

/// Factorised Gaussian over a flattened vector.
#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian<'t, T: Scalar> {
    pub mean: Var<'t, T>,
    pub log_var: Var<'t, T>,
}

impl<'t, T: Scalar> DiagGaussian<'t, T> {
    /// Flattens both arguments and clamps `log_var` into `[-10, 10]`.
    pub fn new(mean: Var<'t, T>, log_var: Var<'t, T>) -> Result<Self> {
        same_len("DiagGaussian::new", mean, log_var)?;
        Ok(Self {
            mean: flat(mean)?,
            log_var: flat(log_var)?.clamp(T::lit(LOG_VAR_MIN), T::lit(LOG_VAR_MAX)),
        })
    }

    /// Like [`new`](Self::new) without the clamp; used for derived
    /// quantities such as factor products whose precision legitimately
    /// accumulates beyond the per-factor bound.
    pub fn unclamped(mean: Var<'t, T>, log_var: Var<'t, T>) -> Result<Self> {
        same_len("DiagGaussian::unclamped", mean, log_var)?;
        Ok(Self {
            mean: flat(mean)?,
            log_var: flat(log_var)?,
        })
    }

    /// `N(0, var·I)` of dimension `n`.
    pub fn isotropic(tape: &'t Tape<T>, n: usize, var: T) -> Self {
        Self {
            mean: tape.zeros(&[n]),
            log_var: tape.constant(Tensor::full(&[n], var.ln())),
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn variance(&self) -> Result<Var<'t, T>> {
        self.log_var.exp()
    }

    /// `μ + exp(½·log_var) ⊙ ε`.
    pub fn reparam_sample(&self, eps: Var<'t, T>) -> Result<Var<'t, T>> {
        same_len("reparam_sample", self.mean, eps)?;
        let sd = self.log_var.scale(T::lit(0.5)).exp()?;
        self.mean.add(sd.mul(flat(eps)?)?)
    }

    pub fn log_prob(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        same_len("log_prob_diag", self.mean, x)?;
        let d = flat(x)?.sub(self.mean)?;
        let inv_var = self.log_var.neg().exp()?;
        let quad = d.square().mul(inv_var)?;
        let n = T::lit(self.len() as f64);
        Ok(quad
            .add(self.log_var)?
            .sum()
            .add_scalar(n * T::ln_2pi())
            .scale(T::lit(-0.5)))
    }
}

/// `KL(q ‖ p)` between diagonal Gaussians of equal length.
pub fn kl_diag<'t, T: Scalar>(q: &DiagGaussian<'t, T>, p: &DiagGaussian<'t, T>) -> Result<Var<'t, T>> {
    same_len("kl_diag", q.mean, p.mean)?;
    let inv_var_p = p.log_var.neg().exp()?;
    // written in terms of the log-variance gap so that q == p gives exactly 0
    let gap = q.log_var.sub(p.log_var)?;
    let maha = q.mean.sub(p.mean)?.square().mul(inv_var_p)?;
    Ok(gap
        .exp()?
        .add_scalar(-T::one())
        .sub(gap)?
        .add(maha)?
        .sum()
        .scale(T::lit(0.5)))
}

/// Per-datapoint diagonal factors, one row per datapoint.
#[derive(Clone, Copy, Debug)]
pub struct GaussianFactorSet<'t, T: Scalar> {
    pub means: Var<'t, T>,
    pub log_vars: Var<'t, T>,
}

impl<'t, T: Scalar> GaussianFactorSet<'t, T> {
    /// `means` and `log_vars` are `[N, n]`; log-variances are clamped.
    pub fn new(means: Var<'t, T>, log_vars: Var<'t, T>) -> Result<Self> {
        let (r, c) = means.value().dims2("GaussianFactorSet")?;
        if log_vars.shape() != [r, c] {
            return Err(dim_err(
                "GaussianFactorSet",
                format!("means [{r}x{c}], log_vars {:?}", log_vars.shape()),
            ));
        }
        Ok(Self {
            means,
            log_vars: log_vars.clamp(T::lit(LOG_VAR_MIN), T::lit(LOG_VAR_MAX)),
        })
    }

    pub fn len(&self) -> usize {
        self.means.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.means.shape()[1]
    }
}

/// Normalised product `p(w)·Πₙ N(w; μₙ, σₙ²)` by natural-parameter addition.
pub fn gaussian_product<'t, T: Scalar>(
    factors: &GaussianFactorSet<'t, T>,
    prior: &DiagGaussian<'t, T>,
) -> Result<DiagGaussian<'t, T>> {
    if factors.dim() != prior.len() {
        return Err(dim_err(
            "gaussian_product",
            format!("factor length {} vs prior {}", factors.dim(), prior.len()),
        ));
    }
    let prec_f = factors.log_vars.neg().exp()?;
    let prec_p = prior.log_var.neg().exp()?;
    let precision = prec_p.add(prec_f.sum_axis(0)?)?;
    let eta = prec_p
        .mul(prior.mean)?
        .add(prec_f.mul(factors.means)?.sum_axis(0)?)?;
    DiagGaussian::unclamped(eta.div(precision)?, precision.ln()?.neg())
}

/// Full-covariance Gaussian stored as mean and lower Cholesky factor of the
/// covariance.
#[derive(Clone, Copy, Debug)]
pub struct FullGaussian<'t, T: Scalar> {
    pub mean: Var<'t, T>,
    pub chol_cov: Var<'t, T>,
}

impl<'t, T: Scalar> FullGaussian<'t, T> {
    pub fn new(mean: Var<'t, T>, chol_cov: Var<'t, T>) -> Result<Self> {
        let n = mean.len();
        if chol_cov.shape() != [n, n] {
            return Err(dim_err(
                "FullGaussian::new",
                format!("mean of length {n}, factor {:?}", chol_cov.shape()),
            ));
        }
        Ok(Self {
            mean: flat(mean)?,
            chol_cov,
        })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn covariance(&self) -> Result<Var<'t, T>> {
        self.chol_cov.matmul(self.chol_cov.transpose()?)
    }

    /// `μ + L·ε`.
    pub fn sample(&self, eps: Var<'t, T>) -> Result<Var<'t, T>> {
        same_len("FullGaussian::sample", self.mean, eps)?;
        let shift = self.chol_cov.matmul(eps.as_column()?)?;
        self.mean.add(flat(shift)?)
    }

    /// `−½‖L⁻¹(x−μ)‖² − Σ ln Lᵢᵢ − (n/2)·ln 2π`.
    pub fn log_prob(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        same_len("FullGaussian::log_prob", self.mean, x)?;
        let d = flat(x)?.sub(self.mean)?.as_column()?;
        let z = self.chol_cov.tri_solve(d, false)?;
        let log_det = self.chol_cov.diag()?.ln()?.sum();
        let n = T::lit(self.len() as f64);
        Ok(z.square()
            .sum()
            .scale(T::lit(-0.5))
            .sub(log_det)?
            .add_scalar(-T::lit(0.5) * n * T::ln_2pi()))
    }
}

/// Sum of `log N(xᵢ; 0, var)` over every entry of `x`.
pub fn log_prob_isotropic<'t, T: Scalar>(x: Var<'t, T>, var: T) -> Var<'t, T> {
    let n = T::lit(x.len() as f64);
    x.square()
        .sum()
        .scale(-T::lit(0.5) / var)
        .add_scalar(-T::lit(0.5) * n * (T::ln_2pi() + var.ln()))
}

/// Posterior over `w` in `targets ≈ features·w` with per-row noise precisions
/// and prior `N(0, prior_var·I)`.
pub fn blr_posterior<'t, T: Scalar>(
    features: Var<'t, T>,
    targets: Var<'t, T>,
    precisions: Var<'t, T>,
    prior_var: T,
) -> Result<FullGaussian<'t, T>> {
    let (n, _) = features.value().dims2("blr_posterior")?;
    if targets.len() != n || precisions.len() != n {
        return Err(dim_err(
            "blr_posterior",
            format!(
                "{n} feature rows, {} targets, {} precisions",
                targets.len(),
                precisions.len()
            ),
        ));
    }
    let (mean, chol) = blr_solve(features, targets.as_column()?, precisions, prior_var)?;
    FullGaussian::new(mean, chol)
}

/// Shared-precision form: every column of `targets` (`[N, K]`) is regressed
/// on the same features with the same precisions, so one covariance serves
/// all `K` outputs. Returns the `[Din, K]` means and the covariance factor.
pub fn blr_posterior_shared<'t, T: Scalar>(
    features: Var<'t, T>,
    targets: Var<'t, T>,
    precisions: Var<'t, T>,
    prior_var: T,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (n, _) = features.value().dims2("blr_posterior")?;
    let (tn, _) = targets.value().dims2("blr_posterior")?;
    if tn != n || precisions.len() != n {
        return Err(dim_err(
            "blr_posterior",
            format!("{n} feature rows, {tn} target rows, {} precisions", precisions.len()),
        ));
    }
    blr_solve(features, targets, precisions, prior_var)
}

fn blr_solve<'t, T: Scalar>(
    features: Var<'t, T>,
    targets: Var<'t, T>,
    precisions: Var<'t, T>,
    prior_var: T,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let tape = features.tape();
    let din = features.shape()[1];
    let precisions = flat(precisions)?;
    let weighted = features.row_scale(precisions)?;
    let eye = Tensor::eye(din);
    let prior_prec = tape.constant(eye.map(|x| x / prior_var));
    let precision = features.transpose()?.matmul(weighted)?.add(prior_prec)?;
    let l_prec = precision.cholesky_jittered()?;
    // Σ = P⁻¹ and μ = P⁻¹·Φᵀ·diag(λ)·v share the precision factor
    let rhs = weighted.transpose()?.matmul(targets)?;
    let mean = l_prec.tri_solve(l_prec.tri_solve(rhs, false)?, true)?;
    let inv_l = l_prec.tri_solve(tape.constant(eye), false)?;
    let cov = inv_l.transpose()?.matmul(inv_l)?;
    let chol_cov = cov.cholesky_jittered()?;
    Ok((mean, chol_cov))
}
