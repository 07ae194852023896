use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::task::Task;
use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelKind {
    Se,
    Periodic,
    Laplacian,
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "se" => Ok(Self::Se),
            "periodic" => Ok(Self::Periodic),
            "laplacian" => Ok(Self::Laplacian),
            other => Err(Error::Contract(format!("unknown kernel {other:?}"))),
        }
    }
}

/// Stationary covariance function with its hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub lengthscale: f64,
    /// Signal variance `s²`.
    pub variance: f64,
    /// Only read by the periodic kernel.
    pub period: f64,
}

impl KernelSpec {
    pub fn se(lengthscale: f64, variance: f64) -> Self {
        Self {
            kind: KernelKind::Se,
            lengthscale,
            variance,
            period: 1.0,
        }
    }
}

pub fn kernel_eval(spec: &KernelSpec, x: &[f64], x2: &[f64]) -> f64 {
    let d2: f64 = x.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum();
    let l = spec.lengthscale;
    match spec.kind {
        KernelKind::Se => spec.variance * (-d2 / (2.0 * l * l)).exp(),
        KernelKind::Laplacian => spec.variance * (-d2.sqrt() / l).exp(),
        KernelKind::Periodic => {
            let s = (std::f64::consts::PI * d2.sqrt() / spec.period).sin();
            spec.variance * (-2.0 * s * s / (l * l)).exp()
        }
    }
}

/// Draws `N ~ U{lo..=hi}` inputs uniformly in `interval`, a GP function
/// sample at those inputs, and adds Gaussian noise of sd `noise_sd`.
pub fn gp_sample_task<T: Scalar, R: Rng + ?Sized>(
    spec: &KernelSpec,
    n_range: (usize, usize),
    interval: (f64, f64),
    noise_sd: f64,
    rng: &mut R,
) -> Result<Task<T>> {
    let (lo, hi) = n_range;
    if lo > hi || interval.0 >= interval.1 || noise_sd < 0.0 {
        return Err(Error::Contract(format!(
            "bad GP task parameters: n_range {n_range:?}, interval {interval:?}, noise {noise_sd}"
        )));
    }
    let n = rng.random_range(lo..=hi);
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(interval.0..interval.1)).collect();
    let ys = gp_sample_at(spec, &xs, noise_sd, rng)?;
    Task::from_xy(&xs, &ys)
}

/// One GP function draw at scalar inputs `xs` plus Gaussian noise of sd `noise_sd`.
pub fn gp_sample_at<R: Rng + ?Sized>(spec: &KernelSpec, xs: &[f64], noise_sd: f64, rng: &mut R) -> Result<Vec<f64>> {
    let n = xs.len();
    let mut gram = Tensor::<f64>::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            gram[[i, j]] = kernel_eval(spec, &[xs[i]], &[xs[j]]);
        }
    }
    let f = if n == 0 {
        Vec::new()
    } else {
        let (l, _) = linalg::cholesky_jittered(&gram)?;
        let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        l.matmul(&Tensor::from_f64(vec![n, 1], &z)?)?.into_data()
    };
    Ok(f.iter()
        .map(|&fi| {
            let e: f64 = StandardNormal.sample(rng);
            fi + noise_sd * e
        })
        .collect())
}

/// Constants of the cubic dataset with a central gap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CubicGap {
    /// Inputs are uniform on `[-outer, -inner] ∪ [inner, outer]`.
    pub inner: f64,
    pub outer: f64,
    pub n: usize,
    /// `y = scale·x³ + ε`.
    pub scale: f64,
    pub noise_sd: f64,
}

impl Default for CubicGap {
    fn default() -> Self {
        Self {
            inner: 1.0,
            outer: 2.0,
            n: 40,
            scale: 1.0,
            noise_sd: 0.2,
        }
    }
}

pub fn cubic_gap_task<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> Result<Task<T>> {
    cubic_gap_task_with(&CubicGap::default(), rng)
}

pub fn cubic_gap_task_with<T: Scalar, R: Rng + ?Sized>(c: &CubicGap, rng: &mut R) -> Result<Task<T>> {
    let noise = Normal::new(0.0, c.noise_sd).map_err(|e| Error::Contract(e.to_string()))?;
    let mut xs = Vec::with_capacity(c.n);
    let mut ys = Vec::with_capacity(c.n);
    for _ in 0..c.n {
        let mag = rng.random_range(c.inner..=c.outer);
        let x = if rng.random::<bool>() { mag } else { -mag };
        xs.push(x);
        ys.push(c.scale * x * x * x + noise.sample(rng));
    }
    Task::from_xy(&xs, &ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernels_at_zero_distance() {
        for kind in [KernelKind::Se, KernelKind::Periodic, KernelKind::Laplacian] {
            let k = KernelSpec { kind, lengthscale: 0.4, variance: 2.5, period: 1.3 };
            assert_eq!(kernel_eval(&k, &[0.3], &[0.3]), 2.5);
        }
        let se = KernelSpec::se(0.7, 1.0);
        assert!((kernel_eval(&se, &[0.0], &[0.7]) - 0.606_530_7).abs() < 1e-7);
    }

    #[test]
    fn noise_free_cubic_is_exact_and_gapped() {
        let c = CubicGap { noise_sd: 0.0, ..CubicGap::default() };
        let t: Task<f64> = cubic_gap_task_with(&c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for i in 0..t.len() {
            let x = t.x[[i, 0]];
            assert!(x.abs() >= c.inner && x.abs() <= c.outer);
            assert_eq!(t.y[[i, 0]], x * x * x);
        }
    }

    #[test]
    fn gp_task_is_reproducible() {
        let spec = KernelSpec::se(0.5, 1.0);
        let a: Task<f64> = gp_sample_task(&spec, (10, 50), (-2.0, 2.0), 0.05, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b: Task<f64> = gp_sample_task(&spec, (10, 50), (-2.0, 2.0), 0.05, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!((10..=50).contains(&a.len()));
    }
}
