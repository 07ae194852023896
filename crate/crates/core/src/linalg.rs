//! Cholesky factorisation and triangular solves on plain tensors.

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Relative jitter used on the first retry of a failed factorisation.
pub const JITTER_BASE: f64 = 1e-6;
/// Number of escalating (×10) jitter retries before giving up.
pub const JITTER_RETRIES: usize = 3;

fn square_dim<T: Scalar>(a: &Tensor<T>, op: &'static str) -> Result<usize> {
    let (r, c) = a.dims2(op)?;
    if r != c {
        return Err(dim_err(op, format!("expected a square matrix, got [{r}x{c}]")));
    }
    Ok(r)
}

/// Lower-triangular `L` with `L·Lᵀ = A`. Only the lower triangle of `A` is read.
pub fn cholesky<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let n = square_dim(a, "cholesky")?;
    let ad = a.data();
    let mut l = vec![T::zero(); n * n];
    for j in 0..n {
        let mut d = ad[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite {
                pivot: j,
                value: d.as_f64(),
            });
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = ad[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Tensor::new(vec![n, n], l)
}

/// Jitter that was added to the diagonal by [`cholesky_jittered`].
pub fn jitter_schedule<T: Scalar>(a: &Tensor<T>) -> Vec<T> {
    let n = a.shape()[0].max(1);
    let mean_diag = (0..a.shape()[0]).map(|i| a.at(i, i)).sum::<T>() / T::lit(n as f64);
    let scale = if mean_diag > T::zero() { mean_diag } else { T::one() };
    (0..JITTER_RETRIES)
        .map(|k| scale * T::lit(JITTER_BASE * 10f64.powi(k as i32)))
        .collect()
}

/// Cholesky with the escalating diagonal-jitter retry policy. Returns the
/// factor and the jitter that was finally applied (zero if none).
pub fn cholesky_jittered<T: Scalar>(a: &Tensor<T>) -> Result<(Tensor<T>, T)> {
    match cholesky(a) {
        Ok(l) => Ok((l, T::zero())),
        Err(Error::NotPositiveDefinite { .. }) => {
            let mut last = None;
            for jitter in jitter_schedule(a) {
                let mut aj = a.clone();
                let n = aj.shape()[0];
                for i in 0..n {
                    aj[[i, i]] += jitter;
                }
                match cholesky(&aj) {
                    Ok(l) => return Ok((l, jitter)),
                    Err(e) => last = Some(e),
                }
            }
            Err(last.expect("at least one retry"))
        }
        Err(e) => Err(e),
    }
}

/// Solves `L·X = B` (or `Lᵀ·X = B` when `transpose`) for lower-triangular `L`.
pub fn tri_solve<T: Scalar>(l: &Tensor<T>, b: &Tensor<T>, transpose: bool) -> Result<Tensor<T>> {
    let n = square_dim(l, "tri_solve")?;
    let (bn, m) = b.dims2("tri_solve")?;
    if bn != n {
        return Err(dim_err("tri_solve", format!("L is [{n}x{n}], B is [{bn}x{m}]")));
    }
    let ld = l.data();
    let mut x = b.data().to_vec();
    if !transpose {
        for i in 0..n {
            for k in 0..i {
                let lik = ld[i * n + k];
                if lik == T::zero() {
                    continue;
                }
                for j in 0..m {
                    let xk = x[k * m + j];
                    x[i * m + j] -= lik * xk;
                }
            }
            let d = ld[i * n + i];
            for j in 0..m {
                x[i * m + j] /= d;
            }
        }
    } else {
        for i in (0..n).rev() {
            for k in i + 1..n {
                let lki = ld[k * n + i];
                if lki == T::zero() {
                    continue;
                }
                for j in 0..m {
                    let xk = x[k * m + j];
                    x[i * m + j] -= lki * xk;
                }
            }
            let d = ld[i * n + i];
            for j in 0..m {
                x[i * m + j] /= d;
            }
        }
    }
    Tensor::new(vec![n, m], x)
}

/// Solves `A·X = B` for symmetric positive-definite `A` via Cholesky and two
/// triangular solves.
pub fn solve_psd<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let l = cholesky(a)?;
    let z = tri_solve(&l, b, false)?;
    tri_solve(&l, &z, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reconstruct(l: &Tensor<f64>) -> Tensor<f64> {
        l.matmul_t(l).unwrap()
    }

    #[test]
    fn identity_factor() {
        let i3 = Tensor::<f64>::eye(3);
        assert_eq!(cholesky(&i3).unwrap(), i3);
    }

    #[test]
    fn two_by_two_reconstructs() {
        let a = Tensor::<f64>::from_f64(vec![2, 2], &[4.0, 2.0, 2.0, 3.0]).unwrap();
        let l = cholesky(&a).unwrap();
        assert_eq!(l[[0, 1]], 0.0);
        assert!(reconstruct(&l).max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn indefinite_is_rejected() {
        let a = Tensor::<f64>::from_f64(vec![2, 2], &[1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(cholesky(&a), Err(Error::NotPositiveDefinite { pivot: 1, .. })));
        // jitter of at most 1e-3·mean(diag) cannot rescue an eigenvalue of -1
        assert!(cholesky_jittered(&a).is_err());
    }

    #[test]
    fn jitter_rescues_singular_gram() {
        // rank-one Gram matrix: exact factorisation fails at the second pivot
        let a = Tensor::<f64>::from_f64(vec![2, 2], &[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(cholesky(&a).is_err());
        let (l, jitter) = cholesky_jittered(&a).unwrap();
        assert!(jitter > 0.0 && jitter <= 1e-4);
        assert!(reconstruct(&l).max_abs_diff(&a) < 1e-3);
    }

    #[test]
    fn solve_identity_and_scalar() {
        let b = Tensor::<f64>::from_f64(vec![2, 2], &[1.0, -2.0, 0.5, 3.0]).unwrap();
        assert!(solve_psd(&Tensor::eye(2), &b).unwrap().max_abs_diff(&b) < 1e-15);
        let a = Tensor::<f64>::from_f64(vec![1, 1], &[2.0]).unwrap();
        let b = Tensor::<f64>::from_f64(vec![1, 1], &[4.0]).unwrap();
        // √2·√2 rounds, so exact equality is too strict
        assert!((solve_psd(&a, &b).unwrap().item() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn solve_random_spd_residual() {
        let m = Tensor::<f64>::from_f64(
            vec![4, 4],
            &[0.3, -1.2, 2.2, 0.7, 0.1, -0.4, 1.9, -0.8, 0.05, 0.6, -0.6, 1.1, 0.2, 0.9, -2.3, 0.4],
        )
        .unwrap();
        let mut a = m.matmul_t(&m).unwrap();
        for i in 0..4 {
            a[[i, i]] += 1.0;
        }
        let b = Tensor::<f64>::from_f64(vec![4, 2], &[1.0, 0.0, -1.0, 2.0, 0.5, 0.5, 3.0, -1.5]).unwrap();
        let x = solve_psd(&a, &b).unwrap();
        let r = a.matmul(&x).unwrap();
        let num: f64 = r.data().iter().zip(b.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.data().iter().map(|q| q * q).sum::<f64>().sqrt();
        assert!(num / den < 1e-10);
    }
}
