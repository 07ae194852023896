//! Same-padded cross-correlation kernels (no kernel flip), zero padding.
//!
//! Signals are `[C, H, W]`, kernels `[C_out, C_in, KH, KW]` with odd extents.
//! The 1-D case is the `H = KH = 1` special case.

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

pub(crate) fn geometry<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>) -> Result<ConvGeom> {
    let (c_in, h, w) = match input.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(dim_err("conv", format!("input must be [C,H,W], got {s:?}"))),
    };
    let (c_out, kc, kh, kw) = match kernels.shape() {
        [o, c, kh, kw] => (*o, *c, *kh, *kw),
        s => return Err(dim_err("conv", format!("kernels must be [Co,Ci,KH,KW], got {s:?}"))),
    };
    if kc != c_in {
        return Err(dim_err(
            "conv",
            format!("input has {c_in} channels, kernels expect {kc}"),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(dim_err("conv", format!("kernel extents must be odd, got {kh}x{kw}")));
    }
    Ok(ConvGeom {
        c_in,
        c_out,
        h,
        w,
        kh,
        kw,
    })
}

/// Visits every (output, input, kernel) index triple with an in-bounds input.
#[inline]
fn for_each_tap(g: ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    for o in 0..g.c_out {
        for c in 0..g.c_in {
            for dy in 0..g.kh {
                for dx in 0..g.kw {
                    let kidx = ((o * g.c_in + c) * g.kh + dy) * g.kw + dx;
                    for y in 0..g.h {
                        let iy = y + dy;
                        if iy < ph || iy - ph >= g.h {
                            continue;
                        }
                        let iy = iy - ph;
                        // contiguous x-range with in-bounds input
                        let x_lo = pw.saturating_sub(dx);
                        let x_hi = (g.w + pw).saturating_sub(dx).min(g.w);
                        for x in x_lo..x_hi {
                            let ix = x + dx - pw;
                            let oidx = (o * g.h + y) * g.w + x;
                            let iidx = (c * g.h + iy) * g.w + ix;
                            f(oidx, iidx, kidx);
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_forward<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>) -> Result<Tensor<T>> {
    let g = geometry(input, kernels)?;
    let (xi, k) = (input.data(), kernels.data());
    let mut out = vec![T::zero(); g.c_out * g.h * g.w];
    for_each_tap(g, |o, i, kk| out[o] += xi[i] * k[kk]);
    Tensor::new(vec![g.c_out, g.h, g.w], out)
}

/// Gradients `(d input, d kernels)` given the output adjoint.
pub fn conv_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = geometry(input, kernels)?;
    let (xi, k, go) = (input.data(), kernels.data(), grad_out.data());
    let mut gi = vec![T::zero(); xi.len()];
    let mut gk = vec![T::zero(); k.len()];
    for_each_tap(g, |o, i, kk| {
        gi[i] += go[o] * k[kk];
        gk[kk] += go[o] * xi[i];
    });
    Ok((
        Tensor::new(input.shape().to_vec(), gi)?,
        Tensor::new(kernels.shape().to_vec(), gk)?,
    ))
}

/// 2-D same-padded cross-correlation: `[C_in,H,W] ⋆ [C_out,C_in,k,k] → [C_out,H,W]`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>) -> Result<Tensor<T>> {
    conv_forward(input, kernels)
}

/// 1-D same-padded cross-correlation: `[C_in,L] ⋆ [C_out,C_in,k] → [C_out,L]`.
pub fn conv1d<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, l) = input.dims2("conv1d")?;
    let (o, ci, k) = match kernels.shape() {
        [o, ci, k] => (*o, *ci, *k),
        s => return Err(dim_err("conv1d", format!("kernels must be [Co,Ci,K], got {s:?}"))),
    };
    let out = conv_forward(&input.reshape(&[c, 1, l])?, &kernels.reshape(&[o, ci, 1, k])?)?;
    out.reshape(&[o, l])
}
