//! Same-padded, stride-1 cross-correlation and its two adjoints.
//!
//! `out[i,j,d] = Σ_{a,b,c} x[i+a-p, j+b-p, c] · τ[a,b,c,d]` with `p = (K-1)/2`
//! and zero padding outside the map. The raw kernels are generic so the
//! benchmark can run them in single precision.

use num_traits::Float;

use super::{FilterWeights, Tensor};
use crate::error::{Error, Result};
use crate::par;

#[inline]
fn shifted(i: usize, a: usize, p: usize, n: usize) -> Option<usize> {
    let s = i + a;
    if s < p || s - p >= n {
        None
    } else {
        Some(s - p)
    }
}

pub(crate) fn conv2d_raw<T: Float + Send + Sync>(
    x: &[T],
    (h, w, c): (usize, usize, usize),
    tau: &[T],
    k: usize,
    d: usize,
    out: &mut [T],
) {
    debug_assert_eq!(x.len(), h * w * c);
    debug_assert_eq!(tau.len(), k * k * c * d);
    debug_assert_eq!(out.len(), h * w * d);
    let p = k / 2;
    par::fill_chunks(out, w * d, |i, row| {
        row.iter_mut().for_each(|v| *v = T::zero());
        for a in 0..k {
            let Some(si) = shifted(i, a, p, h) else { continue };
            for j in 0..w {
                let px = &mut row[j * d..(j + 1) * d];
                for b in 0..k {
                    let Some(sj) = shifted(j, b, p, w) else { continue };
                    let xs = &x[(si * w + sj) * c..(si * w + sj + 1) * c];
                    let taps = &tau[(a * k + b) * c * d..(a * k + b + 1) * c * d];
                    for (ci, &xv) in xs.iter().enumerate() {
                        let t = &taps[ci * d..(ci + 1) * d];
                        for (o, &tv) in px.iter_mut().zip(t) {
                            *o = *o + xv * tv;
                        }
                    }
                }
            }
        }
    });
}

pub(crate) fn conv2d_transpose_raw<T: Float + Send + Sync>(
    u: &[T],
    x: &[T],
    (h, w, c): (usize, usize, usize),
    k: usize,
    d: usize,
    out: &mut [T],
) {
    debug_assert_eq!(u.len(), h * w * d);
    debug_assert_eq!(out.len(), k * k * c * d);
    let p = k / 2;
    // one chunk per kernel tap (a, b)
    par::fill_chunks(out, c * d, |tap, acc| {
        acc.iter_mut().for_each(|v| *v = T::zero());
        let (a, b) = (tap / k, tap % k);
        for i in 0..h {
            let Some(si) = shifted(i, a, p, h) else { continue };
            for j in 0..w {
                let Some(sj) = shifted(j, b, p, w) else { continue };
                let xs = &x[(si * w + sj) * c..(si * w + sj + 1) * c];
                let us = &u[(i * w + j) * d..(i * w + j + 1) * d];
                for (ci, &xv) in xs.iter().enumerate() {
                    let o = &mut acc[ci * d..(ci + 1) * d];
                    for (ov, &uv) in o.iter_mut().zip(us) {
                        *ov = *ov + xv * uv;
                    }
                }
            }
        }
    });
}

fn conv2d_input_adjoint_raw(
    u: &[f64],
    (h, w, d): (usize, usize, usize),
    tau: &[f64],
    k: usize,
    c: usize,
    out: &mut [f64],
) {
    let p = k / 2;
    // x̄[s,t,c] = Σ_{a,b,d} u[s-a+p, t-b+p, d] τ[a,b,c,d]
    par::fill_chunks(out, w * c, |s, row| {
        row.iter_mut().for_each(|v| *v = 0.0);
        for a in 0..k {
            if s + p < a || s + p - a >= h {
                continue;
            }
            let i = s + p - a;
            for t in 0..w {
                let px = &mut row[t * c..(t + 1) * c];
                for b in 0..k {
                    if t + p < b || t + p - b >= w {
                        continue;
                    }
                    let j = t + p - b;
                    let us = &u[(i * w + j) * d..(i * w + j + 1) * d];
                    let taps = &tau[(a * k + b) * c * d..(a * k + b + 1) * c * d];
                    for (ci, o) in px.iter_mut().enumerate() {
                        let tv = &taps[ci * d..(ci + 1) * d];
                        *o += us.iter().zip(tv).fold(0.0, |s, (x, y)| s + x * y);
                    }
                }
            }
        }
    });
}

/// Apply the kernel to an `H×W×C` map, producing `H×W×D`.
pub fn conv2d(x: &Tensor, tau: &FilterWeights) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    if tau.in_channels() != c {
        return Err(Error::dim("input channels (C)", tau.in_channels(), c));
    }
    let d = tau.out_channels();
    let mut out = vec![0.0; h * w * d];
    conv2d_raw(x.data(), (h, w, c), tau.data(), tau.kernel_size(), d, &mut out);
    Tensor::new(vec![h, w, d], out)
}

/// Adjoint of `conv2d` with respect to the kernel:
/// `⟨conv2d(x, τ), u⟩ = ⟨τ, conv2d_transpose(u, x, K)⟩`.
pub fn conv2d_transpose(u: &Tensor, x: &Tensor, k: usize) -> Result<FilterWeights> {
    let (h, w, c) = x.dims3()?;
    let (uh, uw, d) = u.dims3()?;
    if (uh, uw) != (h, w) {
        return Err(if uh != h {
            Error::dim("height (H)", h, uh)
        } else {
            Error::dim("width (W)", w, uw)
        });
    }
    let mut out = FilterWeights::zeros(k, c, d)?;
    conv2d_transpose_raw(
        u.data(),
        x.data(),
        (h, w, c),
        k,
        d,
        out.as_tensor_mut().data_mut(),
    );
    Ok(out)
}

/// Adjoint of `conv2d` with respect to the input map:
/// `⟨conv2d(x, τ), u⟩ = ⟨x, conv2d_input_adjoint(u, τ)⟩`.
pub fn conv2d_input_adjoint(u: &Tensor, tau: &FilterWeights) -> Result<Tensor> {
    let (h, w, d) = u.dims3()?;
    if tau.out_channels() != d {
        return Err(Error::dim("output channels (D)", tau.out_channels(), d));
    }
    let c = tau.in_channels();
    let mut out = vec![0.0; h * w * c];
    conv2d_input_adjoint_raw(u.data(), (h, w, d), tau.data(), tau.kernel_size(), c, &mut out);
    Tensor::new(vec![h, w, c], out)
}
