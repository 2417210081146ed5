//! Scalar convolution kernels shared by the forward op and both gradient rules.
//!
//! Cross-correlation convention (no kernel flip), zero padding. The same three
//! primitives serve conv2d (forward = `fwd`, input grad = `dx`, weight grad =
//! `dw`) and conv2d_transpose (forward = `dx`, input grad = `fwd`, weight grad
//! = `dw` with the roles of image and output swapped).

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Contract("conv stride must be positive".into()));
        }
        if k == 0 || k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::ShapeMismatch {
                op: "conv2d (kernel vs padded input)",
                lhs: vec![k, k],
                rhs: vec![h + 2 * pad, w + 2 * pad],
            });
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Ok(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    /// Valid output index range along one spatial axis for a fixed kernel tap:
    /// all `o < out_extent` with `0 <= o*stride + tap - pad < in_extent`.
    fn valid_range(&self, tap: usize, in_extent: usize, out_extent: usize) -> Option<(usize, usize)> {
        let s = self.stride as isize;
        let off = tap as isize - self.pad as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = (in_extent as isize - 1 - off)
            .div_euclid(s)
            .min(out_extent as isize - 1);
        if hi < lo {
            None
        } else {
            Some((lo as usize, hi as usize))
        }
    }
}

/// out[co, oy, ox] = sum over ci, ky, kx of x[ci, oy*s+ky-p, ox*s+kx-p] * w[co, ci, ky, kx]
pub(crate) fn fwd(x: &[f64], wgt: &[f64], g: &ConvGeom, out: &mut [f64]) {
    debug_assert_eq!(out.len(), g.c_out * g.oh * g.ow);
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            let x_ch = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let Some((oy_lo, oy_hi)) = g.valid_range(ky, g.h, g.oh) else {
                    continue;
                };
                for kx in 0..g.k {
                    let wv = wgt[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let Some((ox_lo, ox_hi)) = g.valid_range(kx, g.w, g.ow) else {
                        continue;
                    };
                    for oy in oy_lo..=oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let xrow = &x_ch[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut out[(co * g.oh + oy) * g.ow..(co * g.oh + oy + 1) * g.ow];
                        for ox in ox_lo..=ox_hi {
                            orow[ox] += wv * xrow[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint map into the image: dx[ci, iy, ix] += dout[co, oy, ox] * w[co, ci, ky, kx].
pub(crate) fn dx(dout: &[f64], wgt: &[f64], g: &ConvGeom, dximg: &mut [f64]) {
    debug_assert_eq!(dximg.len(), g.c_in * g.h * g.w);
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            let dx_ch = &mut dximg[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let Some((oy_lo, oy_hi)) = g.valid_range(ky, g.h, g.oh) else {
                    continue;
                };
                for kx in 0..g.k {
                    let wv = wgt[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let Some((ox_lo, ox_hi)) = g.valid_range(kx, g.w, g.ow) else {
                        continue;
                    };
                    for oy in oy_lo..=oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let dorow = &dout[(co * g.oh + oy) * g.ow..(co * g.oh + oy + 1) * g.ow];
                        let dxrow = &mut dx_ch[iy * g.w..(iy + 1) * g.w];
                        for ox in ox_lo..=ox_hi {
                            dxrow[ox * g.stride + kx - g.pad] += wv * dorow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Weight gradient: dw[co, ci, ky, kx] += dout[co, oy, ox] * x[ci, oy*s+ky-p, ox*s+kx-p].
pub(crate) fn dw(x: &[f64], dout: &[f64], g: &ConvGeom, dwgt: &mut [f64]) {
    debug_assert_eq!(dwgt.len(), g.c_out * g.c_in * g.k * g.k);
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            let x_ch = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let Some((oy_lo, oy_hi)) = g.valid_range(ky, g.h, g.oh) else {
                    continue;
                };
                for kx in 0..g.k {
                    let Some((ox_lo, ox_hi)) = g.valid_range(kx, g.w, g.ow) else {
                        continue;
                    };
                    let mut acc = 0.0;
                    for oy in oy_lo..=oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let dorow = &dout[(co * g.oh + oy) * g.ow..(co * g.oh + oy + 1) * g.ow];
                        let xrow = &x_ch[iy * g.w..(iy + 1) * g.w];
                        for ox in ox_lo..=ox_hi {
                            acc += dorow[ox] * xrow[ox * g.stride + kx - g.pad];
                        }
                    }
                    dwgt[((co * g.c_in + ci) * g.k + ky) * g.k + kx] += acc;
                }
            }
        }
    }
}
