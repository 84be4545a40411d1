//! Grouped 2-D cross-correlation kernels.
//!
//! Every output element is produced by one sequential loop over
//! `(input channel, ky, kx, ...)`, so work can be split across output planes
//! without changing the floating-point reduction order.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let [n, cin, h, w] = input[..] else {
            return Err(Error::Dimension(format!(
                "conv2d input must be rank 4, got {input:?}"
            )));
        };
        let [cout, cin_pg, kh, kw] = weight[..] else {
            return Err(Error::Dimension(format!(
                "conv2d weight must be rank 4, got {weight:?}"
            )));
        };
        if groups == 0 || stride == 0 {
            return Err(Error::Dimension("stride and groups must be positive".into()));
        }
        if cin % groups != 0 || cout % groups != 0 {
            return Err(Error::Dimension(format!(
                "channels in={cin} out={cout} not divisible by groups={groups}"
            )));
        }
        if cin_pg != cin / groups {
            return Err(Error::Dimension(format!(
                "weight expects {cin_pg} input channels per group, input provides {}",
                cin / groups
            )));
        }
        if kh == 0 || kw == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Dimension(format!(
                "kernel {kh}x{kw} does not fit padded input {h}x{w} (padding {padding})"
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
            groups,
            oh,
            ow,
        })
    }

    pub fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }

    pub fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }

    pub fn output_dims(&self) -> [usize; 4] {
        [self.n, self.cout, self.oh, self.ow]
    }

    /// Output indices `[lo, hi)` along one axis whose input tap `o*stride + k - padding`
    /// falls inside `[0, extent)`.
    #[inline]
    fn valid_range(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride;
        let p = self.padding;
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        if extent + p <= k {
            return (0, 0);
        }
        let hi = ((extent - 1 + p - k) / s + 1).min(out_extent);
        (lo.min(hi), hi)
    }
}

pub fn forward<T: Real>(g: &ConvGeom, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let plane = g.oh * g.ow;
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    let (cin_pg, cout_pg) = (g.cin_per_group(), g.cout_per_group());
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let (n, oc) = (idx / g.cout, idx % g.cout);
        let group = oc / cout_pg;
        if let Some(b) = bias {
            dst.fill(b[oc]);
        }
        for icg in 0..cin_pg {
            let ic = group * cin_pg + icg;
            let src = &x[(n * g.cin + ic) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.oh);
                for kx in 0..g.kw {
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.ow);
                    let wv = weight[((oc * cin_pg + icg) * g.kh + ky) * g.kw + kx];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.padding;
                        let row = &src[iy * g.w..][..g.w];
                        let orow = &mut dst[oy * g.ow..][..g.ow];
                        for ox in ox_lo..ox_hi {
                            orow[ox] += wv * row[ox * g.stride + kx - g.padding];
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn backward_input<T: Real>(g: &ConvGeom, grad_out: &[T], weight: &[T]) -> Vec<T> {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut gx = vec![T::zero(); g.n * g.cin * plane_in];
    let (cin_pg, cout_pg) = (g.cin_per_group(), g.cout_per_group());
    gx.par_chunks_mut(plane_in).enumerate().for_each(|(idx, dst)| {
        let (n, ic) = (idx / g.cin, idx % g.cin);
        let group = ic / cin_pg;
        let icg = ic % cin_pg;
        for oc in group * cout_pg..(group + 1) * cout_pg {
            let gy = &grad_out[(n * g.cout + oc) * plane_out..][..plane_out];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.oh);
                for kx in 0..g.kw {
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.ow);
                    let wv = weight[((oc * cin_pg + icg) * g.kh + ky) * g.kw + kx];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.padding;
                        let grow = &gy[oy * g.ow..][..g.ow];
                        let drow = &mut dst[iy * g.w..][..g.w];
                        for ox in ox_lo..ox_hi {
                            drow[ox * g.stride + kx - g.padding] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    });
    gx
}

pub fn backward_weight<T: Real>(g: &ConvGeom, grad_out: &[T], x: &[T]) -> Vec<T> {
    let (cin_pg, cout_pg) = (g.cin_per_group(), g.cout_per_group());
    let per_oc = cin_pg * g.kh * g.kw;
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut gw = vec![T::zero(); g.cout * per_oc];
    gw.par_chunks_mut(per_oc).enumerate().for_each(|(oc, dst)| {
        let group = oc / cout_pg;
        for icg in 0..cin_pg {
            let ic = group * cin_pg + icg;
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.oh);
                for kx in 0..g.kw {
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.ow);
                    let mut acc = T::zero();
                    for n in 0..g.n {
                        let gy = &grad_out[(n * g.cout + oc) * plane_out..][..plane_out];
                        let src = &x[(n * g.cin + ic) * plane_in..][..plane_in];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.padding;
                            let row = &src[iy * g.w..][..g.w];
                            let grow = &gy[oy * g.ow..][..g.ow];
                            for ox in ox_lo..ox_hi {
                                acc += grow[ox] * row[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                    dst[(icg * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    });
    gw
}

pub fn backward_bias<T: Real>(g: &ConvGeom, grad_out: &[T]) -> Vec<T> {
    let plane = g.oh * g.ow;
    (0..g.cout)
        .map(|oc| {
            let mut acc = T::zero();
            for n in 0..g.n {
                for &v in &grad_out[(n * g.cout + oc) * plane..][..plane] {
                    acc += v;
                }
            }
            acc
        })
        .collect()
}
