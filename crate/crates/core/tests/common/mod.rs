#![allow(dead_code)]

use lffn_core::kernels::{ConvParams, DeconvParams};
use lffn_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Six nested loops straight from the definition of a strided, padded,
/// grouped convolution.
pub fn conv_oracle(x: &Tensor, p: &ConvParams) -> Tensor {
    let s = x.shape();
    let ws = p.weights.shape();
    let (kh, kw) = (ws.h, ws.w);
    let ho = (s.h + 2 * p.padding - kh) / p.stride + 1;
    let wo = (s.w + 2 * p.padding - kw) / p.stride + 1;
    let cig = s.c / p.groups;
    let cog = ws.n / p.groups;
    let mut out = Tensor::zeros([s.n, ws.n, ho, wo]);
    for n in 0..s.n {
        for co in 0..ws.n {
            let g = co / cog;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = p.bias[co];
                    for ci in 0..cig {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                acc += p.weights.at(co, ci, ky, kx)
                                    * x.at(n, g * cig + ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    *out.at_mut(n, co, oy, ox) = acc;
                }
            }
        }
    }
    out
}

/// Transposed convolution as scatter-then-crop: every input pixel stamps
/// its kernel-weighted copy onto an uncropped canvas at stride spacing, and
/// the padding border is cut away afterwards.
pub fn deconv_oracle(x: &Tensor, p: &DeconvParams) -> Tensor {
    let s = x.shape();
    let ws = p.weights.shape();
    let (kh, kw) = (ws.h, ws.w);
    let full_h = p.stride * (s.h - 1) + kh;
    let full_w = p.stride * (s.w - 1) + kw;
    let mut canvas = Tensor::zeros([s.n, ws.c, full_h, full_w]);
    for n in 0..s.n {
        for ci in 0..s.c {
            for iy in 0..s.h {
                for ix in 0..s.w {
                    let v = x.at(n, ci, iy, ix);
                    for co in 0..ws.c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                *canvas.at_mut(n, co, iy * p.stride + ky, ix * p.stride + kx) +=
                                    v * p.weights.at(ci, co, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    }
    let ho = full_h - 2 * p.padding;
    let wo = full_w - 2 * p.padding;
    let mut out = Tensor::zeros([s.n, ws.c, ho, wo]);
    for n in 0..s.n {
        for co in 0..ws.c {
            for y in 0..ho {
                for x_ in 0..wo {
                    *out.at_mut(n, co, y, x_) = canvas.at(n, co, y + p.padding, x_ + p.padding) + p.bias[co];
                }
            }
        }
    }
    out
}
