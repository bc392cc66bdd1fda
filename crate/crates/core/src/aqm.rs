//! Channel gating for fused feature maps, and the squeeze-excitation block.
//!
//! The adaptive quantization module summarises every channel plane with
//! stochastic pooling, mixes the summaries with a bias-free `C × C` matrix
//! and rescales each channel by the sigmoid of the result.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{
    fully_connected, fully_connected_backward, global_avg_pool, global_avg_pool_backward, sigmoid_scalar,
    stochastic_pool_backward, stochastic_pool_channel_traced, FcParams, PoolMode, PooledValue,
};
use crate::linalg::Matrix;
use crate::params::{join, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AqmParams {
    pub w_fc: Matrix,
    pub mode: PoolMode,
}

/// Per-channel gates of one batch item, each strictly inside (0, 1) up to
/// floating-point saturation.
#[derive(Clone, Debug, PartialEq)]
pub struct GateVector {
    pub values: Vec<f64>,
}

impl AqmParams {
    /// Zero mixing matrix: every gate starts at exactly 0.5.
    pub fn zeros(channels: usize, mode: PoolMode) -> Self {
        Self {
            w_fc: Matrix::zeros(channels, channels),
            mode,
        }
    }

    pub fn channels(&self) -> usize {
        self.w_fc.rows()
    }

    fn check(&self, y: &Tensor) -> Result<()> {
        if self.w_fc.rows() != self.w_fc.cols() {
            return Err(Error::config(format!(
                "AQM mixing matrix must be square, got {}x{}",
                self.w_fc.rows(),
                self.w_fc.cols()
            )));
        }
        if y.shape().c != self.channels() {
            return Err(Error::dim(format!(
                "AQM: input has {} channels, mixing matrix is {}x{}",
                y.shape().c,
                self.w_fc.rows(),
                self.w_fc.cols()
            )));
        }
        Ok(())
    }
}

impl ParamSet for AqmParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[f64])) {
        self.w_fc.visit(&join(prefix, "w_fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &mut [f64])) {
        self.w_fc.visit_mut(&join(prefix, "w_fc"), f);
    }
}

#[derive(Clone, Debug)]
pub struct AqmCache {
    input: Tensor,
    pooled: Vec<Vec<PooledValue>>,
    gates: Vec<GateVector>,
}

impl AqmCache {
    pub fn gates(&self) -> &[GateVector] {
        &self.gates
    }
}

pub fn aqm_forward<R: Rng + ?Sized>(y: &Tensor, params: &AqmParams, rng: &mut R) -> Result<(Tensor, Vec<GateVector>)> {
    aqm_forward_traced(y, params, rng).map(|(out, cache)| (out, cache.gates))
}

pub fn aqm_forward_traced<R: Rng + ?Sized>(y: &Tensor, params: &AqmParams, rng: &mut R) -> Result<(Tensor, AqmCache)> {
    params.check(y)?;
    let s = y.shape();
    let mut out = y.clone();
    let mut pooled_all = Vec::with_capacity(s.n);
    let mut gates_all = Vec::with_capacity(s.n);
    for n in 0..s.n {
        let pooled = (0..s.c)
            .map(|c| stochastic_pool_channel_traced(y.plane(n, c), rng, params.mode))
            .collect::<Result<Vec<_>>>()?;
        let p: Vec<f64> = pooled.iter().map(|v| v.value).collect();
        let f = params.w_fc.mul_vec(&p);
        let g: Vec<f64> = f.into_iter().map(sigmoid_scalar).collect();
        for (c, &gc) in g.iter().enumerate() {
            out.plane_mut(n, c).iter_mut().for_each(|v| *v *= gc);
        }
        pooled_all.push(pooled);
        gates_all.push(GateVector { values: g });
    }
    Ok((
        out,
        AqmCache {
            input: y.clone(),
            pooled: pooled_all,
            gates: gates_all,
        },
    ))
}

/// Gradients with respect to the gated input and the mixing matrix.
///
/// Train-mode caches route the pooling gradient straight through the
/// sampled element of each plane.
pub fn aqm_backward(cache: &AqmCache, params: &AqmParams, upstream: &Tensor) -> Result<(Tensor, Matrix)> {
    let y = &cache.input;
    upstream.expect_shape(y.shape(), "AQM upstream")?;
    let s = y.shape();
    let mut dy = Tensor::zeros(s);
    let mut dw = Matrix::zeros(s.c, s.c);
    for n in 0..s.n {
        let g = &cache.gates[n].values;
        let mut df = vec![0.0; s.c];
        for c in 0..s.c {
            let up = upstream.plane(n, c);
            let dg: f64 = up.iter().zip(y.plane(n, c)).map(|(u, v)| u * v).sum();
            df[c] = dg * g[c] * (1.0 - g[c]);
            dy.plane_mut(n, c).iter_mut().zip(up).for_each(|(d, u)| *d = g[c] * u);
        }
        let p: Vec<f64> = cache.pooled[n].iter().map(|v| v.value).collect();
        for (r, &d) in df.iter().enumerate() {
            for (c, &pc) in p.iter().enumerate() {
                dw.data_mut()[r * s.c + c] += d * pc;
            }
        }
        let dp = params.w_fc.tmul_vec(&df);
        for c in 0..s.c {
            stochastic_pool_backward(y.plane(n, c), &cache.pooled[n][c], dp[c], dy.plane_mut(n, c));
        }
    }
    Ok((dy, dw))
}

/// Squeeze-excitation parameters: `C → C/r → C` with biases.
#[derive(Clone, Debug, PartialEq)]
pub struct SeBlockParams {
    pub reduction: usize,
    pub squeeze: FcParams,
    pub excite: FcParams,
}

pub const DEFAULT_SE_REDUCTION: usize = 16;

fn check_reduction(channels: usize, reduction: usize) -> Result<()> {
    if reduction == 0 || channels % reduction != 0 {
        return Err(Error::config(format!(
            "SE block: {channels} channels not divisible by reduction ratio {reduction}"
        )));
    }
    Ok(())
}

impl SeBlockParams {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        check_reduction(channels, reduction)?;
        let mid = channels / reduction;
        Ok(Self {
            reduction,
            squeeze: FcParams::zeros(mid, channels),
            excite: FcParams::zeros(channels, mid),
        })
    }

    pub fn init<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        check_reduction(channels, reduction)?;
        let mid = channels / reduction;
        Ok(Self {
            reduction,
            squeeze: FcParams::kaiming(mid, channels, rng),
            excite: FcParams::kaiming(channels, mid, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.squeeze.in_features()
    }

    fn check(&self, y: &Tensor) -> Result<()> {
        check_reduction(self.channels(), self.reduction)?;
        let c = y.shape().c;
        if c != self.channels() {
            return Err(Error::dim(format!("SE block: input has {c} channels, block expects {}", self.channels())));
        }
        if self.squeeze.out_features() != c / self.reduction
            || self.excite.in_features() != c / self.reduction
            || self.excite.out_features() != c
        {
            return Err(Error::config(format!(
                "SE block: FC shapes do not form {c} -> {} -> {c}",
                c / self.reduction
            )));
        }
        Ok(())
    }
}

impl ParamSet for SeBlockParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[f64])) {
        self.squeeze.visit(&join(prefix, "squeeze"), f);
        self.excite.visit(&join(prefix, "excite"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &mut [f64])) {
        self.squeeze.visit_mut(&join(prefix, "squeeze"), f);
        self.excite.visit_mut(&join(prefix, "excite"), f);
    }
}

#[derive(Clone, Debug)]
pub struct SeCache {
    input: Tensor,
    squeezed: Vec<Vec<f64>>,
    hidden_pre: Vec<Vec<f64>>,
    gates: Vec<Vec<f64>>,
}

impl SeCache {
    pub fn squeezed(&self) -> &[Vec<f64>] {
        &self.squeezed
    }

    pub fn gates(&self) -> &[Vec<f64>] {
        &self.gates
    }
}

pub fn se_block(y: &Tensor, params: &SeBlockParams) -> Result<Tensor> {
    se_block_forward(y, params).map(|(out, _)| out)
}

pub fn se_block_forward(y: &Tensor, params: &SeBlockParams) -> Result<(Tensor, SeCache)> {
    params.check(y)?;
    let squeezed = global_avg_pool(y);
    let mut out = y.clone();
    let mut hidden_pre = Vec::with_capacity(squeezed.len());
    let mut gates = Vec::with_capacity(squeezed.len());
    for (n, z) in squeezed.iter().enumerate() {
        let h = fully_connected(z, &params.squeeze.weights, &params.squeeze.bias)?;
        let a: Vec<f64> = h.iter().map(|v| v.max(0.0)).collect();
        let e = fully_connected(&a, &params.excite.weights, &params.excite.bias)?;
        let g: Vec<f64> = e.into_iter().map(sigmoid_scalar).collect();
        for (c, &gc) in g.iter().enumerate() {
            out.plane_mut(n, c).iter_mut().for_each(|v| *v *= gc);
        }
        hidden_pre.push(h);
        gates.push(g);
    }
    Ok((
        out,
        SeCache {
            input: y.clone(),
            squeezed,
            hidden_pre,
            gates,
        },
    ))
}

pub fn se_block_backward(cache: &SeCache, params: &SeBlockParams, upstream: &Tensor) -> Result<(Tensor, SeBlockParams)> {
    let y = &cache.input;
    upstream.expect_shape(y.shape(), "SE upstream")?;
    let s = y.shape();
    let mut dy = Tensor::zeros(s);
    let mut grads = SeBlockParams::zeros(s.c, params.reduction)?;
    let mut d_squeezed = Vec::with_capacity(s.n);
    for n in 0..s.n {
        let g = &cache.gates[n];
        let mut de = vec![0.0; s.c];
        for c in 0..s.c {
            let up = upstream.plane(n, c);
            let dg: f64 = up.iter().zip(y.plane(n, c)).map(|(u, v)| u * v).sum();
            de[c] = dg * g[c] * (1.0 - g[c]);
            dy.plane_mut(n, c).iter_mut().zip(up).for_each(|(d, u)| *d = g[c] * u);
        }
        let a: Vec<f64> = cache.hidden_pre[n].iter().map(|v| v.max(0.0)).collect();
        let (da, ge) = fully_connected_backward(&a, &params.excite.weights, &de)?.into_params();
        let dh: Vec<f64> = da
            .iter()
            .zip(&cache.hidden_pre[n])
            .map(|(d, &h)| if h > 0.0 { *d } else { 0.0 })
            .collect();
        let (dz, gs) = fully_connected_backward(&cache.squeezed[n], &params.squeeze.weights, &dh)?.into_params();
        accumulate(&mut grads.excite, &ge);
        accumulate(&mut grads.squeeze, &gs);
        d_squeezed.push(dz);
    }
    dy.add_assign(&global_avg_pool_backward(s, &d_squeezed))?;
    Ok((dy, grads))
}

fn accumulate(into: &mut FcParams, g: &FcParams) {
    into.weights
        .data_mut()
        .iter_mut()
        .zip(g.weights.data())
        .for_each(|(a, b)| *a += b);
    into.bias.iter_mut().zip(&g.bias).for_each(|(a, b)| *a += b);
}
