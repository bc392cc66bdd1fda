use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Affine map `W v + b` with `W` of shape `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct FcParams {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FcGrads {
    pub input: Vec<f64>,
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl FcParams {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::dim(format!(
                "fc bias length {} != output size {}",
                bias.len(),
                weights.rows()
            )));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weights: Matrix::zeros(out, inp),
            bias: vec![0.0; out],
        }
    }

    pub fn kaiming<R: Rng + ?Sized>(out: usize, inp: usize, rng: &mut R) -> Self {
        Self {
            weights: Matrix::random_normal(out, inp, (2.0 / inp as f64).sqrt(), rng),
            bias: vec![0.0; out],
        }
    }

    pub fn in_features(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_features(&self) -> usize {
        self.weights.rows()
    }
}

pub fn fully_connected(v: &[f64], weights: &Matrix, bias: &[f64]) -> Result<Vec<f64>> {
    if weights.cols() != v.len() {
        return Err(Error::dim(format!(
            "fully_connected: input length {} != weight columns {}",
            v.len(),
            weights.cols()
        )));
    }
    if bias.len() != weights.rows() {
        return Err(Error::dim(format!(
            "fully_connected: bias length {} != weight rows {}",
            bias.len(),
            weights.rows()
        )));
    }
    let mut out = weights.mul_vec(v);
    out.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
    Ok(out)
}

pub fn fully_connected_backward(v: &[f64], weights: &Matrix, upstream: &[f64]) -> Result<FcGrads> {
    if weights.cols() != v.len() || weights.rows() != upstream.len() {
        return Err(Error::dim(format!(
            "fully_connected_backward: weights {}x{}, input {}, upstream {}",
            weights.rows(),
            weights.cols(),
            v.len(),
            upstream.len()
        )));
    }
    let mut dw = Matrix::zeros(weights.rows(), weights.cols());
    for (r, &g) in upstream.iter().enumerate() {
        let row = &mut dw.data_mut()[r * v.len()..(r + 1) * v.len()];
        row.iter_mut().zip(v).for_each(|(d, &x)| *d = g * x);
    }
    Ok(FcGrads {
        input: weights.tmul_vec(upstream),
        weight: dw,
        bias: upstream.to_vec(),
    })
}

impl FcGrads {
    pub fn into_params(self) -> (Vec<f64>, FcParams) {
        (
            self.input,
            FcParams {
                weights: self.weight,
                bias: self.bias,
            },
        )
    }
}
