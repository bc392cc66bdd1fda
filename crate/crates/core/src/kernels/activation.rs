use crate::error::Result;
use crate::tensor::Tensor;

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

/// Gradient of `relu` given its input; zero at the kink.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    input.zip_map(upstream, |x, g| if x > 0.0 { g } else { 0.0 })
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(t: &Tensor) -> Tensor {
    t.map(sigmoid_scalar)
}

/// Gradient of `sigmoid` given its output `σ(x)`.
pub fn sigmoid_backward(output: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    output.zip_map(upstream, |s, g| g * s * (1.0 - s))
}
