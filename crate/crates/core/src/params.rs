//! Uniform access to the learnable parameters of composite modules.
//!
//! Every parameter container walks its tensors in a fixed order under stable
//! dotted names. Gradients are returned in the same container type as the
//! parameters, so optimizers and checkpoints can treat both as flat vectors.

use crate::kernels::{ConvParams, DeconvParams, FcParams};
use crate::linalg::Matrix;
use crate::tensor::Tensor;

pub trait ParamSet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, d| n += d.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit("", &mut |_, _, d| out.extend_from_slice(d));
        out
    }

    /// Overwrites every parameter from `flat`, in visiting order.
    fn unflatten(&mut self, flat: &[f64]) {
        let mut pos = 0;
        self.visit_mut("", &mut |_, _, d| {
            d.copy_from_slice(&flat[pos..pos + d.len()]);
            pos += d.len();
        });
        assert_eq!(pos, flat.len(), "flat parameter vector has the wrong length");
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |name, _, _| out.push(name.to_string()));
        out
    }

    fn zero(&mut self) {
        self.visit_mut("", &mut |_, _, d| d.fill(0.0));
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn vec_shape(len: usize) -> [usize; 4] {
    [1, 1, 1, len]
}

impl ParamSet for Tensor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[f64])) {
        f(prefix, self.shape().dims(), self.data());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &mut [f64])) {
        let dims = self.shape().dims();
        f(prefix, dims, self.data_mut());
    }
}

impl ParamSet for Matrix {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[f64])) {
        f(prefix, [1, 1, self.rows(), self.cols()], self.data());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &mut [f64])) {
        let dims = [1, 1, self.rows(), self.cols()];
        f(prefix, dims, self.data_mut());
    }
}

impl ParamSet for ConvParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[f64])) {
        self.weights.visit(&join(prefix, "weight"), f);
        f(&join(prefix, "bias"), vec_shape(self.bias.len()), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &mut [f64])) {
        self.weights.visit_mut(&join(prefix, "weight"), f);
        let dims = vec_shape(self.bias.len());
        f(&join(prefix, "bias"), dims, &mut self.bias);
    }
}

impl ParamSet for DeconvParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[f64])) {
        self.weights.visit(&join(prefix, "weight"), f);
        f(&join(prefix, "bias"), vec_shape(self.bias.len()), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &mut [f64])) {
        self.weights.visit_mut(&join(prefix, "weight"), f);
        let dims = vec_shape(self.bias.len());
        f(&join(prefix, "bias"), dims, &mut self.bias);
    }
}

impl ParamSet for FcParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[f64])) {
        self.weights.visit(&join(prefix, "weight"), f);
        f(&join(prefix, "bias"), vec_shape(self.bias.len()), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &mut [f64])) {
        self.weights.visit_mut(&join(prefix, "weight"), f);
        let dims = vec_shape(self.bias.len());
        f(&join(prefix, "bias"), dims, &mut self.bias);
    }
}

impl<T: ParamSet> ParamSet for Option<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[f64])) {
        if let Some(inner) = self {
            inner.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &mut [f64])) {
        if let Some(inner) = self {
            inner.visit_mut(prefix, f);
        }
    }
}

impl<T: ParamSet> ParamSet for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[f64])) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &mut [f64])) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_roundtrip_and_names() {
        let mut p = vec![ConvParams::zeros(2, 1, 1, 1, 0), ConvParams::zeros(1, 2, 1, 1, 0)];
        let flat: Vec<f64> = (0..p.num_params()).map(|i| i as f64).collect();
        p.unflatten(&flat);
        assert_eq!(p.flatten(), flat);
        assert_eq!(p.names(), vec!["0.weight", "0.bias", "1.weight", "1.bias"]);
        assert_eq!(p[1].bias, vec![6.0]);
    }
}
