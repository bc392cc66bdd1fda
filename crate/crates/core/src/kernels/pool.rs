use crate::error::{Error, Result};
use crate::kernels::conv::conv_out_dim;
use crate::tensor::{Shape, Tensor};

/// Max pooling output plus the flat input index that won each window.
#[derive(Clone, Debug)]
pub struct MaxPoolOutput {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

pub fn maxpool2d(t: &Tensor, window: usize, stride: usize) -> Result<MaxPoolOutput> {
    let s = t.shape();
    if window == 0 || stride == 0 {
        return Err(Error::config("pooling window and stride must be positive"));
    }
    if window > s.h || window > s.w {
        return Err(Error::dim(format!(
            "maxpool2d: window {window} exceeds spatial size {}x{}",
            s.h, s.w
        )));
    }
    let oh = conv_out_dim(s.h, window, stride, 0).expect("window checked");
    let ow = conv_out_dim(s.w, window, stride, 0).expect("window checked");
    let os = Shape::new(s.n, s.c, oh, ow);
    let mut out = Tensor::zeros(os);
    let mut argmax = Vec::with_capacity(os.numel());
    let data = t.data();
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = t.offset(n, c, oy * stride, ox * stride);
                    for dy in 0..window {
                        for dx in 0..window {
                            let i = t.offset(n, c, oy * stride + dy, ox * stride + dx);
                            // first maximum wins on ties
                            if data[i] > data[best] {
                                best = i;
                            }
                        }
                    }
                    *out.at_mut(n, c, oy, ox) = data[best];
                    argmax.push(best);
                }
            }
        }
    }
    Ok(MaxPoolOutput { output: out, argmax })
}

/// Routes each output gradient to the input element that produced it.
pub fn maxpool2d_backward(input_shape: Shape, argmax: &[usize], upstream: &Tensor) -> Result<Tensor> {
    if upstream.len() != argmax.len() {
        return Err(Error::dim(format!(
            "maxpool2d_backward: {} upstream values for {} pooled cells",
            upstream.len(),
            argmax.len()
        )));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(upstream.data()) {
        d[i] += g;
    }
    Ok(dx)
}

/// Mean of every channel plane, one row of `C` values per batch item.
pub fn global_avg_pool(t: &Tensor) -> Vec<Vec<f64>> {
    let s = t.shape();
    let area = s.plane() as f64;
    (0..s.n)
        .map(|n| (0..s.c).map(|c| t.plane(n, c).iter().sum::<f64>() / area).collect())
        .collect()
}

pub fn global_avg_pool_backward(input_shape: Shape, upstream: &[Vec<f64>]) -> Tensor {
    let area = input_shape.plane() as f64;
    let mut dx = Tensor::zeros(input_shape);
    for (n, row) in upstream.iter().enumerate() {
        for (c, &g) in row.iter().enumerate() {
            dx.plane_mut(n, c).fill(g / area);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_max() {
        let t = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = maxpool2d(&t, 2, 2).unwrap();
        assert_eq!(out.output.data(), &[4.0]);
        assert_eq!(out.argmax, vec![3]);
    }

    #[test]
    fn constant_stays_constant() {
        let t = Tensor::filled([2, 3, 6, 6], 1.5);
        let out = maxpool2d(&t, 2, 2).unwrap().output;
        assert_eq!(out.shape(), Shape::new(2, 3, 3, 3));
        assert!(out.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn window_one_stride_two_subsamples_with_ceil() {
        let t = Tensor::from_vec([1, 1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let out = maxpool2d(&t, 1, 2).unwrap().output;
        assert_eq!(out.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(out.data(), &[0.0, 2.0, 6.0, 8.0]);
    }

    #[test]
    fn oversized_window_is_error() {
        assert!(maxpool2d(&Tensor::zeros([1, 1, 2, 2]), 3, 1).is_err());
    }

    #[test]
    fn backward_routes_to_argmax() {
        let t = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 5.0, 3.0, 4.0]).unwrap();
        let out = maxpool2d(&t, 2, 2).unwrap();
        let dx = maxpool2d_backward(t.shape(), &out.argmax, &Tensor::filled([1, 1, 1, 1], 2.0)).unwrap();
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0]);
    }
}
