//! 2-D convolution and transposed convolution, forward and backward.
//!
//! Both directions go through an im2col/col2im lowering: the input window of
//! every output position is unrolled into a column, and the kernel becomes a
//! plain matrix product. The transposed convolution is the adjoint of that
//! lowering, so `deconv2d` shares `col2im` with the convolution's input
//! gradient.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{Shape, Tensor};

/// Convolution kernel. `weights` has shape `(C_out, C_in / groups, k_h, k_w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

/// Transposed-convolution kernel. `weights` has shape `(C_in, C_out, k_h, k_w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeconvParams {
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: usize,
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DeconvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

/// Output extent of a convolution along one axis, `None` if the padded input
/// is smaller than the kernel.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn deconv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let full = stride * (input - 1) + kernel;
    full.checked_sub(2 * padding).filter(|&d| d > 0)
}

impl ConvParams {
    pub fn new(weights: Tensor, bias: Vec<f64>, stride: usize, padding: usize, groups: usize) -> Result<Self> {
        let p = Self {
            weights,
            bias,
            stride,
            padding,
            groups,
        };
        p.validate()?;
        Ok(p)
    }

    /// Zero weights and bias.
    pub fn zeros(c_out: usize, c_in: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            weights: Tensor::zeros([c_out, c_in, kernel, kernel]),
            bias: vec![0.0; c_out],
            stride,
            padding,
            groups: 1,
        }
    }

    /// He-normal weights scaled by fan-in, zero bias.
    pub fn kaiming<R: Rng + ?Sized>(
        c_out: usize,
        c_in: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64;
        Self {
            weights: Tensor::random_normal([c_out, c_in, kernel, kernel], (2.0 / fan_in).sqrt(), rng),
            bias: vec![0.0; c_out],
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape().c * self.groups
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weights.shape();
        (s.h, s.w)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.weights.shape();
        if self.groups == 0 || s.n % self.groups != 0 {
            return Err(Error::config(format!(
                "output channels {} not divisible by groups {}",
                s.n, self.groups
            )));
        }
        if self.stride == 0 {
            return Err(Error::config("convolution stride must be positive"));
        }
        if self.bias.len() != s.n {
            return Err(Error::dim(format!(
                "bias length {} != output channels {}",
                self.bias.len(),
                s.n
            )));
        }
        Ok(())
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        if input.c != self.in_channels() {
            return Err(Error::dim(format!(
                "conv2d: input channels {} != kernel input channels {} (axis C, input {input}, kernel {})",
                input.c,
                self.in_channels(),
                self.weights.shape()
            )));
        }
        let (kh, kw) = self.kernel();
        let ho = conv_out_dim(input.h, kh, self.stride, self.padding).ok_or_else(|| {
            Error::dim(format!(
                "conv2d: height {} + 2*{} smaller than kernel height {kh} (axis H)",
                input.h, self.padding
            ))
        })?;
        let wo = conv_out_dim(input.w, kw, self.stride, self.padding).ok_or_else(|| {
            Error::dim(format!(
                "conv2d: width {} + 2*{} smaller than kernel width {kw} (axis W)",
                input.w, self.padding
            ))
        })?;
        Ok(Shape::new(input.n, self.out_channels(), ho, wo))
    }
}

impl ConvGrads {
    /// Packs the parameter gradients in the layout of `like`.
    pub fn into_params(self, like: &ConvParams) -> (Tensor, ConvParams) {
        (
            self.input,
            ConvParams {
                weights: self.weight,
                bias: self.bias,
                ..like.clone()
            },
        )
    }
}

impl DeconvParams {
    pub fn new(weights: Tensor, bias: Vec<f64>, stride: usize, padding: usize) -> Result<Self> {
        let p = Self {
            weights,
            bias,
            stride,
            padding,
        };
        p.validate()?;
        Ok(p)
    }

    /// The exact ×2 upsampler geometry: kernel 4, stride 2, padding 1.
    pub fn upsample2x<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self::kaiming(c_in, c_out, 4, 2, 1, rng)
    }

    pub fn kaiming<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        // each output pixel receives about c_in * (k/s)^2 contributions
        let fan_in = (c_in * kernel * kernel) as f64 / (stride * stride) as f64;
        Self {
            weights: Tensor::random_normal([c_in, c_out, kernel, kernel], (2.0 / fan_in).sqrt(), rng),
            bias: vec![0.0; c_out],
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape().n
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape().c
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weights.shape();
        (s.h, s.w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::config("deconvolution stride must be positive"));
        }
        if self.bias.len() != self.out_channels() {
            return Err(Error::dim(format!(
                "bias length {} != output channels {}",
                self.bias.len(),
                self.out_channels()
            )));
        }
        Ok(())
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        if input.c != self.in_channels() {
            return Err(Error::dim(format!(
                "deconv2d: input channels {} != kernel input channels {} (axis C)",
                input.c,
                self.in_channels()
            )));
        }
        let (kh, kw) = self.kernel();
        let ho = deconv_out_dim(input.h, kh, self.stride, self.padding);
        let wo = deconv_out_dim(input.w, kw, self.stride, self.padding);
        match (ho, wo) {
            (Some(ho), Some(wo)) => Ok(Shape::new(input.n, self.out_channels(), ho, wo)),
            _ => Err(Error::config(format!(
                "deconv2d: kernel {kh}x{kw}, stride {}, padding {} gives a non-positive output for input {input}",
                self.stride, self.padding
            ))),
        }
    }
}

impl DeconvGrads {
    pub fn into_params(self, like: &DeconvParams) -> (Tensor, DeconvParams) {
        (
            self.input,
            DeconvParams {
                weights: self.weight,
                bias: self.bias,
                ..like.clone()
            },
        )
    }
}

/// Geometry of one im2col lowering: an image of `channels × h × w` read by a
/// `kh × kw` window producing an `oh × ow` grid.
#[derive(Clone, Copy, Debug)]
struct Window {
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Source coordinate for output index `o` and kernel tap `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

fn im2col(image: &[f64], g: &Window, cols: &mut [f64]) {
    let n = g.cols();
    for c in 0..g.channels {
        let plane = &image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * n;
                for oy in 0..g.oh {
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    match g.src(oy, ky, g.h) {
                        Some(iy) => {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = g.src(ox, kx, g.w).map_or(0.0, |ix| plane[iy * g.w + ix]);
                            }
                        }
                        None => dst.fill(0.0),
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Window, image: &mut [f64]) {
    let n = g.cols();
    for c in 0..g.channels {
        let plane = &mut image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * n;
                for oy in 0..g.oh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..g.ow {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            plane[iy * g.w + ix] += cols[row + oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_window(params: &ConvParams, input: Shape, out: Shape) -> Window {
    let (kh, kw) = params.kernel();
    Window {
        channels: input.c / params.groups,
        h: input.h,
        w: input.w,
        kh,
        kw,
        oh: out.h,
        ow: out.w,
        stride: params.stride,
        padding: params.padding,
    }
}

pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    let is = input.shape();
    let os = params.output_shape(is)?;
    let g = conv_window(params, is, os);
    let groups = params.groups;
    let cog = os.c / groups;
    let (k, hw) = (g.rows(), g.cols());
    let in_group_len = g.channels * is.plane();
    let w = params.weights.data();

    let mut out = Tensor::zeros(os);
    let mut cols = vec![0.0; k * hw];
    for n in 0..is.n {
        let x = input.item(n);
        let y = out.item_mut(n);
        for grp in 0..groups {
            im2col(&x[grp * in_group_len..(grp + 1) * in_group_len], &g, &mut cols);
            let w_g = &w[grp * cog * k..(grp + 1) * cog * k];
            let y_g = &mut y[grp * cog * hw..(grp + 1) * cog * hw];
            gemm_nn(cog, hw, k, w_g, &cols, y_g);
        }
        for (c, &b) in params.bias.iter().enumerate() {
            if b != 0.0 {
                y[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v += b);
            }
        }
    }
    Ok(out)
}

pub fn conv2d_backward(input: &Tensor, params: &ConvParams, upstream: &Tensor) -> Result<ConvGrads> {
    let is = input.shape();
    let os = params.output_shape(is)?;
    upstream.expect_shape(os, "conv2d_backward upstream gradient")?;
    let g = conv_window(params, is, os);
    let groups = params.groups;
    let cog = os.c / groups;
    let (k, hw) = (g.rows(), g.cols());
    let in_group_len = g.channels * is.plane();
    let w = params.weights.data();

    let mut dx = Tensor::zeros(is);
    let mut dw = Tensor::zeros(params.weights.shape());
    let mut db = vec![0.0; os.c];
    let mut cols = vec![0.0; k * hw];
    let mut dcols = vec![0.0; k * hw];
    for n in 0..is.n {
        let x = input.item(n);
        let dy = upstream.item(n);
        for grp in 0..groups {
            let dy_g = &dy[grp * cog * hw..(grp + 1) * cog * hw];
            im2col(&x[grp * in_group_len..(grp + 1) * in_group_len], &g, &mut cols);
            gemm_nt(cog, k, hw, dy_g, &cols, &mut dw.data_mut()[grp * cog * k..(grp + 1) * cog * k]);

            dcols.fill(0.0);
            gemm_tn(k, hw, cog, &w[grp * cog * k..(grp + 1) * cog * k], dy_g, &mut dcols);
            col2im(&dcols, &g, &mut dx.item_mut(n)[grp * in_group_len..(grp + 1) * in_group_len]);
        }
        for (c, b) in db.iter_mut().enumerate() {
            *b += dy[c * hw..(c + 1) * hw].iter().sum::<f64>();
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

fn deconv_window(params: &DeconvParams, input: Shape, out: Shape) -> Window {
    // The deconvolution output plays the role of the convolution input.
    let (kh, kw) = params.kernel();
    Window {
        channels: out.c,
        h: out.h,
        w: out.w,
        kh,
        kw,
        oh: input.h,
        ow: input.w,
        stride: params.stride,
        padding: params.padding,
    }
}

pub fn deconv2d(input: &Tensor, params: &DeconvParams) -> Result<Tensor> {
    let is = input.shape();
    let os = params.output_shape(is)?;
    let g = deconv_window(params, is, os);
    let (k, hw) = (g.rows(), g.cols());
    let ohw = os.plane();

    let mut out = Tensor::zeros(os);
    let mut cols = vec![0.0; k * hw];
    for n in 0..is.n {
        cols.fill(0.0);
        gemm_tn(k, hw, is.c, params.weights.data(), input.item(n), &mut cols);
        let y = out.item_mut(n);
        col2im(&cols, &g, y);
        for (c, &b) in params.bias.iter().enumerate() {
            if b != 0.0 {
                y[c * ohw..(c + 1) * ohw].iter_mut().for_each(|v| *v += b);
            }
        }
    }
    Ok(out)
}

pub fn deconv2d_backward(input: &Tensor, params: &DeconvParams, upstream: &Tensor) -> Result<DeconvGrads> {
    let is = input.shape();
    let os = params.output_shape(is)?;
    upstream.expect_shape(os, "deconv2d_backward upstream gradient")?;
    let g = deconv_window(params, is, os);
    let (k, hw) = (g.rows(), g.cols());
    let ohw = os.plane();

    let mut dx = Tensor::zeros(is);
    let mut dw = Tensor::zeros(params.weights.shape());
    let mut db = vec![0.0; os.c];
    let mut cols = vec![0.0; k * hw];
    for n in 0..is.n {
        let dy = upstream.item(n);
        im2col(dy, &g, &mut cols);
        gemm_nn(is.c, hw, k, params.weights.data(), &cols, dx.item_mut(n));
        gemm_nt(is.c, k, hw, input.item(n), &cols, dw.data_mut());
        for (c, b) in db.iter_mut().enumerate() {
            *b += dy[c * ohw..(c + 1) * ohw].iter().sum::<f64>();
        }
    }
    Ok(DeconvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::from_vec([1, 1, 1, 1], vec![v]).unwrap()
    }

    #[test]
    fn scalar_conv_and_chain_rule() {
        let p = ConvParams::new(scalar(3.0), vec![0.0], 1, 0, 1).unwrap();
        let y = conv2d(&scalar(2.0), &p).unwrap();
        assert_eq!(y.data(), &[6.0]);
        let g = conv2d_backward(&scalar(2.0), &p, &scalar(1.0)).unwrap();
        assert_eq!(g.input.data(), &[3.0]);
        assert_eq!(g.weight.data(), &[2.0]);
        assert_eq!(g.bias, vec![1.0]);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::from_vec([1, 1, 3, 3], (0..9).map(|i| i as f64 * 0.7 - 2.0).collect()).unwrap();
        let p = ConvParams::new(scalar(1.0), vec![0.0], 1, 0, 1).unwrap();
        assert_eq!(conv2d(&x, &p).unwrap(), x);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = rand::rng();
        let x = Tensor::random_normal([1, 2, 5, 5], 1.0, &mut rng);
        let p = ConvParams::kaiming(3, 2, 3, 1, 1, &mut rng);
        let g = conv2d_backward(&x, &p, &Tensor::zeros([1, 3, 5, 5])).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weight.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let p = ConvParams::zeros(2, 3, 1, 1, 0);
        let err = conv2d(&Tensor::zeros([1, 2, 4, 4]), &p).unwrap_err().to_string();
        assert!(err.contains("axis C"), "{err}");
        let p = ConvParams::zeros(2, 2, 5, 1, 0);
        let err = conv2d(&Tensor::zeros([1, 2, 4, 4]), &p).unwrap_err().to_string();
        assert!(err.contains("axis H"), "{err}");
    }

    #[test]
    fn deconv_single_pixel_all_ones() {
        let p = DeconvParams::new(Tensor::filled([1, 1, 4, 4], 1.0), vec![0.0], 2, 1).unwrap();
        let y = deconv2d(&scalar(1.0), &p).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[1.0; 4]);
    }

    #[test]
    fn deconv_doubles_spatial_dims() {
        let mut rng = rand::rng();
        for h in [1, 2, 7] {
            for w in [1, 2, 7] {
                let p = DeconvParams::upsample2x(2, 3, &mut rng);
                let y = deconv2d(&Tensor::filled([1, 2, h, w], 1.0), &p).unwrap();
                assert_eq!((y.shape().h, y.shape().w), (2 * h, 2 * w));
            }
        }
    }

    #[test]
    fn deconv_rejects_non_positive_output() {
        let p = DeconvParams::new(Tensor::filled([1, 1, 1, 1], 1.0), vec![0.0], 1, 1).unwrap();
        assert!(matches!(deconv2d(&scalar(1.0), &p), Err(Error::Config(_))));
    }
}
