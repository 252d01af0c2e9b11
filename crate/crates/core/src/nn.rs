//! Minimal CPU layers with explicit forward traces and hand-written backward
//! passes. Convolutions go through im2col and a GEMM.
//!
//! A [`Sequential`] doubles as its own gradient container: gradients are
//! accumulated into a zeroed clone of the network (see
//! [`Sequential::zeros_like`]), so optimizers can walk parameters and
//! gradients with the same visitor.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// `c = a' * b' + beta * c`, where `a'` is `a` (m x k) or, if `ta`, the
/// transpose of a stored (k x m) matrix; likewise for `b'` (k x n).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    let a = if ta {
        ArrayView2::from_shape((k, m), a).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).unwrap()
    };
    let b = if tb {
        ArrayView2::from_shape((n, k), b).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).unwrap()
    };
    let mut c = ArrayViewMut2::from_shape((m, n), c).unwrap();
    general_mat_mul(1.0, &a, &b, beta, &mut c);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

fn padded_index(i: isize, n: usize, mode: PadMode) -> Option<usize> {
    if i >= 0 && (i as usize) < n {
        return Some(i as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Reflect => {
            if n == 1 {
                return Some(0);
            }
            let period = 2 * (n as isize - 1);
            let mut j = i.rem_euclid(period);
            if j >= n as isize {
                j = period - j;
            }
            Some(j as usize)
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    channels: usize,
    in_h: usize,
    in_w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(
        channels: usize,
        in_h: usize,
        in_w: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Option<Self> {
        let span_h = (in_h + 2 * pad).checked_sub(kernel)?;
        let span_w = (in_w + 2 * pad).checked_sub(kernel)?;
        Some(Self {
            channels,
            in_h,
            in_w,
            kernel,
            stride,
            pad,
            mode,
            out_h: span_h / stride + 1,
            out_w: span_w / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// `maps[k][o]`: source index along one axis for kernel tap `k` and output `o`.
    fn axis_maps(&self, n_in: usize, n_out: usize) -> Vec<Vec<Option<usize>>> {
        (0..self.kernel)
            .map(|k| {
                (0..n_out)
                    .map(|o| {
                        let i = (o * self.stride + k) as isize - self.pad as isize;
                        padded_index(i, n_in, self.mode)
                    })
                    .collect()
            })
            .collect()
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let ym = self.axis_maps(self.in_h, self.out_h);
        let xm = self.axis_maps(self.in_w, self.out_w);
        let plane = self.in_h * self.in_w;
        let ncols = self.cols();
        let mut cols = vec![0.0; self.rows() * ncols];
        for c in 0..self.channels {
            let src = &x[c * plane..(c + 1) * plane];
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = (c * self.kernel + ky) * self.kernel + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        let Some(iy) = ym[ky][oy] else { continue };
                        let src_row = &src[iy * self.in_w..(iy + 1) * self.in_w];
                        let dst_row = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        for (d, ix) in dst_row.iter_mut().zip(&xm[kx]) {
                            if let Some(ix) = ix {
                                *d = src_row[*ix];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`ConvGeom::im2col`].
    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let ym = self.axis_maps(self.in_h, self.out_h);
        let xm = self.axis_maps(self.in_w, self.out_w);
        let plane = self.in_h * self.in_w;
        let ncols = self.cols();
        let mut x = vec![0.0; self.channels * plane];
        for c in 0..self.channels {
            let dst = &mut x[c * plane..(c + 1) * plane];
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = (c * self.kernel + ky) * self.kernel + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        let Some(iy) = ym[ky][oy] else { continue };
                        let src_row = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        let dst_row = &mut dst[iy * self.in_w..(iy + 1) * self.in_w];
                        for (s, ix) in src_row.iter().zip(&xm[kx]) {
                            if let Some(ix) = ix {
                                dst_row[*ix] += s;
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

fn uniform_fill(values: &mut [f64], bound: f64, rng: &mut impl Rng) {
    let dist = Uniform::new_inclusive(-bound, bound);
    for v in values {
        *v = dist.sample(rng);
    }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (chunk, b) in out.chunks_exact_mut(plane).zip(bias) {
        for v in chunk {
            *v += b;
        }
    }
}

fn accumulate_channel_sums(grad: &mut [f64], dout: &[f64], plane: usize) {
    for (g, chunk) in grad.iter_mut().zip(dout.chunks_exact(plane)) {
        *g += chunk.iter().sum::<f64>();
    }
}

/// 2-D convolution. Weight layout is `out x in x k x k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub pad_mode: PadMode,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        pad_mode: PadMode,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            pad_mode,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    /// Stride-1 convolution whose output has the input's spatial size.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, pad_mode: PadMode) -> Self {
        Self::new(in_channels, out_channels, kernel, 1, kernel / 2, pad_mode)
    }

    /// Fan-in scaled uniform initialization of weights and bias.
    pub fn init(mut self, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((self.in_channels * self.kernel * self.kernel) as f64).sqrt();
        uniform_fill(&mut self.weight, bound, rng);
        uniform_fill(&mut self.bias, bound, rng);
        self
    }

    fn geom(&self, x: &FeatureMap) -> Result<ConvGeom> {
        if x.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        if self.pad_mode == PadMode::Reflect
            && self.padding > 0
            && (self.padding >= x.height() || self.padding >= x.width())
            && (x.height() > 1 || x.width() > 1)
        {
            return Err(Error::Shape(format!(
                "reflection padding {} too large for {}x{} input",
                self.padding,
                x.height(),
                x.width()
            )));
        }
        ConvGeom::new(
            self.in_channels,
            x.height(),
            x.width(),
            self.kernel,
            self.stride,
            self.padding,
            self.pad_mode,
        )
        .ok_or_else(|| {
            Error::Shape(format!(
                "{}x{} input smaller than {}x{} kernel",
                x.height(),
                x.width(),
                self.kernel,
                self.kernel
            ))
        })
    }

    fn forward(&self, x: &FeatureMap) -> Result<(FeatureMap, Cache)> {
        let g = self.geom(x)?;
        let cols = g.im2col(x.data());
        let mut out = vec![0.0; self.out_channels * g.cols()];
        gemm(
            self.out_channels,
            g.rows(),
            g.cols(),
            &self.weight,
            false,
            &cols,
            false,
            0.0,
            &mut out,
        );
        add_channel_bias(&mut out, &self.bias, g.cols());
        let out = FeatureMap::new(self.out_channels, g.out_h, g.out_w, out)?;
        Ok((out, Cache::Conv { geom: g, cols }))
    }

    fn backward(
        &self,
        geom: &ConvGeom,
        cols: &[f64],
        dout: &FeatureMap,
        grad: Option<&mut Conv2d>,
    ) -> FeatureMap {
        let (m, k, n) = (self.out_channels, geom.rows(), geom.cols());
        if let Some(grad) = grad {
            gemm(m, n, k, dout.data(), false, cols, true, 1.0, &mut grad.weight);
            accumulate_channel_sums(&mut grad.bias, dout.data(), n);
        }
        let mut dcols = vec![0.0; k * n];
        gemm(k, m, n, &self.weight, true, dout.data(), false, 0.0, &mut dcols);
        let dx = geom.col2im(&dcols);
        FeatureMap::new(geom.channels, geom.in_h, geom.in_w, dx).expect("input shape")
    }
}

/// Transposed convolution (zero padding). Weight layout is `in x out x k x k`.
/// Output size is `(h - 1) * stride - 2 * padding + kernel + output_padding`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvTranspose2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            output_padding,
            weight: vec![0.0; in_channels * out_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn init(mut self, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((self.in_channels * self.kernel * self.kernel) as f64).sqrt();
        uniform_fill(&mut self.weight, bound, rng);
        uniform_fill(&mut self.bias, bound, rng);
        self
    }

    /// Geometry of the adjoint convolution (output space -> input space).
    fn geom(&self, x: &FeatureMap) -> Result<ConvGeom> {
        if x.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "transposed convolution expects {} input channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        let size = |n: usize| {
            ((n - 1) * self.stride + self.kernel + self.output_padding).checked_sub(2 * self.padding)
        };
        let (Some(out_h), Some(out_w)) = (size(x.height()), size(x.width())) else {
            return Err(Error::Shape("transposed convolution output is empty".into()));
        };
        let g = ConvGeom::new(
            self.out_channels,
            out_h,
            out_w,
            self.kernel,
            self.stride,
            self.padding,
            PadMode::Zero,
        )
        .filter(|g| g.out_h == x.height() && g.out_w == x.width())
        .ok_or_else(|| Error::Shape("inconsistent transposed convolution geometry".into()))?;
        Ok(g)
    }

    fn forward(&self, x: &FeatureMap) -> Result<(FeatureMap, Cache)> {
        let g = self.geom(x)?;
        let mut cols = vec![0.0; g.rows() * g.cols()];
        gemm(
            g.rows(),
            self.in_channels,
            g.cols(),
            &self.weight,
            true,
            x.data(),
            false,
            0.0,
            &mut cols,
        );
        let mut out = g.col2im(&cols);
        add_channel_bias(&mut out, &self.bias, g.in_h * g.in_w);
        let out = FeatureMap::new(self.out_channels, g.in_h, g.in_w, out)?;
        Ok((
            out,
            Cache::ConvTranspose {
                geom: g,
                input: x.clone(),
            },
        ))
    }

    fn backward(
        &self,
        geom: &ConvGeom,
        input: &FeatureMap,
        dout: &FeatureMap,
        grad: Option<&mut ConvTranspose2d>,
    ) -> FeatureMap {
        let dcols = geom.im2col(dout.data());
        let (rows, n) = (geom.rows(), geom.cols());
        if let Some(grad) = grad {
            gemm(self.in_channels, n, rows, input.data(), false, &dcols, true, 1.0, &mut grad.weight);
            accumulate_channel_sums(&mut grad.bias, dout.data(), dout.plane_len());
        }
        let mut dx = vec![0.0; self.in_channels * n];
        gemm(self.in_channels, rows, n, &self.weight, false, &dcols, false, 0.0, &mut dx);
        FeatureMap::new(input.channels(), input.height(), input.width(), dx).expect("input shape")
    }
}

/// Per-sample, per-channel normalization with a learned affine.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceNorm {
    pub channels: usize,
    pub eps: f64,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl InstanceNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            eps: Self::EPS,
            weight: vec![1.0; channels],
            bias: vec![0.0; channels],
        }
    }

    /// The normalized activations before the affine is applied.
    pub fn normalize(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let (xhat, _) = self.standardize(x)?;
        Ok(xhat)
    }

    fn standardize(&self, x: &FeatureMap) -> Result<(FeatureMap, Vec<f64>)> {
        if x.channels() != self.channels {
            return Err(Error::Shape(format!(
                "instance norm expects {} channels, got {}",
                self.channels,
                x.channels()
            )));
        }
        let n = x.plane_len() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(self.channels);
        for plane in xhat.data_mut().chunks_exact_mut(x.plane_len()) {
            let mean = plane.iter().sum::<f64>() / n;
            let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let s = 1.0 / (var + self.eps).sqrt();
            for v in plane.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv_std.push(s);
        }
        Ok((xhat, inv_std))
    }

    fn forward(&self, x: &FeatureMap) -> Result<(FeatureMap, Cache)> {
        let (xhat, inv_std) = self.standardize(x)?;
        let mut out = xhat.clone();
        let plane = x.plane_len();
        for (c, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
            let (g, b) = (self.weight[c], self.bias[c]);
            for v in chunk {
                *v = g * *v + b;
            }
        }
        Ok((out, Cache::Norm { xhat, inv_std }))
    }

    fn backward(
        &self,
        xhat: &FeatureMap,
        inv_std: &[f64],
        dout: &FeatureMap,
        grad: Option<&mut InstanceNorm>,
    ) -> FeatureMap {
        let plane = xhat.plane_len();
        let n = plane as f64;
        let mut dx = FeatureMap::zeros(xhat.channels(), xhat.height(), xhat.width());
        let mut grad = grad;
        for c in 0..self.channels {
            let xh = xhat.plane(c);
            let dy = dout.plane(c);
            let sum_dy: f64 = dy.iter().sum();
            let sum_dy_xh: f64 = dy.iter().zip(xh).map(|(a, b)| a * b).sum();
            if let Some(g) = grad.as_deref_mut() {
                g.weight[c] += sum_dy_xh;
                g.bias[c] += sum_dy;
            }
            let gamma = self.weight[c];
            let scale = gamma * inv_std[c] / n;
            let out = &mut dx.data_mut()[c * plane..(c + 1) * plane];
            for ((o, &d), &h) in out.iter_mut().zip(dy).zip(xh) {
                *o = scale * (n * d - sum_dy - h * sum_dy_xh);
            }
        }
        dx
    }
}

/// Max pooling; padded cells never win.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MaxPool2d {
    fn forward(&self, x: &FeatureMap) -> Result<(FeatureMap, Cache)> {
        let (c, h, w) = x.shape();
        let g = ConvGeom::new(c, h, w, self.kernel, self.stride, self.padding, PadMode::Zero)
            .ok_or_else(|| Error::Shape(format!("{h}x{w} input smaller than pooling window")))?;
        let mut out = Vec::with_capacity(c * g.cols());
        let mut argmax = Vec::with_capacity(c * g.cols());
        for ch in 0..c {
            let plane = x.plane(ch);
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = None;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let i = iy as usize * w + ix as usize;
                            if best_i.is_none() || plane[i] > best {
                                best = plane[i];
                                best_i = Some(i);
                            }
                        }
                    }
                    let i = best_i.ok_or_else(|| {
                        Error::Shape("pooling window lies entirely in padding".into())
                    })?;
                    out.push(best);
                    argmax.push(ch * h * w + i);
                }
            }
        }
        let out = FeatureMap::new(c, g.out_h, g.out_w, out)?;
        Ok((
            out,
            Cache::MaxPool {
                argmax,
                in_shape: (c, h, w),
            },
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: vec![0.0; in_features * out_features],
            bias: vec![0.0; out_features],
        }
    }

    pub fn init(mut self, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (self.in_features as f64).sqrt();
        uniform_fill(&mut self.weight, bound, rng);
        uniform_fill(&mut self.bias, bound, rng);
        self
    }

    fn forward(&self, x: &FeatureMap) -> Result<(FeatureMap, Cache)> {
        if x.len() != self.in_features {
            return Err(Error::Shape(format!(
                "linear layer expects {} inputs, got {}",
                self.in_features,
                x.len()
            )));
        }
        let mut out = self.bias.clone();
        gemm(self.out_features, self.in_features, 1, &self.weight, false, x.data(), false, 1.0, &mut out);
        let out = FeatureMap::new(self.out_features, 1, 1, out)?;
        Ok((out, Cache::Linear { input: x.clone() }))
    }

    fn backward(&self, input: &FeatureMap, dout: &FeatureMap, grad: Option<&mut Linear>) -> FeatureMap {
        if let Some(grad) = grad {
            gemm(self.out_features, 1, self.in_features, dout.data(), false, input.data(), false, 1.0, &mut grad.weight);
            for (g, d) in grad.bias.iter_mut().zip(dout.data()) {
                *g += d;
            }
        }
        let mut dx = vec![0.0; self.in_features];
        gemm(self.in_features, self.out_features, 1, &self.weight, true, dout.data(), false, 0.0, &mut dx);
        let (c, h, w) = input.shape();
        FeatureMap::new(c, h, w, dx).expect("input shape")
    }
}

/// Fixed per-channel standardization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardize {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    ConvTranspose(ConvTranspose2d),
    InstanceNorm(InstanceNorm),
    Relu,
    Sigmoid,
    MaxPool(MaxPool2d),
    Flatten,
    Linear(Linear),
    Softmax,
    Standardize(Standardize),
}

/// Parameter tensor view: canonical suffix, dimensions, values.
pub struct ParamView<'a> {
    pub suffix: &'static str,
    pub dims: Vec<usize>,
    pub values: &'a [f64],
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::ConvTranspose(_) => "conv_transpose",
            Layer::InstanceNorm(_) => "instance_norm",
            Layer::Relu => "relu",
            Layer::Sigmoid => "sigmoid",
            Layer::MaxPool(_) => "maxpool",
            Layer::Flatten => "flatten",
            Layer::Linear(_) => "linear",
            Layer::Softmax => "softmax",
            Layer::Standardize(_) => "standardize",
        }
    }

    pub fn params(&self) -> Vec<ParamView<'_>> {
        match self {
            Layer::Conv(c) => vec![
                ParamView {
                    suffix: "weight",
                    dims: vec![c.out_channels, c.in_channels, c.kernel, c.kernel],
                    values: &c.weight,
                },
                ParamView {
                    suffix: "bias",
                    dims: vec![c.out_channels],
                    values: &c.bias,
                },
            ],
            Layer::ConvTranspose(c) => vec![
                ParamView {
                    suffix: "weight",
                    dims: vec![c.in_channels, c.out_channels, c.kernel, c.kernel],
                    values: &c.weight,
                },
                ParamView {
                    suffix: "bias",
                    dims: vec![c.out_channels],
                    values: &c.bias,
                },
            ],
            Layer::InstanceNorm(n) => vec![
                ParamView {
                    suffix: "weight",
                    dims: vec![n.channels],
                    values: &n.weight,
                },
                ParamView {
                    suffix: "bias",
                    dims: vec![n.channels],
                    values: &n.bias,
                },
            ],
            Layer::Linear(l) => vec![
                ParamView {
                    suffix: "weight",
                    dims: vec![l.out_features, l.in_features],
                    values: &l.weight,
                },
                ParamView {
                    suffix: "bias",
                    dims: vec![l.out_features],
                    values: &l.bias,
                },
            ],
            _ => Vec::new(),
        }
    }

    /// Mutable parameter slices in the same order as [`Layer::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::ConvTranspose(c) => vec![&mut c.weight, &mut c.bias],
            Layer::InstanceNorm(n) => vec![&mut n.weight, &mut n.bias],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    fn forward(&self, x: &FeatureMap) -> Result<(FeatureMap, Cache)> {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::ConvTranspose(c) => c.forward(x),
            Layer::InstanceNorm(n) => n.forward(x),
            Layer::MaxPool(p) => p.forward(x),
            Layer::Linear(l) => l.forward(x),
            Layer::Relu => {
                let mut out = x.clone();
                out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                let mask = x.data().iter().map(|&v| v > 0.0).collect();
                Ok((out, Cache::Relu { mask }))
            }
            Layer::Sigmoid => {
                let mut out = x.clone();
                out.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
                Ok((out.clone(), Cache::Sigmoid { out }))
            }
            Layer::Flatten => {
                let shape = x.shape();
                Ok((x.clone().reshaped(x.len(), 1, 1), Cache::Flatten { in_shape: shape }))
            }
            Layer::Softmax => {
                let max = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut out = x.clone();
                let mut total = 0.0;
                for v in out.data_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                out.data_mut().iter_mut().for_each(|v| *v /= total);
                Ok((out.clone(), Cache::Softmax { out }))
            }
            Layer::Standardize(s) => {
                if s.mean.len() != x.channels() {
                    return Err(Error::Shape(format!(
                        "standardize expects {} channels, got {}",
                        s.mean.len(),
                        x.channels()
                    )));
                }
                let mut out = x.clone();
                let plane = x.plane_len();
                for (c, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = (*v - s.mean[c]) / s.std[c]);
                }
                Ok((out, Cache::Stateless))
            }
        }
    }

    fn backward(&self, cache: &Cache, dout: &FeatureMap, grad: Option<&mut Layer>) -> FeatureMap {
        match (self, cache) {
            (Layer::Conv(c), Cache::Conv { geom, cols }) => {
                let g = grad.map(|g| match g {
                    Layer::Conv(g) => g,
                    _ => unreachable!("gradient layout mismatch"),
                });
                c.backward(geom, cols, dout, g)
            }
            (Layer::ConvTranspose(c), Cache::ConvTranspose { geom, input }) => {
                let g = grad.map(|g| match g {
                    Layer::ConvTranspose(g) => g,
                    _ => unreachable!("gradient layout mismatch"),
                });
                c.backward(geom, input, dout, g)
            }
            (Layer::InstanceNorm(n), Cache::Norm { xhat, inv_std }) => {
                let g = grad.map(|g| match g {
                    Layer::InstanceNorm(g) => g,
                    _ => unreachable!("gradient layout mismatch"),
                });
                n.backward(xhat, inv_std, dout, g)
            }
            (Layer::Linear(l), Cache::Linear { input }) => {
                let g = grad.map(|g| match g {
                    Layer::Linear(g) => g,
                    _ => unreachable!("gradient layout mismatch"),
                });
                l.backward(input, dout, g)
            }
            (Layer::Relu, Cache::Relu { mask }) => {
                let mut dx = dout.clone();
                for (d, &m) in dx.data_mut().iter_mut().zip(mask) {
                    if !m {
                        *d = 0.0;
                    }
                }
                dx
            }
            (Layer::Sigmoid, Cache::Sigmoid { out }) => {
                let mut dx = dout.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(out.data()) {
                    *d *= y * (1.0 - y);
                }
                dx
            }
            (Layer::MaxPool(_), Cache::MaxPool { argmax, in_shape }) => {
                let (c, h, w) = *in_shape;
                let mut dx = FeatureMap::zeros(c, h, w);
                for (&i, &d) in argmax.iter().zip(dout.data()) {
                    dx.data_mut()[i] += d;
                }
                dx
            }
            (Layer::Flatten, Cache::Flatten { in_shape }) => {
                let (c, h, w) = *in_shape;
                dout.clone().reshaped(c, h, w)
            }
            (Layer::Softmax, Cache::Softmax { out }) => {
                let dot: f64 = dout.data().iter().zip(out.data()).map(|(a, b)| a * b).sum();
                let mut dx = dout.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(out.data()) {
                    *d = y * (*d - dot);
                }
                dx
            }
            (Layer::Standardize(s), Cache::Stateless) => {
                let mut dx = dout.clone();
                let plane = dout.plane_len();
                for (c, chunk) in dx.data_mut().chunks_exact_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v /= s.std[c]);
                }
                dx
            }
            _ => unreachable!("trace does not belong to this layer"),
        }
    }
}

#[derive(Debug, Clone)]
enum Cache {
    Conv { geom: ConvGeom, cols: Vec<f64> },
    ConvTranspose { geom: ConvGeom, input: FeatureMap },
    Norm { xhat: FeatureMap, inv_std: Vec<f64> },
    Relu { mask: Vec<bool> },
    Sigmoid { out: FeatureMap },
    MaxPool { argmax: Vec<usize>, in_shape: (usize, usize, usize) },
    Flatten { in_shape: (usize, usize, usize) },
    Linear { input: FeatureMap },
    Softmax { out: FeatureMap },
    Stateless,
}

/// Everything a backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    caches: Vec<Cache>,
    input_shape: (usize, usize, usize),
}

pub struct Pass {
    pub output: FeatureMap,
    /// Outputs of the layers requested in `keep`, in request order.
    pub kept: Vec<FeatureMap>,
    pub trace: Option<Trace>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.run(x, &[], false)?.output)
    }

    pub fn forward_traced(&self, x: &FeatureMap) -> Result<(FeatureMap, Trace)> {
        let pass = self.run(x, &[], true)?;
        Ok((pass.output, pass.trace.expect("traced")))
    }

    /// Runs the stack, keeping the outputs of the layers listed in `keep`.
    pub fn run(&self, x: &FeatureMap, keep: &[usize], trace: bool) -> Result<Pass> {
        let mut kept: Vec<Option<FeatureMap>> = vec![None; keep.len()];
        let mut caches = Vec::with_capacity(if trace { self.layers.len() } else { 0 });
        let mut current = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, cache) = layer.forward(&current)?;
            for (slot, &k) in kept.iter_mut().zip(keep) {
                if k == i {
                    *slot = Some(out.clone());
                }
            }
            if trace {
                caches.push(cache);
            }
            current = out;
        }
        let kept = kept
            .into_iter()
            .zip(keep)
            .map(|(k, &i)| k.ok_or_else(|| Error::Shape(format!("no layer {i} to keep"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Pass {
            output: current,
            kept,
            trace: trace.then_some(Trace {
                caches,
                input_shape: x.shape(),
            }),
        })
    }

    /// Backpropagates through a traced pass. `grad_out` is the gradient at the
    /// final output; `tap_grads` inject extra gradients at intermediate layer
    /// outputs. Parameter gradients are accumulated into `param_grads` when
    /// given (it must be shaped like `self`, see [`Sequential::zeros_like`]).
    pub fn backward(
        &self,
        trace: &Trace,
        grad_out: Option<&FeatureMap>,
        tap_grads: &[(usize, &FeatureMap)],
        mut param_grads: Option<&mut Sequential>,
    ) -> FeatureMap {
        let mut g: Option<FeatureMap> = grad_out.cloned();
        for i in (0..self.layers.len()).rev() {
            for (_, tg) in tap_grads.iter().filter(|(t, _)| *t == i) {
                match g.as_mut() {
                    Some(acc) => acc.add_assign(tg),
                    None => g = Some((*tg).clone()),
                }
            }
            let Some(current) = g.as_ref() else { continue };
            let grad_layer = param_grads.as_deref_mut().map(|p| &mut p.layers[i]);
            g = Some(self.layers[i].backward(&trace.caches[i], current, grad_layer));
        }
        let (c, h, w) = trace.input_shape;
        g.unwrap_or_else(|| FeatureMap::zeros(c, h, w))
    }

    /// A structurally identical stack with every parameter zeroed.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_params(0.0);
        z
    }

    pub fn fill_params(&mut self, value: f64) {
        for layer in &mut self.layers {
            for p in layer.params_mut() {
                p.iter_mut().for_each(|v| *v = value);
            }
        }
    }

    /// `(canonical name, view)` for every parameter tensor, named
    /// `{prefix}.{layer index}.{weight|bias}`.
    pub fn named_params(&self, prefix: &str) -> Vec<(String, ParamView<'_>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, layer)| {
                layer
                    .params()
                    .into_iter()
                    .map(move |p| (format!("{prefix}.{i}.{}", p.suffix), p))
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|p| p.values.len())
            .sum()
    }
}
