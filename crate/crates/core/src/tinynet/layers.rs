use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// Non-overlapping `size x size` max pooling; trailing rows/cols dropped.
    MaxPool { size: usize },
    Relu,
    /// Fully connected over the flattened input.
    Linear { inputs: usize, outputs: usize },
}

impl LayerKind {
    /// 3x3 "same" convolution, stride 1.
    pub fn conv3(in_ch: usize, out_ch: usize) -> Self {
        LayerKind::Conv {
            in_ch,
            out_ch,
            kernel: 3,
            stride: 1,
            pad: 1,
        }
    }

    pub fn conv1(in_ch: usize, out_ch: usize) -> Self {
        LayerKind::Conv {
            in_ch,
            out_ch,
            kernel: 1,
            stride: 1,
            pad: 0,
        }
    }

    /// `(weight shape, bias shape)`, or `None` for parameter-free layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                ..
            } => Some((vec![out_ch, in_ch, kernel, kernel], vec![out_ch])),
            LayerKind::Linear { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            LayerKind::MaxPool { .. } | LayerKind::Relu => None,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Conv { in_ch, kernel, .. } => in_ch * kernel * kernel,
            LayerKind::Linear { inputs, .. } => inputs,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
        }
    }
}

/// A layer with its parameters and accumulated gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Tensor,
    pub bias: Tensor,
    pub grad_weight: Tensor,
    pub grad_bias: Tensor,
}

/// Per-layer state kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    None,
    Cols(Vec<f64>),
    Argmax(Vec<usize>),
}

impl Layer {
    pub fn new(spec: LayerSpec) -> Self {
        let (w, b) = spec
            .kind
            .param_shapes()
            .unwrap_or((vec![0], vec![0]));
        Layer {
            weight: Tensor::zeros(&w),
            bias: Tensor::zeros(&b),
            grad_weight: Tensor::zeros(&w),
            grad_bias: Tensor::zeros(&b),
            spec,
        }
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn has_params(&self) -> bool {
        self.spec.kind.param_shapes().is_some()
    }

    /// Uniform in `[-gain * sqrt(3 / fan_in), +gain * sqrt(3 / fan_in)]`, zero bias.
    pub fn init_uniform<R: rand::Rng>(&mut self, gain: f64, rng: &mut R) {
        if !self.has_params() {
            return;
        }
        let bound = gain * (3.0 / self.spec.kind.fan_in() as f64).sqrt();
        for w in self.weight.data_mut() {
            *w = rng.random_range(-bound..bound);
        }
        self.bias.fill(0.0);
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self.spec.kind {
            LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => {
                let [c, h, w] = *input else {
                    return Err(self.mismatch(vec![in_ch, 0, 0], input));
                };
                if c != in_ch || h + 2 * pad < kernel || w + 2 * pad < kernel {
                    return Err(self.mismatch(vec![in_ch, kernel, kernel], input));
                }
                Ok(vec![
                    out_ch,
                    (h + 2 * pad - kernel) / stride + 1,
                    (w + 2 * pad - kernel) / stride + 1,
                ])
            }
            LayerKind::MaxPool { size } => {
                let [c, h, w] = *input else {
                    return Err(self.mismatch(vec![0, size, size], input));
                };
                if h < size || w < size {
                    return Err(self.mismatch(vec![c, size, size], input));
                }
                Ok(vec![c, h / size, w / size])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::Linear { inputs, outputs } => {
                if input.iter().product::<usize>() != inputs {
                    return Err(self.mismatch(vec![inputs], input));
                }
                Ok(vec![outputs])
            }
        }
    }

    fn mismatch(&self, expected: Vec<usize>, got: &[usize]) -> Error {
        Error::ShapeMismatch {
            context: format!("layer `{}`", self.spec.name),
            expected,
            got: got.to_vec(),
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Cache)> {
        let out_shape = self.output_shape(input.shape())?;
        match self.spec.kind {
            LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => {
                let (_, h, w) = input.chw()?;
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let geom = ConvGeom {
                    channels: in_ch,
                    height: h,
                    width: w,
                    kernel,
                    stride,
                    pad,
                    out_h: oh,
                    out_w: ow,
                };
                let cols = im2col(input.data(), &geom);
                let k = in_ch * kernel * kernel;
                let n = oh * ow;
                let mut out = vec![0.0; out_ch * n];
                gemm(
                    out_ch,
                    k,
                    n,
                    Mat::row_major(self.weight.data(), k),
                    Mat::row_major(&cols, n),
                    0.0,
                    &mut out,
                );
                for (o, row) in out.chunks_mut(n).enumerate() {
                    let b = self.bias.data()[o];
                    row.iter_mut().for_each(|v| *v += b);
                }
                Ok((Tensor::from_vec(&out_shape, out)?, Cache::Cols(cols)))
            }
            LayerKind::MaxPool { size } => {
                let (c, h, w) = input.chw()?;
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let src = input.data();
                let mut out = Vec::with_capacity(c * oh * ow);
                let mut argmax = Vec::with_capacity(c * oh * ow);
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = usize::MAX;
                            let mut best_v = f64::NEG_INFINITY;
                            for dy in 0..size {
                                let row = (ch * h + oy * size + dy) * w + ox * size;
                                for dx in 0..size {
                                    let v = src[row + dx];
                                    if best == usize::MAX || v > best_v {
                                        best = row + dx;
                                        best_v = v;
                                    }
                                }
                            }
                            out.push(best_v);
                            argmax.push(best);
                        }
                    }
                }
                Ok((Tensor::from_vec(&out_shape, out)?, Cache::Argmax(argmax)))
            }
            LayerKind::Relu => {
                let data = input.data().iter().map(|&v| v.max(0.0)).collect();
                Ok((Tensor::from_vec(&out_shape, data)?, Cache::None))
            }
            LayerKind::Linear { inputs, outputs } => {
                let mut out = vec![0.0; outputs];
                gemm(
                    outputs,
                    inputs,
                    1,
                    Mat::row_major(self.weight.data(), inputs),
                    Mat::row_major(input.data(), 1),
                    0.0,
                    &mut out,
                );
                for (o, b) in out.iter_mut().zip(self.bias.data()) {
                    *o += b;
                }
                Ok((Tensor::from_vec(&out_shape, out)?, Cache::None))
            }
        }
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &mut self,
        input: &Tensor,
        output: &Tensor,
        cache: &Cache,
        grad_out: &Tensor,
    ) -> Result<Tensor> {
        if grad_out.shape() != output.shape() {
            return Err(self.mismatch(output.shape().to_vec(), grad_out.shape()));
        }
        match (self.spec.kind, cache) {
            (
                LayerKind::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    pad,
                },
                Cache::Cols(cols),
            ) => {
                let (_, h, w) = input.chw()?;
                let (_, oh, ow) = output.chw()?;
                let k = in_ch * kernel * kernel;
                let n = oh * ow;
                let g = grad_out.data();
                // dW += dOut * cols^T
                gemm(
                    out_ch,
                    n,
                    k,
                    Mat::row_major(g, n),
                    Mat::transposed(cols, n),
                    1.0,
                    self.grad_weight.data_mut(),
                );
                for (o, row) in g.chunks(n).enumerate() {
                    self.grad_bias.data_mut()[o] += row.iter().sum::<f64>();
                }
                // dCols = W^T * dOut
                let mut dcols = vec![0.0; k * n];
                gemm(
                    k,
                    out_ch,
                    n,
                    Mat::transposed(self.weight.data(), k),
                    Mat::row_major(g, n),
                    0.0,
                    &mut dcols,
                );
                let geom = ConvGeom {
                    channels: in_ch,
                    height: h,
                    width: w,
                    kernel,
                    stride,
                    pad,
                    out_h: oh,
                    out_w: ow,
                };
                Tensor::from_vec(input.shape(), col2im(&dcols, &geom))
            }
            (LayerKind::MaxPool { .. }, Cache::Argmax(argmax)) => {
                let mut gin = Tensor::zeros(input.shape());
                let dst = gin.data_mut();
                for (&src, &g) in argmax.iter().zip(grad_out.data()) {
                    dst[src] += g;
                }
                Ok(gin)
            }
            (LayerKind::Relu, _) => {
                let data = output
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
                    .collect();
                Tensor::from_vec(input.shape(), data)
            }
            (LayerKind::Linear { inputs, outputs }, _) => {
                let g = grad_out.data();
                let x = input.data();
                for (o, &go) in g.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    let row = &mut self.grad_weight.data_mut()[o * inputs..(o + 1) * inputs];
                    for (dw, &xi) in row.iter_mut().zip(x) {
                        *dw += go * xi;
                    }
                    self.grad_bias.data_mut()[o] += go;
                }
                let mut gin = vec![0.0; inputs];
                gemm(
                    inputs,
                    outputs,
                    1,
                    Mat::transposed(self.weight.data(), inputs),
                    Mat::row_major(g, 1),
                    0.0,
                    &mut gin,
                );
                Tensor::from_vec(input.shape(), gin)
            }
            _ => Err(Error::InvalidArgument(format!(
                "layer `{}`: cache does not match layer kind",
                self.spec.name
            ))),
        }
    }
}

struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    /// Source index for output position `o` along an axis of length `len`
    /// at kernel tap `k`, or `None` inside the zero padding.
    #[inline]
    fn source(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let p = (o * self.stride + k).checked_sub(self.pad)?;
        (p < len).then_some(p)
    }
}

fn im2col(src: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.out_h * g.out_w;
    let mut cols = vec![0.0; g.channels * g.kernel * g.kernel * n];
    for c in 0..g.channels {
        let plane = &src[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = ((c * g.kernel + ky) * g.kernel + kx) * n;
                for oy in 0..g.out_h {
                    let Some(sy) = g.source(oy, ky, g.height) else {
                        continue;
                    };
                    let dst = &mut cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    let line = &plane[sy * g.width..(sy + 1) * g.width];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        if let Some(sx) = g.source(ox, kx, g.width) {
                            *d = line[sx];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.out_h * g.out_w;
    let mut dst = vec![0.0; g.channels * g.height * g.width];
    for c in 0..g.channels {
        let plane = &mut dst[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = ((c * g.kernel + ky) * g.kernel + kx) * n;
                for oy in 0..g.out_h {
                    let Some(sy) = g.source(oy, ky, g.height) else {
                        continue;
                    };
                    let src = &cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    let line = &mut plane[sy * g.width..(sy + 1) * g.width];
                    for (ox, &v) in src.iter().enumerate() {
                        if let Some(sx) = g.source(ox, kx, g.width) {
                            line[sx] += v;
                        }
                    }
                }
            }
        }
    }
    dst
}

/// Strided matrix view for [`gemm`].
#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f64],
    row_stride: isize,
    col_stride: isize,
}

impl<'a> Mat<'a> {
    /// Row-major matrix with `cols` columns.
    fn row_major(data: &'a [f64], cols: usize) -> Self {
        Mat {
            data,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Transpose of a row-major matrix that has `cols` columns.
    fn transposed(data: &'a [f64], cols: usize) -> Self {
        Mat {
            data,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }
}

/// `c = a * b + beta * c` with `a: m x k`, `b: k x n`, `c` row-major `m x n`.
fn gemm(m: usize, k: usize, n: usize, a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    assert!(a.data.len() >= m * k && b.data.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the views address at most m*k, k*n and m*n elements within
    // their slices (checked above); `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
