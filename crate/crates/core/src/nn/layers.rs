//! Layer implementations. Every layer consumes a batch-major tensor and
//! validates the per-item shape it was built for.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::gemm::{gemm, Op};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub id: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(id: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            id: id.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Prelu,
    Elu,
    Tanh,
    Gelu,
}

/// Declarative description of one layer; a `LayerGraph` is built from a list
/// of these and can always be rebuilt from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    BatchNorm2d {
        channels: usize,
    },
    MaxPool2x2,
    Activation {
        kind: Activation,
    },
    Dropout {
        rate: f32,
    },
    Linear {
        inputs: usize,
        outputs: usize,
    },
    Flatten,
    Softmax,
    Sigmoid,
}

/// Parameter initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum Init {
    /// Weights ~ N(0, 1/fan_in), zero biases.
    FanIn,
    /// Every weight and bias ~ N(0, std).
    Normal { std: f32 },
}

impl Init {
    fn weights(self, fan_in: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let std = match self {
            Init::FanIn => (1.0 / fan_in.max(1) as f32).sqrt(),
            Init::Normal { std } => std,
        };
        sample_normal(std, n, rng)
    }

    fn biases(self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        match self {
            Init::FanIn => vec![0.0; n],
            Init::Normal { std } => sample_normal(std, n, rng),
        }
    }
}

fn sample_normal(std: f32, n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let dist = Normal::new(0.0f32, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

pub(crate) trait Layer: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn output_shape(&self) -> &[usize];
    /// Eval-mode forward; never touches caches.
    fn infer(&self, x: &Tensor) -> Result<Tensor>;
    /// Train-mode forward; caches what `backward` needs.
    fn forward_train(&mut self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor>;
    fn backward(&mut self, grad: &Tensor) -> Result<Tensor>;
    fn clear_cache(&mut self);
    fn params(&self) -> Vec<&Parameter> {
        Vec::new()
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        Vec::new()
    }
    fn buffers(&self) -> Vec<(&'static str, &Tensor)> {
        Vec::new()
    }
    fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        Vec::new()
    }
}

fn check_input(name: &str, want: &[usize], x: &Tensor) -> Result<()> {
    if x.shape().len() != want.len() + 1 || &x.shape()[1..] != want {
        let mut expected = vec![x.batch()];
        expected.extend_from_slice(want);
        return Err(Error::shape(name, &expected, x.shape()));
    }
    Ok(())
}

fn with_batch(batch: usize, item: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(item.len() + 1);
    s.push(batch);
    s.extend_from_slice(item);
    s
}

fn missing_cache(name: &str) -> Error {
    Error::BackwardWithoutForward(name.to_string())
}

/// Builds a layer from its spec, returning it with its output item shape.
pub(crate) fn build_layer(
    spec: &LayerSpec,
    input: &[usize],
    id_prefix: &str,
    init: Init,
    rng: &mut ChaCha8Rng,
) -> Result<Box<dyn Layer>> {
    let arch = |msg: String| Error::Architecture(format!("{id_prefix}: {msg}"));
    Ok(match *spec {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
        } => {
            if input.len() != 3 || input[0] != in_channels {
                return Err(arch(format!("conv2d expects [{in_channels}, H, W], got {input:?}")));
            }
            if kernel == 0 || out_channels == 0 {
                return Err(arch("conv2d needs positive kernel and channels".into()));
            }
            Box::new(Conv2d::new(
                id_prefix,
                in_channels,
                out_channels,
                kernel,
                input[1],
                input[2],
                init,
                rng,
            ))
        }
        LayerSpec::BatchNorm2d { channels } => {
            if input.len() != 3 || input[0] != channels {
                return Err(arch(format!("batchnorm expects [{channels}, H, W], got {input:?}")));
            }
            Box::new(BatchNorm2d::new(id_prefix, input))
        }
        LayerSpec::MaxPool2x2 => {
            if input.len() != 3 {
                return Err(arch(format!("maxpool expects [C, H, W], got {input:?}")));
            }
            if input[1] / 2 == 0 || input[2] / 2 == 0 {
                return Err(arch(format!(
                    "spatial collapse: 2x2 pooling on {}x{} leaves an empty dimension",
                    input[1], input[2]
                )));
            }
            Box::new(MaxPool2x2::new(input))
        }
        LayerSpec::Activation { kind } => Box::new(ActivationLayer::new(id_prefix, kind, input)),
        LayerSpec::Dropout { rate } => {
            if !(0.0..1.0).contains(&rate) {
                return Err(arch(format!("dropout rate {rate} outside [0, 1)")));
            }
            Box::new(Dropout::new(rate, input))
        }
        LayerSpec::Linear { inputs, outputs } => {
            if input != [inputs] {
                return Err(arch(format!("linear expects [{inputs}], got {input:?}")));
            }
            if outputs == 0 {
                return Err(arch("linear needs at least one output".into()));
            }
            Box::new(Linear::new(id_prefix, inputs, outputs, init, rng))
        }
        LayerSpec::Flatten => Box::new(Flatten::new(input)),
        LayerSpec::Softmax => {
            if input.len() != 1 {
                return Err(arch(format!("softmax expects a flat item, got {input:?}")));
            }
            Box::new(Softmax::new(input))
        }
        LayerSpec::Sigmoid => Box::new(Sigmoid::new(input)),
    })
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Debug)]
struct Conv2d {
    weight: Parameter,
    bias: Parameter,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    height: usize,
    width: usize,
    out_shape: Vec<usize>,
    cols: Option<Vec<f32>>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    fn new(
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        height: usize,
        width: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = init.weights(fan_in, out_ch * fan_in, rng);
        let b = init.biases(out_ch, rng);
        Self {
            weight: Parameter::new(
                format!("{prefix}.weight"),
                Tensor::new(vec![out_ch, fan_in], w).unwrap(),
            ),
            bias: Parameter::new(format!("{prefix}.bias"), Tensor::new(vec![out_ch], b).unwrap()),
            in_ch,
            out_ch,
            kernel,
            height,
            width,
            out_shape: vec![out_ch, height, width],
            cols: None,
        }
    }

    fn in_len(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    fn col_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel * self.height * self.width
    }

    /// "Same" padding: the extra pixel for even kernels goes after.
    fn pad(&self) -> isize {
        ((self.kernel - 1) / 2) as isize
    }

    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let (h, w, k) = (self.height, self.width, self.kernel);
        let pad = self.pad();
        let hw = h * w;
        for c in 0..self.in_ch {
            let plane = &x[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let out = &mut cols[row * hw..(row + 1) * hw];
                    for y in 0..h {
                        let iy = y as isize + ky as isize - pad;
                        let dst = &mut out[y * w..(y + 1) * w];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (xo, d) in dst.iter_mut().enumerate() {
                            let ix = xo as isize + kx as isize - pad;
                            *d = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], dx: &mut [f32]) {
        let (h, w, k) = (self.height, self.width, self.kernel);
        let pad = self.pad();
        let hw = h * w;
        for c in 0..self.in_ch {
            let plane = &mut dx[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for y in 0..h {
                        let iy = y as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for xo in 0..w {
                            let ix = xo as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += src[y * w + xo];
                            }
                        }
                    }
                }
            }
        }
    }

    fn run(&self, x: &Tensor, keep_cols: bool) -> (Tensor, Option<Vec<f32>>) {
        let batch = x.batch();
        let hw = self.height * self.width;
        let ckk = self.in_ch * self.kernel * self.kernel;
        let mut out = vec![0.0; batch * self.out_ch * hw];
        let mut all_cols = if keep_cols {
            vec![0.0; batch * self.col_len()]
        } else {
            Vec::new()
        };
        let mut scratch = vec![0.0; self.col_len()];
        for b in 0..batch {
            let xs = &x.data()[b * self.in_len()..(b + 1) * self.in_len()];
            let cols = if keep_cols {
                &mut all_cols[b * self.col_len()..(b + 1) * self.col_len()]
            } else {
                &mut scratch[..]
            };
            self.im2col(xs, cols);
            let o = &mut out[b * self.out_ch * hw..(b + 1) * self.out_ch * hw];
            for (oc, chunk) in o.chunks_mut(hw).enumerate() {
                chunk.fill(self.bias.value.data()[oc]);
            }
            gemm(
                self.out_ch,
                ckk,
                hw,
                self.weight.value.data(),
                Op::N,
                cols,
                Op::N,
                1.0,
                o,
            );
        }
        let t = Tensor::new(with_batch(batch, &self.out_shape), out).unwrap();
        (t, keep_cols.then_some(all_cols))
    }
}

impl Layer for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn output_shape(&self) -> &[usize] {
        &self.out_shape
    }
    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        check_input("conv2d", &[self.in_ch, self.height, self.width], x)?;
        Ok(self.run(x, false).0)
    }
    fn forward_train(&mut self, x: &Tensor, _rng: &mut ChaCha8Rng) -> Result<Tensor> {
        check_input("conv2d", &[self.in_ch, self.height, self.width], x)?;
        let (out, cols) = self.run(x, true);
        self.cols = cols;
        Ok(out)
    }
    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cols = self.cols.take().ok_or_else(|| missing_cache("conv2d"))?;
        check_input("conv2d backward", &self.out_shape, grad)?;
        let batch = grad.batch();
        if cols.len() != batch * self.col_len() {
            return Err(Error::shape(
                "conv2d backward",
                &[cols.len() / self.col_len()],
                &[batch],
            ));
        }
        let hw = self.height * self.width;
        let ckk = self.in_ch * self.kernel * self.kernel;
        let mut dx = vec![0.0; batch * self.in_len()];
        let mut dcols = vec![0.0; self.col_len()];
        for b in 0..batch {
            let g = &grad.data()[b * self.out_ch * hw..(b + 1) * self.out_ch * hw];
            let c = &cols[b * self.col_len()..(b + 1) * self.col_len()];
            gemm(
                self.out_ch,
                hw,
                ckk,
                g,
                Op::N,
                c,
                Op::T,
                1.0,
                self.weight.grad.data_mut(),
            );
            for (oc, chunk) in g.chunks(hw).enumerate() {
                self.bias.grad.data_mut()[oc] += chunk.iter().sum::<f32>();
            }
            gemm(
                ckk,
                self.out_ch,
                hw,
                self.weight.value.data(),
                Op::T,
                g,
                Op::N,
                0.0,
                &mut dcols,
            );
            self.col2im(&dcols, &mut dx[b * self.in_len()..(b + 1) * self.in_len()]);
        }
        Tensor::new(with_batch(batch, &[self.in_ch, self.height, self.width]), dx)
    }
    fn clear_cache(&mut self) {
        self.cols = None;
    }
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ---------------------------------------------------------------------------
// Batch normalization over (N, H, W) per channel

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug)]
struct BatchNorm2d {
    gamma: Parameter,
    beta: Parameter,
    running_mean: Tensor,
    running_var: Tensor,
    shape: Vec<usize>,
    cache: Option<(Vec<f32>, Vec<f32>)>, // normalized input, per-channel 1/std
}

impl BatchNorm2d {
    fn new(prefix: &str, shape: &[usize]) -> Self {
        let c = shape[0];
        Self {
            gamma: Parameter::new(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0)),
            beta: Parameter::new(format!("{prefix}.beta"), Tensor::zeros(&[c])),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::full(&[c], 1.0),
            shape: shape.to_vec(),
            cache: None,
        }
    }

    fn channels(&self) -> usize {
        self.shape[0]
    }

    fn plane(&self) -> usize {
        self.shape[1] * self.shape[2]
    }
}

impl Layer for BatchNorm2d {
    fn name(&self) -> &'static str {
        "batchnorm2d"
    }
    fn output_shape(&self) -> &[usize] {
        &self.shape
    }
    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        check_input("batchnorm2d", &self.shape, x)?;
        let (c, hw) = (self.channels(), self.plane());
        let mut out = x.data().to_vec();
        for (i, chunk) in out.chunks_mut(hw).enumerate() {
            let ch = i % c;
            let inv = 1.0 / (self.running_var.data()[ch] + BN_EPS).sqrt();
            let (m, g, b) = (
                self.running_mean.data()[ch],
                self.gamma.value.data()[ch],
                self.beta.value.data()[ch],
            );
            chunk.iter_mut().for_each(|v| *v = (*v - m) * inv * g + b);
        }
        Tensor::new(x.shape().to_vec(), out)
    }
    fn forward_train(&mut self, x: &Tensor, _rng: &mut ChaCha8Rng) -> Result<Tensor> {
        check_input("batchnorm2d", &self.shape, x)?;
        let (c, hw) = (self.channels(), self.plane());
        let count = x.batch() * hw;
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (i, chunk) in x.data().chunks(hw).enumerate() {
            let ch = i % c;
            for &v in chunk {
                mean[ch] += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for (i, chunk) in x.data().chunks(hw).enumerate() {
            let ch = i % c;
            for &v in chunk {
                let d = v as f64 - mean[ch];
                sq[ch] += d * d;
            }
        }
        let var: Vec<f64> = sq.iter().map(|s| s / count as f64).collect();
        let inv: Vec<f32> = var.iter().map(|v| (1.0 / (v + BN_EPS as f64).sqrt()) as f32).collect();
        let mut xhat = x.data().to_vec();
        let mut out = vec![0.0; xhat.len()];
        for (i, (xh, o)) in xhat.chunks_mut(hw).zip(out.chunks_mut(hw)).enumerate() {
            let ch = i % c;
            let (g, b) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
            for (v, y) in xh.iter_mut().zip(o.iter_mut()) {
                *v = ((*v as f64 - mean[ch]) as f32) * inv[ch];
                *y = *v * g + b;
            }
        }
        for ch in 0..c {
            let unbiased = if count > 1 {
                sq[ch] / (count - 1) as f64
            } else {
                var[ch]
            };
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[ch] as f32;
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * unbiased as f32;
        }
        self.cache = Some((xhat, inv));
        Tensor::new(x.shape().to_vec(), out)
    }
    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (xhat, inv) = self.cache.take().ok_or_else(|| missing_cache("batchnorm2d"))?;
        check_input("batchnorm2d backward", &self.shape, grad)?;
        if xhat.len() != grad.len() {
            return Err(Error::shape("batchnorm2d backward", &[xhat.len()], &[grad.len()]));
        }
        let (c, hw) = (self.channels(), self.plane());
        let count = (grad.batch() * hw) as f32;
        let mut sum_g = vec![0.0f32; c];
        let mut sum_gx = vec![0.0f32; c];
        for (i, (g, xh)) in grad.data().chunks(hw).zip(xhat.chunks(hw)).enumerate() {
            let ch = i % c;
            for (a, b) in g.iter().zip(xh) {
                sum_g[ch] += a;
                sum_gx[ch] += a * b;
            }
        }
        for ch in 0..c {
            self.beta.grad.data_mut()[ch] += sum_g[ch];
            self.gamma.grad.data_mut()[ch] += sum_gx[ch];
        }
        let mut dx = vec![0.0; grad.len()];
        for (i, ((d, g), xh)) in dx
            .chunks_mut(hw)
            .zip(grad.data().chunks(hw))
            .zip(xhat.chunks(hw))
            .enumerate()
        {
            let ch = i % c;
            let scale = self.gamma.value.data()[ch] * inv[ch] / count;
            for ((dv, gv), xv) in d.iter_mut().zip(g).zip(xh) {
                *dv = scale * (count * gv - sum_g[ch] - xv * sum_gx[ch]);
            }
        }
        Tensor::new(grad.shape().to_vec(), dx)
    }
    fn clear_cache(&mut self) {
        self.cache = None;
    }
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gamma, &mut self.beta]
    }
    fn buffers(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("running_mean", &self.running_mean), ("running_var", &self.running_var)]
    }
    fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("running_mean", &mut self.running_mean),
            ("running_var", &mut self.running_var),
        ]
    }
}

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2 (odd trailing rows/columns are dropped)

#[derive(Debug)]
struct MaxPool2x2 {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    argmax: Option<(usize, Vec<u32>)>,
}

impl MaxPool2x2 {
    fn new(input: &[usize]) -> Self {
        Self {
            in_shape: input.to_vec(),
            out_shape: vec![input[0], input[1] / 2, input[2] / 2],
            argmax: None,
        }
    }

    fn run(&self, x: &Tensor) -> (Vec<f32>, Vec<u32>) {
        let (c, h, w) = (self.in_shape[0], self.in_shape[1], self.in_shape[2]);
        let (oh, ow) = (h / 2, w / 2);
        let n = x.batch() * c;
        let mut out = Vec::with_capacity(n * oh * ow);
        let mut idx = Vec::with_capacity(n * oh * ow);
        for p in 0..n {
            let plane = &x.data()[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = (2 * y) * w + 2 * xo;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = (2 * y + dy) * w + 2 * xo + dx;
                        if plane[cand] > plane[best] {
                            best = cand;
                        }
                    }
                    out.push(plane[best]);
                    idx.push((p * h * w + best) as u32);
                }
            }
        }
        (out, idx)
    }
}

impl Layer for MaxPool2x2 {
    fn name(&self) -> &'static str {
        "maxpool2x2"
    }
    fn output_shape(&self) -> &[usize] {
        &self.out_shape
    }
    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        check_input("maxpool2x2", &self.in_shape, x)?;
        let (out, _) = self.run(x);
        Tensor::new(with_batch(x.batch(), &self.out_shape), out)
    }
    fn forward_train(&mut self, x: &Tensor, _rng: &mut ChaCha8Rng) -> Result<Tensor> {
        check_input("maxpool2x2", &self.in_shape, x)?;
        let (out, idx) = self.run(x);
        self.argmax = Some((x.len(), idx));
        Tensor::new(with_batch(x.batch(), &self.out_shape), out)
    }
    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (in_len, idx) = self.argmax.take().ok_or_else(|| missing_cache("maxpool2x2"))?;
        check_input("maxpool2x2 backward", &self.out_shape, grad)?;
        if idx.len() != grad.len() {
            return Err(Error::shape("maxpool2x2 backward", &[idx.len()], &[grad.len()]));
        }
        let mut dx = vec![0.0; in_len];
        for (&i, &g) in idx.iter().zip(grad.data()) {
            dx[i as usize] += g;
        }
        Tensor::new(with_batch(grad.batch(), &self.in_shape), dx)
    }
    fn clear_cache(&mut self) {
        self.argmax = None;
    }
}

// ---------------------------------------------------------------------------
// Elementwise activations

const ELU_ALPHA: f32 = 1.0;
const PRELU_INIT: f32 = 0.25;
const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

#[derive(Debug)]
struct ActivationLayer {
    kind: Activation,
    slope: Option<Parameter>,
    shape: Vec<usize>,
    cache: Option<(Vec<f32>, Vec<f32>)>, // input, output
}

impl ActivationLayer {
    fn new(prefix: &str, kind: Activation, shape: &[usize]) -> Self {
        let slope = (kind == Activation::Prelu)
            .then(|| Parameter::new(format!("{prefix}.slope"), Tensor::full(&[1], PRELU_INIT)));
        Self {
            kind,
            slope,
            shape: shape.to_vec(),
            cache: None,
        }
    }

    fn apply(&self, x: f32) -> f32 {
        match self.kind {
            Activation::Relu => x.max(0.0),
            Activation::Prelu => {
                let a = self.slope.as_ref().map_or(PRELU_INIT, |p| p.value.data()[0]);
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    ELU_ALPHA * x.exp_m1()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh()),
        }
    }
}

impl Layer for ActivationLayer {
    fn name(&self) -> &'static str {
        "activation"
    }
    fn output_shape(&self) -> &[usize] {
        &self.shape
    }
    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        check_input("activation", &self.shape, x)?;
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| self.apply(v)).collect())
    }
    fn forward_train(&mut self, x: &Tensor, _rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let out = self.infer(x)?;
        self.cache = Some((x.data().to_vec(), out.data().to_vec()));
        Ok(out)
    }
    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (input, output) = self.cache.take().ok_or_else(|| missing_cache("activation"))?;
        check_input("activation backward", &self.shape, grad)?;
        if input.len() != grad.len() {
            return Err(Error::shape("activation backward", &[input.len()], &[grad.len()]));
        }
        let g = grad.data();
        let dx: Vec<f32> = match self.kind {
            Activation::Relu => g
                .iter()
                .zip(&input)
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect(),
            Activation::Prelu => {
                let slope = self.slope.as_mut().expect("prelu slope");
                let a = slope.value.data()[0];
                let mut da = 0.0;
                let dx = g
                    .iter()
                    .zip(&input)
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else {
                            da += g * x;
                            a * g
                        }
                    })
                    .collect();
                slope.grad.data_mut()[0] += da;
                dx
            }
            Activation::Elu => g
                .iter()
                .zip(input.iter().zip(&output))
                .map(|(g, (&x, &y))| if x > 0.0 { *g } else { g * (y + ELU_ALPHA) })
                .collect(),
            Activation::Tanh => g.iter().zip(&output).map(|(g, &y)| g * (1.0 - y * y)).collect(),
            Activation::Gelu => g
                .iter()
                .zip(&input)
                .map(|(g, &x)| {
                    let t = (GELU_C * (x + 0.044_715 * x * x * x)).tanh();
                    let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x);
                    g * d
                })
                .collect(),
        };
        Tensor::new(grad.shape().to_vec(), dx)
    }
    fn clear_cache(&mut self) {
        self.cache = None;
    }
    fn params(&self) -> Vec<&Parameter> {
        self.slope.iter().collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.slope.iter_mut().collect()
    }
}

// ---------------------------------------------------------------------------
// Inverted dropout

#[derive(Debug)]
struct Dropout {
    rate: f32,
    shape: Vec<usize>,
    mask: Option<Vec<f32>>,
}

impl Dropout {
    fn new(rate: f32, shape: &[usize]) -> Self {
        Self {
            rate,
            shape: shape.to_vec(),
            mask: None,
        }
    }
}

impl Layer for Dropout {
    fn name(&self) -> &'static str {
        "dropout"
    }
    fn output_shape(&self) -> &[usize] {
        &self.shape
    }
    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        check_input("dropout", &self.shape, x)?;
        Ok(x.clone())
    }
    fn forward_train(&mut self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        check_input("dropout", &self.shape, x)?;
        let keep = 1.0 - self.rate;
        let mask: Vec<f32> = (0..x.len())
            .map(|_| if rng.gen::<f32>() >= self.rate { 1.0 / keep } else { 0.0 })
            .collect();
        let out = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        self.mask = Some(mask);
        Tensor::new(x.shape().to_vec(), out)
    }
    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mask = self.mask.take().ok_or_else(|| missing_cache("dropout"))?;
        if mask.len() != grad.len() {
            return Err(Error::shape("dropout backward", &[mask.len()], &[grad.len()]));
        }
        Tensor::new(
            grad.shape().to_vec(),
            grad.data().iter().zip(&mask).map(|(g, m)| g * m).collect(),
        )
    }
    fn clear_cache(&mut self) {
        self.mask = None;
    }
}

// ---------------------------------------------------------------------------
// Fully connected

#[derive(Debug)]
struct Linear {
    weight: Parameter, // [out, in]
    bias: Parameter,
    inputs: usize,
    outputs: usize,
    out_shape: Vec<usize>,
    input: Option<Tensor>,
}

impl Linear {
    fn new(prefix: &str, inputs: usize, outputs: usize, init: Init, rng: &mut ChaCha8Rng) -> Self {
        let w = init.weights(inputs, inputs * outputs, rng);
        let b = init.biases(outputs, rng);
        Self {
            weight: Parameter::new(
                format!("{prefix}.weight"),
                Tensor::new(vec![outputs, inputs], w).unwrap(),
            ),
            bias: Parameter::new(format!("{prefix}.bias"), Tensor::new(vec![outputs], b).unwrap()),
            inputs,
            outputs,
            out_shape: vec![outputs],
            input: None,
        }
    }
}

impl Layer for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn output_shape(&self) -> &[usize] {
        &self.out_shape
    }
    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        check_input("linear", &[self.inputs], x)?;
        let batch = x.batch();
        let mut out = Vec::with_capacity(batch * self.outputs);
        for _ in 0..batch {
            out.extend_from_slice(self.bias.value.data());
        }
        gemm(
            batch,
            self.inputs,
            self.outputs,
            x.data(),
            Op::N,
            self.weight.value.data(),
            Op::T,
            1.0,
            &mut out,
        );
        Tensor::new(vec![batch, self.outputs], out)
    }
    fn forward_train(&mut self, x: &Tensor, _rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let out = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(out)
    }
    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.input.take().ok_or_else(|| missing_cache("linear"))?;
        check_input("linear backward", &[self.outputs], grad)?;
        let batch = grad.batch();
        if batch != x.batch() {
            return Err(Error::shape("linear backward", &[x.batch()], &[batch]));
        }
        gemm(
            self.outputs,
            batch,
            self.inputs,
            grad.data(),
            Op::T,
            x.data(),
            Op::N,
            1.0,
            self.weight.grad.data_mut(),
        );
        for row in grad.data().chunks(self.outputs) {
            for (b, g) in self.bias.grad.data_mut().iter_mut().zip(row) {
                *b += g;
            }
        }
        let mut dx = vec![0.0; batch * self.inputs];
        gemm(
            batch,
            self.outputs,
            self.inputs,
            grad.data(),
            Op::N,
            self.weight.value.data(),
            Op::N,
            0.0,
            &mut dx,
        );
        Tensor::new(vec![batch, self.inputs], dx)
    }
    fn clear_cache(&mut self) {
        self.input = None;
    }
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ---------------------------------------------------------------------------
// Shape-only and normalizing layers

#[derive(Debug)]
struct Flatten {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    cached: bool,
}

impl Flatten {
    fn new(input: &[usize]) -> Self {
        Self {
            in_shape: input.to_vec(),
            out_shape: vec![input.iter().product()],
            cached: false,
        }
    }
}

impl Layer for Flatten {
    fn name(&self) -> &'static str {
        "flatten"
    }
    fn output_shape(&self) -> &[usize] {
        &self.out_shape
    }
    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        check_input("flatten", &self.in_shape, x)?;
        x.clone().reshape(with_batch(x.batch(), &self.out_shape))
    }
    fn forward_train(&mut self, x: &Tensor, _rng: &mut ChaCha8Rng) -> Result<Tensor> {
        self.cached = true;
        self.infer(x)
    }
    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        if !std::mem::take(&mut self.cached) {
            return Err(missing_cache("flatten"));
        }
        grad.clone().reshape(with_batch(grad.batch(), &self.in_shape))
    }
    fn clear_cache(&mut self) {
        self.cached = false;
    }
}

/// Numerically stable softmax of one row, accumulated in f64.
pub fn softmax_row(logits: &[f32], out: &mut [f32]) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut sum = 0.0f64;
    let exps: Vec<f64> = logits
        .iter()
        .map(|&v| {
            let e = (v as f64 - max).exp();
            sum += e;
            e
        })
        .collect();
    for (o, e) in out.iter_mut().zip(exps) {
        *o = (e / sum) as f32;
    }
}

#[derive(Debug)]
struct Softmax {
    shape: Vec<usize>,
    output: Option<Tensor>,
}

impl Softmax {
    fn new(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            output: None,
        }
    }
}

impl Layer for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn output_shape(&self) -> &[usize] {
        &self.shape
    }
    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        check_input("softmax", &self.shape, x)?;
        let n = self.shape[0];
        let mut out = vec![0.0; x.len()];
        for (row, o) in x.data().chunks(n).zip(out.chunks_mut(n)) {
            softmax_row(row, o);
        }
        Tensor::new(x.shape().to_vec(), out)
    }
    fn forward_train(&mut self, x: &Tensor, _rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let out = self.infer(x)?;
        self.output = Some(out.clone());
        Ok(out)
    }
    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let y = self.output.take().ok_or_else(|| missing_cache("softmax"))?;
        if y.shape() != grad.shape() {
            return Err(Error::shape("softmax backward", y.shape(), grad.shape()));
        }
        let n = self.shape[0];
        let mut dx = vec![0.0; grad.len()];
        for ((g, yr), d) in grad.data().chunks(n).zip(y.data().chunks(n)).zip(dx.chunks_mut(n)) {
            let dot: f32 = g.iter().zip(yr).map(|(a, b)| a * b).sum();
            for ((dv, gv), yv) in d.iter_mut().zip(g).zip(yr) {
                *dv = yv * (gv - dot);
            }
        }
        Tensor::new(grad.shape().to_vec(), dx)
    }
    fn clear_cache(&mut self) {
        self.output = None;
    }
}

#[derive(Debug)]
struct Sigmoid {
    shape: Vec<usize>,
    output: Option<Tensor>,
}

impl Sigmoid {
    fn new(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            output: None,
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Layer for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn output_shape(&self) -> &[usize] {
        &self.shape
    }
    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        check_input("sigmoid", &self.shape, x)?;
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| sigmoid(v)).collect())
    }
    fn forward_train(&mut self, x: &Tensor, _rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let out = self.infer(x)?;
        self.output = Some(out.clone());
        Ok(out)
    }
    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let y = self.output.take().ok_or_else(|| missing_cache("sigmoid"))?;
        if y.shape() != grad.shape() {
            return Err(Error::shape("sigmoid backward", y.shape(), grad.shape()));
        }
        Tensor::new(
            grad.shape().to_vec(),
            grad.data()
                .iter()
                .zip(y.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect(),
        )
    }
    fn clear_cache(&mut self) {
        self.output = None;
    }
}
