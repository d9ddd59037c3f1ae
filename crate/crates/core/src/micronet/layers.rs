//! Building blocks of the classifier: convolution, batch norm, SiLU, the
//! conv module, bottleneck and c2f block, plus the classification head.
//!
//! Every block caches what it needs during `forward` and accumulates
//! parameter gradients during `backward`. Per-sample work may run on the
//! rayon pool; weight gradients are always reduced in sample order so the
//! result does not depend on the thread count.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::tensor::{Param, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn he_normal(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// out[m×n] = a[m×k]·b[k×n] + beta·out, with arbitrary strides for a and b.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    out: &mut [f64],
) {
    debug_assert!(out.len() >= m * n);
    // SAFETY: callers pass slices whose extents cover the strided m×k and k×n
    // views; `out` is a dense row-major m×n block.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 2-D convolution without bias (batch norm follows every conv).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::new("conv.weight", he_normal(rng, out_channels * fan_in, fan_in)),
            input: None,
        }
    }

    pub fn output_side(&self, side: usize) -> usize {
        (side + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
        let k = self.kernel;
        let p = ho * wo;
        let mut cols = vec![0.0; self.in_channels * k * k * p];
        for ci in 0..self.in_channels {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im_into(&self, cols: &[f64], h: usize, w: usize, ho: usize, wo: usize, x: &mut [f64]) {
        let k = self.kernel;
        let p = ho * wo;
        for ci in 0..self.in_channels {
            let plane = &mut x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, s) in row[oy * wo..(oy + 1) * wo].iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = x.shape();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            return Err(Error::Shape(format!("input {h}×{w} smaller than kernel")));
        }
        let (ho, wo) = (self.output_side(h), self.output_side(w));
        let p = ho * wo;
        let kk = self.in_channels * self.kernel * self.kernel;
        let mut out = Tensor::zeros([n, self.out_channels, ho, wo]);
        let out_len = out.sample_len();
        let weight = &self.weight.value;
        let pointwise = self.is_pointwise();
        let this = &*self;
        out.data_mut()
            .par_chunks_mut(out_len)
            .enumerate()
            .for_each(|(s, dst)| {
                let xs = x.sample(s);
                let owned;
                let cols: &[f64] = if pointwise {
                    xs
                } else {
                    owned = this.im2col(xs, h, w, ho, wo);
                    &owned
                };
                gemm(
                    this.out_channels,
                    kk,
                    p,
                    weight,
                    (kk as isize, 1),
                    cols,
                    (p as isize, 1),
                    0.0,
                    dst,
                );
            });
        self.input = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let x = self.input.as_ref().expect("conv backward before forward");
        let [_, _, h, w] = x.shape();
        let (ho, wo) = (grad_out.height(), grad_out.width());
        let p = ho * wo;
        let kk = self.in_channels * self.kernel * self.kernel;
        let cout = self.out_channels;
        let weight = &self.weight.value;
        let pointwise = self.is_pointwise();
        let this = &*self;
        let mut grad_in = Tensor::zeros(x.shape());
        let in_len = grad_in.sample_len();
        let weight_grads: Vec<Vec<f64>> = grad_in
            .data_mut()
            .par_chunks_mut(in_len)
            .enumerate()
            .map(|(s, dx)| {
                let xs = x.sample(s);
                let gs = grad_out.sample(s);
                let mut dw = vec![0.0; cout * kk];
                if pointwise {
                    gemm(
                        cout,
                        p,
                        kk,
                        gs,
                        (p as isize, 1),
                        xs,
                        (1, p as isize),
                        0.0,
                        &mut dw,
                    );
                    gemm(
                        kk,
                        cout,
                        p,
                        weight,
                        (1, kk as isize),
                        gs,
                        (p as isize, 1),
                        0.0,
                        dx,
                    );
                } else {
                    let cols = this.im2col(xs, h, w, ho, wo);
                    gemm(
                        cout,
                        p,
                        kk,
                        gs,
                        (p as isize, 1),
                        &cols,
                        (1, p as isize),
                        0.0,
                        &mut dw,
                    );
                    let mut dcols = cols;
                    gemm(
                        kk,
                        cout,
                        p,
                        weight,
                        (1, kk as isize),
                        gs,
                        (p as isize, 1),
                        0.0,
                        &mut dcols,
                    );
                    this.col2im_into(&dcols, h, w, ho, wo, dx);
                }
                dw
            })
            .collect();
        for dw in weight_grads {
            for (g, d) in self.weight.grad.iter_mut().zip(&dw) {
                *g += d;
            }
        }
        grad_in
    }
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    mode: Mode,
}

/// Batch normalisation over (batch, height, width) per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new("bn.gamma", vec![1.0; channels]),
            beta: Param::new("bn.beta", vec![0.0; channels]),
            running_mean: Param::buffer("bn.running_mean", vec![0.0; channels]),
            running_var: Param::buffer("bn.running_var", vec![1.0; channels]),
            eps: 1e-3,
            momentum: 0.03,
            cache: None,
        }
    }

    /// Normalises `z` in place and keeps it as the cached x̂. Train mode
    /// uses batch statistics and updates the running estimates.
    pub fn normalize(&mut self, mut z: Tensor, mode: Mode) {
        let [n, c, _, _] = z.shape();
        let plane = z.plane();
        let count = (n * plane) as f64;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut sum = 0.0;
                    for s in 0..n {
                        sum += z.channel(s, ch).iter().sum::<f64>();
                    }
                    let mu = sum / count;
                    let mut sq = 0.0;
                    for s in 0..n {
                        sq += z
                            .channel(s, ch)
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = sq / count;
                }
                let unbias = if count > 1.0 {
                    count / (count - 1.0)
                } else {
                    1.0
                };
                for ch in 0..c {
                    let rm = &mut self.running_mean.value[ch];
                    *rm = (1.0 - self.momentum) * *rm + self.momentum * mean[ch];
                    let rv = &mut self.running_var.value[ch];
                    *rv = (1.0 - self.momentum) * *rv + self.momentum * var[ch] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.value.clone(),
                self.running_var.value.clone(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        for sample in z.data_mut().chunks_mut(c * plane) {
            for (ch, xs) in sample.chunks_mut(plane).enumerate() {
                let (mu, is) = (mean[ch], inv_std[ch]);
                xs.iter_mut().for_each(|v| *v = (*v - mu) * is);
            }
        }
        self.cache = Some(BnCache {
            xhat: z,
            inv_std,
            mode,
        });
    }

    /// x̂ from the latest `normalize` call.
    pub fn xhat(&self) -> &Tensor {
        &self
            .cache
            .as_ref()
            .expect("batch norm used before forward")
            .xhat
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        self.normalize(x.clone(), mode);
        let mut y = self.xhat().clone();
        let plane = y.plane();
        for sample in y.data_mut().chunks_mut(self.channels * plane) {
            for (ch, ys) in sample.chunks_mut(plane).enumerate() {
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                ys.iter_mut().for_each(|v| *v = g * *v + b);
            }
        }
        y
    }

    /// Turns the gradient with respect to the output into the gradient with
    /// respect to the input, in place, accumulating γ and β gradients.
    pub fn backward_in_place(&mut self, grad: &mut Tensor) {
        let cache = self
            .cache
            .as_ref()
            .expect("batch norm backward before forward");
        let [n, c, _, _] = grad.shape();
        let plane = grad.plane();
        let count = (n * plane) as f64;
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                for (d, xv) in grad.channel(s, ch).iter().zip(cache.xhat.channel(s, ch)) {
                    sum_dy[ch] += d;
                    sum_dy_xhat[ch] += d * xv;
                }
            }
        }
        for ch in 0..c {
            self.gamma.grad[ch] += sum_dy_xhat[ch];
            self.beta.grad[ch] += sum_dy[ch];
        }
        let len = c * plane;
        for (sample, xs) in grad
            .data_mut()
            .chunks_mut(len)
            .zip(cache.xhat.data().chunks(len))
        {
            for (ch, (dx, xh)) in sample.chunks_mut(plane).zip(xs.chunks(plane)).enumerate() {
                let scale = self.gamma.value[ch] * cache.inv_std[ch];
                match cache.mode {
                    Mode::Train => {
                        let (sd, sdx) = (sum_dy[ch] / count, sum_dy_xhat[ch] / count);
                        for (o, xv) in dx.iter_mut().zip(xh) {
                            *o = scale * (*o - sd - xv * sdx);
                        }
                    }
                    Mode::Eval => dx.iter_mut().for_each(|o| *o *= scale),
                }
            }
        }
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let mut g = grad_out.clone();
        self.backward_in_place(&mut g);
        g
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvModuleSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub batch_norm: bool,
}

impl ConvModuleSpec {
    /// Downsampling module used between backbone stages.
    pub fn down(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 2,
            padding: 1,
            batch_norm: true,
        }
    }

    /// Pointwise module used inside c2f blocks and the head.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 1,
            stride: 1,
            padding: 0,
            batch_norm: true,
        }
    }
}

/// Convolution → batch norm → SiLU, with the affine and activation steps
/// fused so only x̂ (or the raw conv output) and σ are cached.
#[derive(Debug, Clone)]
pub struct ConvModule {
    pub spec: ConvModuleSpec,
    pub conv: Conv2d,
    pub bn: Option<BatchNorm2d>,
    pre: Option<Tensor>,
    sig: Option<Tensor>,
}

impl ConvModule {
    pub fn new(spec: ConvModuleSpec, rng: &mut ChaCha8Rng) -> Self {
        Self {
            spec,
            conv: Conv2d::new(
                spec.in_channels,
                spec.out_channels,
                spec.kernel,
                spec.stride,
                spec.padding,
                rng,
            ),
            bn: spec.batch_norm.then(|| BatchNorm2d::new(spec.out_channels)),
            pre: None,
            sig: None,
        }
    }

    fn affine(&self, ch: usize) -> (f64, f64) {
        match &self.bn {
            Some(bn) => (bn.gamma.value[ch], bn.beta.value[ch]),
            None => (1.0, 0.0),
        }
    }

    /// x̂ when batch norm is on, else the raw conv output.
    fn pre_activation_base(&self) -> &Tensor {
        match &self.bn {
            Some(bn) => bn.xhat(),
            None => self
                .pre
                .as_ref()
                .expect("conv module backward before forward"),
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let z = self.conv.forward(x)?;
        match self.bn.as_mut() {
            Some(bn) => {
                bn.normalize(z, mode);
                self.pre = None;
            }
            None => self.pre = Some(z),
        }
        let base = self.pre_activation_base();
        let plane = base.plane();
        let channels = base.channels();
        let mut u = Vec::with_capacity(base.data().len());
        for (i, chunk) in base.data().chunks(plane).enumerate() {
            let (g, b) = self.affine(i % channels);
            u.extend(chunk.iter().map(|v| g * v + b));
        }
        let sig: Vec<f64> = u.iter().map(|&v| sigmoid(v)).collect();
        let mut y = u;
        y.iter_mut().zip(&sig).for_each(|(v, s)| *v *= s);
        let shape = base.shape();
        let y = Tensor::from_vec(shape, y)?;
        let sig = Tensor::from_vec(shape, sig)?;
        self.sig = Some(sig);
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let sig = self
            .sig
            .as_ref()
            .expect("conv module backward before forward");
        let base = self.pre_activation_base();
        let plane = base.plane();
        let channels = base.channels();
        let mut du = Vec::with_capacity(grad.data().len());
        for (i, ((gc, bc), sc)) in grad
            .data()
            .chunks(plane)
            .zip(base.data().chunks(plane))
            .zip(sig.data().chunks(plane))
            .enumerate()
        {
            let (g, b) = self.affine(i % channels);
            // d/du u·σ(u) = σ + u·σ·(1-σ)
            du.extend(gc.iter().zip(bc).zip(sc).map(|((d, v), s)| {
                let u = g * v + b;
                d * (s + u * s * (1.0 - s))
            }));
        }
        let mut du = Tensor::from_vec(grad.shape(), du).expect("gradient matches activation shape");
        if let Some(bn) = self.bn.as_mut() {
            bn.backward_in_place(&mut du);
        }
        self.conv.backward(&du)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.conv.weight];
        if let Some(bn) = self.bn.as_mut() {
            out.extend([
                &mut bn.gamma,
                &mut bn.beta,
                &mut bn.running_mean,
                &mut bn.running_var,
            ]);
        }
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.conv.weight];
        if let Some(bn) = self.bn.as_ref() {
            out.extend([&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]);
        }
        out
    }
}

/// Two pointwise conv modules with a residual connection when widths match.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub cv1: ConvModule,
    pub cv2: ConvModule,
    pub shortcut: bool,
}

impl Bottleneck {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            cv1: ConvModule::new(ConvModuleSpec::pointwise(in_channels, out_channels), rng),
            cv2: ConvModule::new(ConvModuleSpec::pointwise(out_channels, out_channels), rng),
            shortcut: in_channels == out_channels,
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.cv1.forward(x, mode)?;
        let mut y = self.cv2.forward(&h, mode)?;
        if self.shortcut {
            y.add_assign(x);
        }
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let g = self.cv2.backward(grad);
        let mut g = self.cv1.backward(&g);
        if self.shortcut {
            g.add_assign(grad);
        }
        g
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.cv1.params_mut();
        out.extend(self.cv2.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.cv1.params();
        out.extend(self.cv2.params());
        out
    }
}

/// Entry pointwise module, a chain of bottlenecks whose outputs are
/// concatenated with the entry output, and an exit pointwise module.
#[derive(Debug, Clone)]
pub struct C2f {
    pub entry: ConvModule,
    pub blocks: Vec<Bottleneck>,
    pub exit: ConvModule,
    pub hidden: usize,
}

impl C2f {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        bottlenecks: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let hidden = (out_channels / 2).max(1);
        let entry = ConvModule::new(ConvModuleSpec::pointwise(in_channels, hidden), rng);
        let blocks = (0..bottlenecks)
            .map(|_| Bottleneck::new(hidden, hidden, rng))
            .collect();
        let exit = ConvModule::new(
            ConvModuleSpec::pointwise(hidden * (1 + bottlenecks), out_channels),
            rng,
        );
        Self {
            entry,
            blocks,
            exit,
            hidden,
        }
    }

    /// Channel count of the concatenation fed to the exit module.
    pub fn concat_width(&self) -> usize {
        self.hidden * (1 + self.blocks.len())
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut outputs = vec![self.entry.forward(x, mode)?];
        for block in self.blocks.iter_mut() {
            let next = block.forward(outputs.last().expect("entry output"), mode)?;
            outputs.push(next);
        }
        let refs: Vec<&Tensor> = outputs.iter().collect();
        let cat = Tensor::concat_channels(&refs);
        self.exit.forward(&cat, mode)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let g_cat = self.exit.backward(grad);
        let widths = vec![self.hidden; self.blocks.len() + 1];
        let mut chunks = g_cat.split_channels(&widths);
        let mut acc = chunks.pop().expect("at least the entry chunk");
        for block in self.blocks.iter_mut().rev() {
            let mut g = block.backward(&acc);
            g.add_assign(&chunks.pop().expect("one chunk per block"));
            acc = g;
        }
        self.entry.backward(&acc)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.entry.params_mut();
        for b in self.blocks.iter_mut() {
            out.extend(b.params_mut());
        }
        out.extend(self.exit.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.entry.params();
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend(self.exit.params());
        out
    }
}

/// Fully connected layer on (batch, features, 1, 1) tensors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = (0..in_features * out_features)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            in_features,
            out_features,
            weight: Param::new("linear.weight", weight),
            bias: Param::new("linear.bias", vec![0.0; out_features]),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.sample_len() != self.in_features {
            return Err(Error::Shape(format!(
                "linear expects {} features, got {}",
                self.in_features,
                x.sample_len()
            )));
        }
        let n = x.batch();
        let mut out = Tensor::zeros([n, self.out_features, 1, 1]);
        for s in 0..n {
            let xs = x.sample(s);
            let os = out.sample_mut(s);
            for (o, (row, b)) in os.iter_mut().zip(
                self.weight
                    .value
                    .chunks(self.in_features)
                    .zip(&self.bias.value),
            ) {
                *o = b + row.iter().zip(xs).map(|(w, v)| w * v).sum::<f64>();
            }
        }
        self.input = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let x = self.input.as_ref().expect("linear backward before forward");
        let mut grad_in = Tensor::zeros(x.shape());
        for s in 0..x.batch() {
            let xs = x.sample(s);
            let gs = grad_out.sample(s);
            for (o, &g) in gs.iter().enumerate() {
                self.bias.grad[o] += g;
                let row = &mut self.weight.grad[o * self.in_features..(o + 1) * self.in_features];
                for (w, v) in row.iter_mut().zip(xs) {
                    *w += g * v;
                }
            }
            let gi = grad_in.sample_mut(s);
            for (o, &g) in gs.iter().enumerate() {
                let row = &self.weight.value[o * self.in_features..(o + 1) * self.in_features];
                for (d, w) in gi.iter_mut().zip(row) {
                    *d += g * w;
                }
            }
        }
        grad_in
    }
}

pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let [n, c, _, _] = x.shape();
    let plane = x.plane() as f64;
    let mut out = Tensor::zeros([n, c, 1, 1]);
    for s in 0..n {
        for ch in 0..c {
            out.sample_mut(s)[ch] = x.channel(s, ch).iter().sum::<f64>() / plane;
        }
    }
    out
}

pub fn global_avg_pool_backward(grad: &Tensor, shape: [usize; 4]) -> Tensor {
    let [n, c, h, w] = shape;
    let plane = h * w;
    let mut out = Tensor::zeros(shape);
    for s in 0..n {
        let gs = grad.sample(s).to_vec();
        let os = out.sample_mut(s);
        for ch in 0..c {
            let v = gs[ch] / plane as f64;
            os[ch * plane..(ch + 1) * plane]
                .iter_mut()
                .for_each(|o| *o = v);
        }
    }
    out
}

/// Inverted dropout; identity in eval mode or at rate 0.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
    mask: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        Self { rate, mask: None }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Tensor {
        if mode == Mode::Eval || self.rate <= 0.0 {
            self.mask = None;
            return x.clone();
        }
        let keep = 1.0 - self.rate;
        let mask: Vec<f64> = (0..x.data().len())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mut y = x.clone();
        for (v, m) in y.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.mask = Some(mask);
        y
    }

    pub fn backward(&self, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        if let Some(mask) = &self.mask {
            for (v, m) in g.data_mut().iter_mut().zip(mask) {
                *v *= m;
            }
        }
        g
    }
}
