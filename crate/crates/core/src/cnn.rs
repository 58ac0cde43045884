//! 1-D convolutional segmentor trained with hand-written backpropagation.
//!
//! Architecture: `[conv (same padding) -> batch norm -> ReLU] x blocks`, global
//! mean pool over time, then a linear layer to `n_classes` logits. Inputs are
//! standardised per channel with statistics stored in the model.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{derive_seed, Parallelism};
use crate::types::{ProcessedWindow, SegmentId, CHANNELS, PROCESSED_LEN};

pub const MODEL_VERSION: u32 = 1;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

const T: usize = PROCESSED_LEN;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnArch {
    pub widths: Vec<usize>,
    pub kernels: Vec<usize>,
}

impl Default for CnnArch {
    fn default() -> Self {
        Self { widths: vec![64, 128, 1024], kernels: vec![3, 5, 7] }
    }
}

impl CnnArch {
    fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.kernels.len() {
            return Err(Error::Config("CNN needs matching, non-empty widths and kernels".into()));
        }
        if self.widths.contains(&0) || self.kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config("CNN widths must be positive and kernels odd".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            lr0: 1e-3,
            lr_decay: 0.1,
            decay_every: 50,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Step-decayed learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi((epoch / self.decay_every.max(1)) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Training,
    /// Running statistics in batch norm.
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    /// `[c_out][c_in][kernel]`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    pub arch: CnnArch,
    pub n_classes: usize,
    pub input_mean: [f64; CHANNELS],
    pub input_std: [f64; CHANNELS],
    pub blocks: Vec<ConvBlock>,
    /// `[n_classes][last width]`, row-major.
    pub fc_weight: Vec<f64>,
    pub fc_bias: Vec<f64>,
}

/// Gradients in the same layout as the model's trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<BlockGrads>,
    pub fc_weight: Vec<f64>,
    pub fc_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Gradients {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for b in &self.blocks {
            out.extend([&b.weight[..], &b.bias, &b.gamma, &b.beta]);
        }
        out.extend([&self.fc_weight[..], &self.fc_bias]);
        out
    }

    pub fn norm(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).map(|g| g * g).sum::<f64>().sqrt()
    }
}

impl CnnModel {
    /// Fan-in scaled uniform initialisation; batch-norm scale 1, shift 0.
    pub fn init(arch: &CnnArch, n_classes: usize, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(arch, n_classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "cnn-init"));
        for b in &mut m.blocks {
            let bound = 1.0 / ((b.c_in * b.kernel) as f64).sqrt();
            b.weight.iter_mut().chain(b.bias.iter_mut()).for_each(|w| *w = rng.random_range(-bound..bound));
            b.gamma.fill(1.0);
        }
        let bound = 1.0 / (*arch.widths.last().unwrap() as f64).sqrt();
        m.fc_weight.iter_mut().chain(m.fc_bias.iter_mut()).for_each(|w| *w = rng.random_range(-bound..bound));
        Ok(m)
    }

    /// Every parameter zero, running variance 1, identity input scaling.
    pub fn zeros(arch: &CnnArch, n_classes: usize) -> Result<Self> {
        arch.validate()?;
        if n_classes == 0 {
            return Err(Error::Config("CNN needs at least one class".into()));
        }
        let mut c_in = CHANNELS;
        let mut blocks = Vec::new();
        for (&c_out, &kernel) in arch.widths.iter().zip(&arch.kernels) {
            blocks.push(ConvBlock {
                c_in,
                c_out,
                kernel,
                weight: vec![0.0; c_out * c_in * kernel],
                bias: vec![0.0; c_out],
                gamma: vec![0.0; c_out],
                beta: vec![0.0; c_out],
                running_mean: vec![0.0; c_out],
                running_var: vec![1.0; c_out],
            });
            c_in = c_out;
        }
        Ok(Self {
            arch: arch.clone(),
            n_classes,
            input_mean: [0.0; CHANNELS],
            input_std: [1.0; CHANNELS],
            blocks,
            fc_weight: vec![0.0; n_classes * c_in],
            fc_bias: vec![0.0; n_classes],
        })
    }

    /// Trainable parameters in canonical order (matches [`Gradients::slices`]).
    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
            out.push(&mut b.gamma);
            out.push(&mut b.beta);
        }
        out.push(&mut self.fc_weight);
        out.push(&mut self.fc_bias);
        out
    }

    /// Set input standardisation from training windows (std floored to avoid division by zero).
    pub fn fit_normalization(&mut self, windows: &[ProcessedWindow]) {
        let n = (windows.len() * T).max(1) as f64;
        for c in 0..CHANNELS {
            let mean = windows.iter().flat_map(|w| w.0.iter().map(move |r| r[c])).sum::<f64>() / n;
            let var = windows.iter().flat_map(|w| w.0.iter().map(move |r| (r[c] - mean).powi(2))).sum::<f64>() / n;
            self.input_mean[c] = mean;
            self.input_std[c] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
    }

    fn standardize(&self, w: &ProcessedWindow) -> Vec<f64> {
        let mut x = vec![0.0; CHANNELS * T];
        for (t, row) in w.0.iter().enumerate() {
            for c in 0..CHANNELS {
                x[c * T + t] = (row[c] - self.input_mean[c]) / self.input_std[c];
            }
        }
        x
    }

    fn check_finite(&self) -> Result<()> {
        let finite = self.blocks.iter().all(|b| {
            [&b.weight, &b.bias, &b.gamma, &b.beta, &b.running_mean, &b.running_var]
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()))
                && b.running_var.iter().all(|&v| v > 0.0)
        }) && self.fc_weight.iter().chain(&self.fc_bias).all(|x| x.is_finite());
        if finite {
            Ok(())
        } else {
            Err(Error::InvalidInput("CNN parameters are non-finite or running variance is not positive".into()))
        }
    }

    /// Logits for a batch of windows.
    pub fn forward(&self, batch: &[ProcessedWindow], mode: Mode, par: Parallelism) -> Vec<Vec<f64>> {
        self.forward_cached(batch, mode, par).logits
    }

    pub fn predict(&self, w: &ProcessedWindow) -> SegmentId {
        SegmentId::from_index(argmax(&self.forward(std::slice::from_ref(w), Mode::Inference, Parallelism::Sequential)[0]))
    }

    pub fn predict_batch(&self, batch: &[ProcessedWindow], par: Parallelism) -> Vec<SegmentId> {
        // Inference has no cross-item coupling, so evaluate per item for bounded memory.
        par.map(batch, |w| self.predict(w))
    }

    fn forward_cached(&self, batch: &[ProcessedWindow], mode: Mode, par: Parallelism) -> Cache {
        let mut x: Vec<Vec<f64>> = par.map(batch, |w| self.standardize(w));
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let y: Vec<Vec<f64>> = par.map(&x, |xi| conv_forward(b, xi));
            let (mean, var) = match mode {
                Mode::Training => batch_moments(&y, b.c_out),
                Mode::Inference => (b.running_mean.clone(), b.running_var.clone()),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let xhat: Vec<Vec<f64>> = par.map(&y, |yi| {
                let mut out = yi.clone();
                for c in 0..b.c_out {
                    out[c * T..(c + 1) * T].iter_mut().for_each(|v| *v = (*v - mean[c]) * inv_std[c]);
                }
                out
            });
            let act: Vec<Vec<f64>> = par.map(&xhat, |xh| {
                let mut out = xh.clone();
                for c in 0..b.c_out {
                    out[c * T..(c + 1) * T].iter_mut().for_each(|v| *v = (b.gamma[c] * *v + b.beta[c]).max(0.0));
                }
                out
            });
            let input = std::mem::replace(&mut x, act);
            blocks.push(BlockCache { input, xhat, mean, var, inv_std });
        }
        let width = *self.arch.widths.last().unwrap();
        let pooled: Vec<Vec<f64>> =
            par.map(&x, |a| (0..width).map(|c| a[c * T..(c + 1) * T].iter().sum::<f64>() / T as f64).collect());
        let logits = par.map(&pooled, |p| {
            (0..self.n_classes)
                .map(|n| {
                    self.fc_bias[n] + self.fc_weight[n * width..(n + 1) * width].iter().zip(p).map(|(w, v)| w * v).sum::<f64>()
                })
                .collect()
        });
        Cache { blocks, last: x, pooled, logits }
    }

    /// Mean cross-entropy over the batch.
    pub fn batch_loss(&self, batch: &[ProcessedWindow], labels: &[SegmentId], mode: Mode, par: Parallelism) -> f64 {
        let logits = self.forward(batch, mode, par);
        logits.iter().zip(labels).map(|(z, y)| loss(z, *y)).sum::<f64>() / batch.len().max(1) as f64
    }

    /// Mean-loss gradients in training mode. Updates batch-norm running statistics.
    pub fn gradients(
        &mut self,
        batch: &[ProcessedWindow],
        labels: &[SegmentId],
        par: Parallelism,
    ) -> Result<(f64, Gradients)> {
        if batch.is_empty() || batch.len() != labels.len() {
            return Err(Error::Shape { expected: format!("{} labels", batch.len()), actual: labels.len().to_string() });
        }
        if let Some(bad) = labels.iter().find(|s| s.get() as usize > self.n_classes) {
            return Err(Error::InvalidInput(format!("label {bad} exceeds {} classes", self.n_classes)));
        }
        let cache = self.forward_cached(batch, Mode::Training, par);
        let bsz = batch.len() as f64;
        let loss_value = cache.logits.iter().zip(labels).map(|(z, y)| loss(z, *y)).sum::<f64>() / bsz;
        if !loss_value.is_finite() {
            return Err(Error::Diverged { epoch: 0, batch: 0, loss: loss_value });
        }
        let grads = self.backward(&cache, labels, par);

        let n = (batch.len() * T) as f64;
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks) {
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for ch in 0..b.c_out {
                b.running_mean[ch] = (1.0 - BN_MOMENTUM) * b.running_mean[ch] + BN_MOMENTUM * c.mean[ch];
                b.running_var[ch] = (1.0 - BN_MOMENTUM) * b.running_var[ch] + BN_MOMENTUM * c.var[ch] * unbias;
            }
        }
        Ok((loss_value, grads))
    }

    fn backward(&self, cache: &Cache, labels: &[SegmentId], par: Parallelism) -> Gradients {
        let bsz = labels.len();
        let width = *self.arch.widths.last().unwrap();
        let nc = self.n_classes;
        let dlogits: Vec<Vec<f64>> = cache
            .logits
            .iter()
            .zip(labels)
            .map(|(z, y)| {
                let mut p = softmax(z);
                p[y.index()] -= 1.0;
                p.iter_mut().for_each(|v| *v /= bsz as f64);
                p
            })
            .collect();
        let mut fc_weight = vec![0.0; nc * width];
        let mut fc_bias = vec![0.0; nc];
        for (dz, p) in dlogits.iter().zip(&cache.pooled) {
            for n in 0..nc {
                fc_bias[n] += dz[n];
                fc_weight[n * width..(n + 1) * width].iter_mut().zip(p).for_each(|(g, v)| *g += dz[n] * v);
            }
        }
        // Gradient w.r.t. the last block's activations (mean pool spreads evenly over time).
        let mut dact: Vec<Vec<f64>> = par.map_range(bsz, |i| {
            let mut d = vec![0.0; width * T];
            for c in 0..width {
                let g: f64 = (0..nc).map(|n| self.fc_weight[n * width + c] * dlogits[i][n]).sum::<f64>() / T as f64;
                let a = &cache.last[i][c * T..(c + 1) * T];
                for t in 0..T {
                    d[c * T + t] = if a[t] > 0.0 { g } else { 0.0 };
                }
            }
            d
        });

        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (bi, (b, c)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            // dact holds dL/d(pre-ReLU affine output) at this point.
            let mut dgamma = vec![0.0; b.c_out];
            let mut dbeta = vec![0.0; b.c_out];
            for (d, xh) in dact.iter().zip(&c.xhat) {
                for ch in 0..b.c_out {
                    let (ds, xs) = (&d[ch * T..(ch + 1) * T], &xh[ch * T..(ch + 1) * T]);
                    dbeta[ch] += ds.iter().sum::<f64>();
                    dgamma[ch] += ds.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            let n = (bsz * T) as f64;
            let dy: Vec<Vec<f64>> = par.map_range(bsz, |i| {
                let mut out = vec![0.0; b.c_out * T];
                for ch in 0..b.c_out {
                    let k = b.gamma[ch] * c.inv_std[ch] / n;
                    for t in 0..T {
                        let j = ch * T + t;
                        out[j] = k * (n * dact[i][j] - dbeta[ch] - c.xhat[i][j] * dgamma[ch]);
                    }
                }
                out
            });
            let (dweight, dbias) = conv_weight_grad(b, &c.input, &dy, par);
            if bi > 0 {
                dact = par.map_range(bsz, |i| {
                    let mut dx = conv_input_grad(b, &dy[i]);
                    // Through the previous block's ReLU.
                    let act = &c.input[i];
                    dx.iter_mut().zip(act).for_each(|(g, a)| {
                        if *a <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    dx
                });
            }
            block_grads.push(BlockGrads { weight: dweight, bias: dbias, gamma: dgamma, beta: dbeta });
        }
        block_grads.reverse();
        Gradients { blocks: block_grads, fc_weight, fc_bias }
    }

    pub fn to_file(&self) -> CnnFile {
        let mut tensors = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let push = |tensors: &mut Vec<NamedTensor>, name: String, shape: Vec<usize>, v: &Vec<f64>| {
                tensors.push(NamedTensor { name, shape, values: v.clone() })
            };
            push(&mut tensors, format!("conv{i}.weight"), vec![b.c_out, b.c_in, b.kernel], &b.weight);
            push(&mut tensors, format!("conv{i}.bias"), vec![b.c_out], &b.bias);
            push(&mut tensors, format!("bn{i}.gamma"), vec![b.c_out], &b.gamma);
            push(&mut tensors, format!("bn{i}.beta"), vec![b.c_out], &b.beta);
            push(&mut tensors, format!("bn{i}.running_mean"), vec![b.c_out], &b.running_mean);
            push(&mut tensors, format!("bn{i}.running_var"), vec![b.c_out], &b.running_var);
        }
        let width = *self.arch.widths.last().unwrap();
        tensors.push(NamedTensor { name: "fc.weight".into(), shape: vec![self.n_classes, width], values: self.fc_weight.clone() });
        tensors.push(NamedTensor { name: "fc.bias".into(), shape: vec![self.n_classes], values: self.fc_bias.clone() });
        CnnFile {
            version: MODEL_VERSION,
            arch: self.arch.clone(),
            n_classes: self.n_classes,
            input_mean: self.input_mean,
            input_std: self.input_std,
            tensors,
        }
    }

    pub fn from_file(f: &CnnFile) -> Result<Self> {
        if f.version > MODEL_VERSION {
            return Err(Error::Version { path: "<cnn>".into(), found: f.version, supported: MODEL_VERSION });
        }
        let mut m = Self::zeros(&f.arch, f.n_classes)?;
        m.input_mean = f.input_mean;
        m.input_std = f.input_std;
        let take = |name: &str, dst: &mut Vec<f64>| -> Result<()> {
            let t = f
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::InvalidInput(format!("CNN file lacks tensor {name}")))?;
            if t.values.len() != dst.len() || t.shape.iter().product::<usize>() != dst.len() {
                return Err(Error::Shape { expected: format!("{} values in {name}", dst.len()), actual: t.values.len().to_string() });
            }
            dst.copy_from_slice(&t.values);
            Ok(())
        };
        for (i, b) in m.blocks.iter_mut().enumerate() {
            take(&format!("conv{i}.weight"), &mut b.weight)?;
            take(&format!("conv{i}.bias"), &mut b.bias)?;
            take(&format!("bn{i}.gamma"), &mut b.gamma)?;
            take(&format!("bn{i}.beta"), &mut b.beta)?;
            take(&format!("bn{i}.running_mean"), &mut b.running_mean)?;
            take(&format!("bn{i}.running_var"), &mut b.running_var)?;
        }
        take("fc.weight", &mut m.fc_weight)?;
        take("fc.bias", &mut m.fc_bias)?;
        m.check_finite()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(&self.to_file()).map_err(|e| Error::parse("<cnn>", e))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: CnnFile = serde_json::from_str(s).map_err(|e| Error::parse("<cnn>", e))?;
        Self::from_file(&f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Serialised CNN: architecture, input scaling and named row-major tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnFile {
    pub version: u32,
    pub arch: CnnArch,
    pub n_classes: usize,
    pub input_mean: [f64; CHANNELS],
    pub input_std: [f64; CHANNELS],
    pub tensors: Vec<NamedTensor>,
}

struct BlockCache {
    input: Vec<Vec<f64>>,
    xhat: Vec<Vec<f64>>,
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
}

struct Cache {
    blocks: Vec<BlockCache>,
    last: Vec<Vec<f64>>,
    pooled: Vec<Vec<f64>>,
    logits: Vec<Vec<f64>>,
}

/// Valid output range for a kernel tap at offset `shift`.
fn tap_range(shift: isize) -> std::ops::Range<usize> {
    let lo = (-shift).max(0) as usize;
    let hi = (T as isize - shift).min(T as isize).max(0) as usize;
    lo..hi
}

fn conv_forward(b: &ConvBlock, x: &[f64]) -> Vec<f64> {
    let pad = (b.kernel / 2) as isize;
    let mut y = vec![0.0; b.c_out * T];
    for o in 0..b.c_out {
        let out = &mut y[o * T..(o + 1) * T];
        out.fill(b.bias[o]);
        for i in 0..b.c_in {
            let xi = &x[i * T..(i + 1) * T];
            for k in 0..b.kernel {
                let w = b.weight[(o * b.c_in + i) * b.kernel + k];
                let shift = k as isize - pad;
                for t in tap_range(shift) {
                    out[t] += w * xi[(t as isize + shift) as usize];
                }
            }
        }
    }
    y
}

/// Per-channel mean and biased variance over batch and time.
fn batch_moments(y: &[Vec<f64>], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (y.len() * T) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        mean[c] = y.iter().map(|yi| yi[c * T..(c + 1) * T].iter().sum::<f64>()).sum::<f64>() / n;
        var[c] = y
            .iter()
            .map(|yi| yi[c * T..(c + 1) * T].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n;
    }
    (mean, var)
}

/// Weight and bias gradients; parallel over output channels, fixed batch order inside.
fn conv_weight_grad(b: &ConvBlock, x: &[Vec<f64>], dy: &[Vec<f64>], par: Parallelism) -> (Vec<f64>, Vec<f64>) {
    let pad = (b.kernel / 2) as isize;
    let rows: Vec<(Vec<f64>, f64)> = par.map_range(b.c_out, |o| {
        let mut gw = vec![0.0; b.c_in * b.kernel];
        let mut gb = 0.0;
        for (xi, di) in x.iter().zip(dy) {
            let d = &di[o * T..(o + 1) * T];
            gb += d.iter().sum::<f64>();
            for i in 0..b.c_in {
                let xs = &xi[i * T..(i + 1) * T];
                for k in 0..b.kernel {
                    let shift = k as isize - pad;
                    let mut acc = 0.0;
                    for t in tap_range(shift) {
                        acc += d[t] * xs[(t as isize + shift) as usize];
                    }
                    gw[i * b.kernel + k] += acc;
                }
            }
        }
        (gw, gb)
    });
    let mut weight = Vec::with_capacity(b.weight.len());
    let mut bias = Vec::with_capacity(b.c_out);
    for (gw, gb) in rows {
        weight.extend(gw);
        bias.push(gb);
    }
    (weight, bias)
}

fn conv_input_grad(b: &ConvBlock, dy: &[f64]) -> Vec<f64> {
    let pad = (b.kernel / 2) as isize;
    let mut dx = vec![0.0; b.c_in * T];
    for o in 0..b.c_out {
        let d = &dy[o * T..(o + 1) * T];
        for i in 0..b.c_in {
            let dxi = &mut dx[i * T..(i + 1) * T];
            for k in 0..b.kernel {
                let w = b.weight[(o * b.c_in + i) * b.kernel + k];
                let shift = k as isize - pad;
                for t in tap_range(shift) {
                    dxi[(t as isize + shift) as usize] += w * d[t];
                }
            }
        }
    }
    dx
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Cross-entropy of one logits row against a 1-based label, via log-sum-exp.
pub fn loss(logits: &[f64], label: SegmentId) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[label.index()]
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u32,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(shapes: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model(model: &mut CnnModel, cfg: &TrainConfig) -> Self {
        let shapes: Vec<usize> = model.params_mut().iter().map(|p| p.len()).collect();
        Self::new(&shapes, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    /// One bias-corrected update.
    pub fn update(&mut self, params: &mut [&mut Vec<f64>], grads: &[&[f64]], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (j, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[j], &mut self.v[j]);
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Free-function form of [`Adam::update`].
pub fn adam_step(params: &mut [&mut Vec<f64>], grads: &[&[f64]], state: &mut Adam, lr: f64) {
    state.update(params, grads, lr);
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CnnModel,
    /// Checkpoint with the best validation accuracy (earliest on ties), when validation data was given.
    pub best: Option<CnnModel>,
    pub log: Vec<EpochLog>,
}

pub struct LabeledWindows<'a> {
    pub windows: &'a [ProcessedWindow],
    pub labels: &'a [SegmentId],
}

pub fn accuracy(model: &CnnModel, data: &LabeledWindows, par: Parallelism) -> f64 {
    let pred = model.predict_batch(data.windows, par);
    pred.iter().zip(data.labels).filter(|(a, b)| a == b).count() as f64 / data.labels.len().max(1) as f64
}

pub fn train(
    train: &LabeledWindows,
    val: Option<&LabeledWindows>,
    n_classes: usize,
    arch: &CnnArch,
    cfg: &TrainConfig,
    par: Parallelism,
) -> Result<TrainOutcome> {
    if train.windows.len() != train.labels.len() {
        return Err(Error::Shape {
            expected: format!("{} labels", train.windows.len()),
            actual: train.labels.len().to_string(),
        });
    }
    if !(cfg.lr0 > 0.0) || cfg.batch_size == 0 {
        return Err(Error::Config("CNN training needs lr0 > 0 and batch_size >= 1".into()));
    }
    let mut model = CnnModel::init(arch, n_classes, cfg.seed)?;
    model.fit_normalization(train.windows);
    let mut adam = Adam::for_model(&mut model, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "cnn-shuffle"));
    let mut order: Vec<usize> = (0..train.windows.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, CnnModel)> = None;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let xb: Vec<ProcessedWindow> = idx.iter().map(|&i| train.windows[i]).collect();
            let yb: Vec<SegmentId> = idx.iter().map(|&i| train.labels[i]).collect();
            let logits = model.forward(&xb, Mode::Training, par);
            correct += logits.iter().zip(&yb).filter(|(z, y)| argmax(z) == y.index()).count();
            let (l, g) = model.gradients(&xb, &yb, par).map_err(|e| match e {
                Error::Diverged { loss, .. } => Error::Diverged { epoch, batch: bi, loss },
                other => other,
            })?;
            loss_sum += l * idx.len() as f64;
            let grads = g.slices();
            adam.update(&mut model.params_mut(), &grads, lr);
        }
        let n = train.windows.len().max(1) as f64;
        let val_acc = val.map(|v| accuracy(&model, v, par));
        if let Some(acc) = val_acc {
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, model.clone()));
            }
        }
        log.push(EpochLog { epoch, lr, train_loss: loss_sum / n, train_acc: correct as f64 / n, val_acc });
    }
    Ok(TrainOutcome { model, best: best.map(|(_, m)| m), log })
}

/// Training log as CSV `epoch,lr,train_loss,train_acc,val_acc` (empty `val_acc` without validation).
pub fn write_log_csv<W: Write>(log: &[EpochLog], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::parse("<training log>", e);
    w.write_record(["epoch", "lr", "train_loss", "train_acc", "val_acc"]).map_err(err)?;
    for e in log {
        w.write_record([
            e.epoch.to_string(),
            e.lr.to_string(),
            e.train_loss.to_string(),
            e.train_acc.to_string(),
            e.val_acc.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("<training log>", e))
}
