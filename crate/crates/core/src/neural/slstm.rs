//! The parallel short/long stream network.
//!
//! Two architecturally identical stacked LSTM encoders read a 7-day and a
//! 28-day window. The short embedding is scaled by a learnable scalar and
//! concatenated with the long embedding; one linear head per quantile level
//! maps the fused vector to a forecast over the horizon.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{check_levels, quantile_loss_grad};
use super::lstm::{Activation, DenseParams, StackCache, StackParams};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

pub const SHORT_WINDOW: usize = 7;
pub const LONG_WINDOW: usize = 28;

/// Network shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlstmConfig {
    pub input_dim: usize,
    pub lstm_widths: Vec<usize>,
    pub dense_width: usize,
    pub horizon: usize,
    pub n_quantiles: usize,
}

impl SlstmConfig {
    /// Full-size network: LSTM widths 256/128/128/128, 64-wide projections.
    pub fn standard(horizon: usize, n_quantiles: usize) -> Self {
        SlstmConfig {
            input_dim: 3,
            lstm_widths: vec![256, 128, 128, 128],
            dense_width: 64,
            horizon,
            n_quantiles,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.dense_width == 0 || self.horizon == 0 || self.n_quantiles == 0 {
            return Err(Error::Invalid(format!("degenerate network shape {self:?}")));
        }
        if self.lstm_widths.is_empty() || self.lstm_widths.contains(&0) {
            return Err(Error::Invalid(format!("bad LSTM widths {:?}", self.lstm_widths)));
        }
        Ok(())
    }
}

/// All trainable weights of one ensemble member.
///
/// The quantile heads are packed into one dense layer of width
/// `n_quantiles · horizon`: head `q` owns columns `q·horizon .. (q+1)·horizon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlstmParams {
    pub config: SlstmConfig,
    pub short: StackParams,
    pub long: StackParams,
    pub fusion_weight: f64,
    pub heads: DenseParams,
}

/// One training or inference example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[7 × channels]`
    pub x_short: Tensor2,
    /// `[28 × channels]`
    pub x_long: Tensor2,
    /// Scaled targets over the member's horizon; empty for inference.
    pub target: Vec<f64>,
}

pub(crate) struct SlstmCache {
    batch: usize,
    short: StackCache,
    long: StackCache,
    fused: Vec<f64>,
    pub output: Vec<f64>,
}

impl SlstmParams {
    pub fn zeros(config: SlstmConfig) -> Self {
        let width = 2 * config.dense_width;
        SlstmParams {
            short: StackParams::zeros(config.input_dim, &config.lstm_widths, config.dense_width),
            long: StackParams::zeros(config.input_dim, &config.lstm_widths, config.dense_width),
            fusion_weight: 0.0,
            heads: DenseParams::zeros(width, config.horizon * config.n_quantiles, Activation::Identity),
            config,
        }
    }

    /// Uniform fan-in initialization with zero biases and a fusion weight of 1.
    pub fn init<R: Rng>(config: SlstmConfig, rng: &mut R) -> Self {
        let width = 2 * config.dense_width;
        SlstmParams {
            short: StackParams::init(config.input_dim, &config.lstm_widths, config.dense_width, rng),
            long: StackParams::init(config.input_dim, &config.lstm_widths, config.dense_width, rng),
            fusion_weight: 1.0,
            heads: DenseParams::init(width, config.horizon * config.n_quantiles, Activation::Identity, rng),
            config,
        }
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn n_quantiles(&self) -> usize {
        self.config.n_quantiles
    }

    /// Forecast for one example: `[horizon × n_quantiles]`, column `q` from
    /// head `q`. Quantile crossing is not corrected here.
    pub fn forward(&self, x_short: &Tensor2, x_long: &Tensor2) -> Result<Tensor2> {
        let sample = Sample {
            x_short: x_short.clone(),
            x_long: x_long.clone(),
            target: Vec::new(),
        };
        self.check_sample(&sample, false)?;
        let out = self.forward_batch(std::slice::from_ref(&sample)).output;
        Ok(self.unpack(&out))
    }

    /// Predict every sample; one `[horizon × n_quantiles]` matrix each.
    pub fn predict(&self, samples: &[Sample]) -> Result<Vec<Tensor2>> {
        for s in samples {
            self.check_sample(s, false)?;
        }
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(256) {
            let flat = self.forward_batch(chunk).output;
            let width = self.horizon() * self.n_quantiles();
            out.extend(flat.chunks_exact(width).map(|row| self.unpack(row)));
        }
        Ok(out)
    }

    fn unpack(&self, row: &[f64]) -> Tensor2 {
        let (h, q) = (self.horizon(), self.n_quantiles());
        let mut t = Tensor2::zeros(h, q);
        for qi in 0..q {
            for k in 0..h {
                t.set(k, qi, row[qi * h + k]);
            }
        }
        t
    }

    pub(crate) fn check_sample(&self, s: &Sample, with_target: bool) -> Result<()> {
        let c = self.config.input_dim;
        if s.x_short.cols() != c || s.x_long.cols() != c {
            return Err(Error::Shape(format!(
                "inputs have {}/{} channels, network expects {c}",
                s.x_short.cols(),
                s.x_long.cols()
            )));
        }
        if s.x_short.rows() == 0 || s.x_long.rows() == 0 {
            return Err(Error::Shape("empty input window".into()));
        }
        if with_target && s.target.len() != self.horizon() {
            return Err(Error::Shape(format!(
                "target of length {} for horizon {}",
                s.target.len(),
                self.horizon()
            )));
        }
        Ok(())
    }

    fn gather(samples: &[Sample], long: bool) -> Vec<Vec<f64>> {
        fn pick(s: &Sample, long: bool) -> &Tensor2 {
            if long {
                &s.x_long
            } else {
                &s.x_short
            }
        }
        let steps = pick(&samples[0], long).rows();
        (0..steps)
            .map(|t| samples.iter().flat_map(|s| pick(s, long).row(t).iter().copied()).collect())
            .collect()
    }

    /// Batched forward. All samples must share window lengths.
    pub(crate) fn forward_batch(&self, samples: &[Sample]) -> SlstmCache {
        let batch = samples.len();
        let short = self.short.forward_batch(&Self::gather(samples, false), batch);
        let long = self.long.forward_batch(&Self::gather(samples, true), batch);
        let p = self.config.dense_width;
        let mut fused = vec![0.0; batch * 2 * p];
        for b in 0..batch {
            let row = &mut fused[b * 2 * p..(b + 1) * 2 * p];
            for j in 0..p {
                row[j] = self.fusion_weight * short.output[b * p + j];
                row[p + j] = long.output[b * p + j];
            }
        }
        let output = self.heads.forward(&fused, batch);
        SlstmCache {
            batch,
            short,
            long,
            fused,
            output,
        }
    }

    /// Backpropagate `d_output` (`[batch × horizon·n_quantiles]`, head-major)
    /// into `grads`.
    pub(crate) fn backward_batch(&self, cache: &SlstmCache, d_output: &[f64], grads: &mut SlstmParams) {
        let batch = cache.batch;
        let p = self.config.dense_width;
        let d_fused = self
            .heads
            .backward(&cache.fused, &cache.output, d_output, batch, &mut grads.heads);
        let mut d_short = vec![0.0; batch * p];
        let mut d_long = vec![0.0; batch * p];
        for b in 0..batch {
            for j in 0..p {
                let ds = d_fused[b * 2 * p + j];
                grads.fusion_weight += ds * cache.short.output[b * p + j];
                d_short[b * p + j] = self.fusion_weight * ds;
                d_long[b * p + j] = d_fused[b * 2 * p + p + j];
            }
        }
        self.short.backward_batch(&cache.short, &d_short, batch, &mut grads.short);
        self.long.backward_batch(&cache.long, &d_long, batch, &mut grads.long);
    }

    /// Mean quantile loss over the batch and its gradient with respect to
    /// every parameter, accumulated into `grads`.
    pub fn loss_and_gradient(&self, samples: &[Sample], levels: &[f64], grads: &mut SlstmParams) -> Result<f64> {
        check_levels(levels)?;
        if levels.len() != self.n_quantiles() {
            return Err(Error::Shape(format!(
                "{} levels for {} heads",
                levels.len(),
                self.n_quantiles()
            )));
        }
        if samples.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        for s in samples {
            self.check_sample(s, true)?;
        }
        let cache = self.forward_batch(samples);
        let (loss, d_out) = batch_loss_grad(&cache.output, samples, levels, self.horizon());
        self.backward_batch(&cache, &d_out, grads);
        Ok(loss)
    }

    /// Mean quantile loss without gradients.
    pub fn loss(&self, samples: &[Sample], levels: &[f64]) -> Result<f64> {
        check_levels(levels)?;
        let mut total = 0.0;
        for chunk in samples.chunks(256) {
            for s in chunk {
                self.check_sample(s, true)?;
            }
            let out = self.forward_batch(chunk).output;
            total += batch_loss_grad(&out, chunk, levels, self.horizon()).0 * chunk.len() as f64;
        }
        Ok(total / samples.len() as f64)
    }

    /// Named views of every parameter tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        push_stack(&mut out, "short", &self.short);
        push_stack(&mut out, "long", &self.long);
        out.push(("fusion_weight".into(), std::slice::from_ref(&self.fusion_weight)));
        out.push(("heads.weight".into(), self.heads.weight.data()));
        out.push(("heads.bias".into(), &self.heads.bias));
        out
    }

    /// Mutable views in the same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for stack in [&mut self.short, &mut self.long] {
            for l in &mut stack.layers {
                out.push(l.w_input.data_mut());
                out.push(l.w_recurrent.data_mut());
                out.push(&mut l.bias);
            }
            out.push(stack.projection.weight.data_mut());
            out.push(&mut stack.projection.bias);
        }
        out.push(std::slice::from_mut(&mut self.fusion_weight));
        out.push(self.heads.weight.data_mut());
        out.push(&mut self.heads.bias);
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

fn push_stack<'a>(out: &mut Vec<(String, &'a [f64])>, name: &str, stack: &'a StackParams) {
    for (i, l) in stack.layers.iter().enumerate() {
        out.push((format!("{name}.lstm{i}.w_input"), l.w_input.data()));
        out.push((format!("{name}.lstm{i}.w_recurrent"), l.w_recurrent.data()));
        out.push((format!("{name}.lstm{i}.bias"), &l.bias));
    }
    out.push((format!("{name}.projection.weight"), stack.projection.weight.data()));
    out.push((format!("{name}.projection.bias"), &stack.projection.bias));
}

/// Loss averaged over samples, quantiles and horizon steps, and its gradient
/// with respect to the packed network output.
fn batch_loss_grad(output: &[f64], samples: &[Sample], levels: &[f64], horizon: usize) -> (f64, Vec<f64>) {
    let nq = levels.len();
    let width = nq * horizon;
    let norm = (samples.len() * width) as f64;
    let mut grad = vec![0.0; output.len()];
    let mut loss = 0.0;
    for (b, s) in samples.iter().enumerate() {
        for (qi, &q) in levels.iter().enumerate() {
            for k in 0..horizon {
                let idx = b * width + qi * horizon + k;
                let (l, g) = quantile_loss_grad(s.target[k], output[idx], q);
                loss += l;
                grad[idx] = g / norm;
            }
        }
    }
    (loss / norm, grad)
}
