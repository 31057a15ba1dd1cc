//! Convolutional Block Attention Module.
//!
//! Channel attention gates each channel with
//! `Mc = σ(MLP(avgpool(F)) + MLP(maxpool(F)))`, where the two-layer MLP
//! `C → max(1, ⌊C/r⌋) → C` (ReLU in between) is shared by both pooled
//! descriptors. Spatial attention gates each location with
//! `Ms = σ(conv_k([mean_c(F); max_c(F)]))`, a single `2 → 1` convolution
//! padded to keep the spatial size. The block applies both in sequence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::activation::{relu, relu_backward, sigmoid, sigmoid_backward};
use crate::nn::{Conv2d, ConvGrads, Linear, LinearGrads};
use crate::par;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CbamOrder {
    #[default]
    CamThenSam,
    SamThenCam,
}

pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

/// Shared-MLP channel gate.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct CamCache {
    input: Tensor,
    /// `[2N, C]`: average descriptors stacked over max descriptors.
    descriptors: Tensor,
    max_indices: Vec<usize>,
    hidden_pre: Tensor,
    hidden: Tensor,
    gate: Tensor,
}

#[derive(Debug, Clone)]
pub struct CamGrads {
    pub fc1: LinearGrads,
    pub fc2: LinearGrads,
}

/// `out[n, c, ·] = x[n, c, ·] · gate[n, c]`
fn scale_channels(x: &Tensor, gate: &[f64]) -> Tensor {
    let [_, _, h, w] = x.dims4().expect("4-d");
    let plane = h * w;
    let mut out = x.clone();
    par::for_each_chunk_mut(out.data_mut(), plane, |p, v| {
        let g = gate[p];
        v.iter_mut().for_each(|e| *e *= g);
    });
    out
}

/// `out[n, c, i] = x[n, c, i] · gate[n, i]`
fn scale_locations(x: &Tensor, gate: &[f64]) -> Tensor {
    let [_, c, h, w] = x.dims4().expect("4-d");
    let plane = h * w;
    let mut out = x.clone();
    par::for_each_chunk_mut(out.data_mut(), plane, |p, v| {
        let g = &gate[(p / c) * plane..(p / c + 1) * plane];
        v.iter_mut().zip(g).for_each(|(e, g)| *e *= g);
    });
    out
}

impl ChannelAttention {
    pub fn new<R: Rng>(channels: usize, reduction: usize, rng: &mut R) -> Self {
        let hidden = hidden_width(channels, reduction);
        Self {
            fc1: Linear::new(channels, hidden, rng),
            fc2: Linear::new(hidden, channels, rng),
        }
    }

    pub fn zeros(channels: usize, reduction: usize) -> Self {
        let hidden = hidden_width(channels, reduction);
        Self {
            fc1: Linear::zeros(channels, hidden),
            fc2: Linear::zeros(hidden, channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.fc1.in_features()
    }

    /// Returns `(Mc [N, C, 1, 1], refined, cache)`.
    pub fn forward(&self, f: &Tensor) -> Result<(Tensor, Tensor, CamCache)> {
        let [n, c, h, w] = f.dims4()?;
        if c != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "channel attention over {} channels got input {:?}",
                self.channels(),
                f.shape()
            )));
        }
        let plane = (h * w) as f64;
        let mut desc = Vec::with_capacity(2 * n * c);
        let mut max_indices = Vec::with_capacity(n * c);
        for p in f.data().chunks(h * w) {
            desc.push(p.iter().sum::<f64>() / plane);
        }
        for (i, p) in f.data().chunks(h * w).enumerate() {
            let mut best = 0;
            for (j, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = j;
                }
            }
            desc.push(p[best]);
            max_indices.push(i * h * w + best);
        }
        let descriptors = Tensor::new(vec![2 * n, c], desc);
        let hidden_pre = self.fc1.forward(&descriptors)?;
        let hidden = relu(&hidden_pre);
        let out = self.fc2.forward(&hidden)?;
        let (avg, max) = out.data().split_at(n * c);
        let logits = Tensor::new(vec![n, c, 1, 1], avg.iter().zip(max).map(|(a, b)| a + b).collect());
        let gate = sigmoid(&logits);
        let refined = scale_channels(f, gate.data());
        let cache = CamCache {
            input: f.clone(),
            descriptors,
            max_indices,
            hidden_pre,
            hidden,
            gate: gate.clone(),
        };
        Ok((gate, refined, cache))
    }

    pub fn backward(&self, cache: &CamCache, d_refined: &Tensor) -> Result<(Tensor, CamGrads)> {
        let f = &cache.input;
        let [n, c, h, w] = f.dims4()?;
        let plane = h * w;
        let gate = cache.gate.data();

        let d_gate: Vec<f64> = d_refined
            .data()
            .chunks(plane)
            .zip(f.data().chunks(plane))
            .map(|(g, x)| g.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        let d_logits = sigmoid_backward(&cache.gate, &Tensor::new(vec![n, c, 1, 1], d_gate));
        // both MLP branches see the same upstream gradient
        let mut d_out = d_logits.data().to_vec();
        d_out.extend_from_slice(d_logits.data());
        let d_out = Tensor::new(vec![2 * n, c], d_out);

        let (d_hidden, fc2) = self.fc2.backward(&cache.hidden, &d_out)?;
        let d_hidden_pre = relu_backward(&cache.hidden_pre, &d_hidden);
        let (d_desc, fc1) = self.fc1.backward(&cache.descriptors, &d_hidden_pre)?;
        let (d_avg, d_max) = d_desc.data().split_at(n * c);

        let mut df = scale_channels(d_refined, gate);
        let dfd = df.data_mut();
        for (p, chunk) in dfd.chunks_mut(plane).enumerate() {
            let share = d_avg[p] / plane as f64;
            chunk.iter_mut().for_each(|v| *v += share);
        }
        for (&i, &g) in cache.max_indices.iter().zip(d_max) {
            dfd[i] += g;
        }
        Ok((df, CamGrads { fc1, fc2 }))
    }
}

/// Convolutional spatial gate.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

#[derive(Debug, Clone)]
pub struct SamCache {
    input: Tensor,
    pooled: Tensor,
    max_channel: Vec<usize>,
    gate: Tensor,
}

impl SpatialAttention {
    pub fn new<R: Rng>(kernel: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(2, 1, kernel, 1, kernel / 2, rng),
        }
    }

    pub fn zeros(kernel: usize) -> Self {
        Self {
            conv: Conv2d::zeros(2, 1, kernel, 1, kernel / 2),
        }
    }

    /// Returns `(Ms [N, 1, H, W], refined, cache)`.
    pub fn forward(&self, f: &Tensor) -> Result<(Tensor, Tensor, SamCache)> {
        let [n, c, h, w] = f.dims4()?;
        if self.conv.kernel().is_multiple_of(2) {
            return Err(Error::ShapeMismatch(format!(
                "spatial attention kernel {} must be odd to preserve the spatial size",
                self.conv.kernel()
            )));
        }
        let plane = h * w;
        let fd = f.data();
        let mut pooled = vec![0.0; n * 2 * plane];
        let mut max_channel = vec![0usize; n * plane];
        for s in 0..n {
            let sample = &fd[s * c * plane..(s + 1) * c * plane];
            for i in 0..plane {
                let mut sum = 0.0;
                let mut best = 0;
                for ch in 0..c {
                    let v = sample[ch * plane + i];
                    sum += v;
                    if v > sample[best * plane + i] {
                        best = ch;
                    }
                }
                pooled[s * 2 * plane + i] = sum / c as f64;
                pooled[s * 2 * plane + plane + i] = sample[best * plane + i];
                max_channel[s * plane + i] = best;
            }
        }
        let pooled = Tensor::new(vec![n, 2, h, w], pooled);
        let gate = sigmoid(&self.conv.forward(&pooled)?);
        let refined = scale_locations(f, gate.data());
        let cache = SamCache {
            input: f.clone(),
            pooled,
            max_channel,
            gate: gate.clone(),
        };
        Ok((gate, refined, cache))
    }

    pub fn backward(&self, cache: &SamCache, d_refined: &Tensor) -> Result<(Tensor, ConvGrads)> {
        let f = &cache.input;
        let [n, c, h, w] = f.dims4()?;
        let plane = h * w;
        let (fd, dr) = (f.data(), d_refined.data());
        let mut d_gate = vec![0.0; n * plane];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                for i in 0..plane {
                    d_gate[s * plane + i] += dr[off + i] * fd[off + i];
                }
            }
        }
        let d_logits = sigmoid_backward(&cache.gate, &Tensor::new(vec![n, 1, h, w], d_gate));
        let (d_pooled, grads) = self.conv.backward(&cache.pooled, &d_logits)?;

        let mut df = scale_locations(d_refined, cache.gate.data());
        let (dp, dfd) = (d_pooled.data(), df.data_mut());
        for s in 0..n {
            for i in 0..plane {
                let d_mean = dp[s * 2 * plane + i] / c as f64;
                for ch in 0..c {
                    dfd[(s * c + ch) * plane + i] += d_mean;
                }
                let best = cache.max_channel[s * plane + i];
                dfd[(s * c + best) * plane + i] += dp[s * 2 * plane + plane + i];
            }
        }
        Ok((df, grads))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CbamSettings {
    #[serde(default = "default_reduction")]
    pub reduction: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default)]
    pub order: CbamOrder,
    /// Add the block input back onto its output.
    #[serde(default)]
    pub residual: bool,
}

fn default_reduction() -> usize {
    16
}

fn default_kernel() -> usize {
    7
}

impl Default for CbamSettings {
    fn default() -> Self {
        Self {
            reduction: default_reduction(),
            kernel: default_kernel(),
            order: CbamOrder::default(),
            residual: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cbam {
    pub cam: ChannelAttention,
    pub sam: SpatialAttention,
    pub order: CbamOrder,
    pub residual: bool,
}

#[derive(Debug, Clone)]
pub struct CbamCache {
    cam: CamCache,
    sam: SamCache,
}

impl CbamCache {
    /// Appends the ReLU sides and max positions chosen in this pass.
    pub fn branch_signature(&self, out: &mut Vec<usize>) {
        out.extend_from_slice(&self.cam.max_indices);
        out.extend(self.cam.hidden_pre.data().iter().map(|&v| (v > 0.0) as usize));
        out.extend_from_slice(&self.sam.max_channel);
    }
}

#[derive(Debug, Clone)]
pub struct CbamGrads {
    pub cam: CamGrads,
    pub sam: ConvGrads,
}

impl Cbam {
    pub fn new<R: Rng>(channels: usize, settings: &CbamSettings, rng: &mut R) -> Self {
        Self {
            cam: ChannelAttention::new(channels, settings.reduction, rng),
            sam: SpatialAttention::new(settings.kernel, rng),
            order: settings.order,
            residual: settings.residual,
        }
    }

    pub fn zeros(channels: usize, settings: &CbamSettings) -> Self {
        Self {
            cam: ChannelAttention::zeros(channels, settings.reduction),
            sam: SpatialAttention::zeros(settings.kernel),
            order: settings.order,
            residual: settings.residual,
        }
    }

    pub fn forward_cached(&self, f: &Tensor) -> Result<(Tensor, CbamCache)> {
        let (out, cam, sam) = match self.order {
            CbamOrder::CamThenSam => {
                let (_, x, cam) = self.cam.forward(f)?;
                let (_, y, sam) = self.sam.forward(&x)?;
                (y, cam, sam)
            }
            CbamOrder::SamThenCam => {
                let (_, x, sam) = self.sam.forward(f)?;
                let (_, y, cam) = self.cam.forward(&x)?;
                (y, cam, sam)
            }
        };
        let out = if self.residual {
            let mut out = out;
            out.add_assign(f);
            out
        } else {
            out
        };
        Ok((out, CbamCache { cam, sam }))
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        self.forward_cached(f).map(|(y, _)| y)
    }

    pub fn backward(&self, cache: &CbamCache, d_out: &Tensor) -> Result<(Tensor, CbamGrads)> {
        let (mut df, cam, sam) = match self.order {
            CbamOrder::CamThenSam => {
                let (dx, sam) = self.sam.backward(&cache.sam, d_out)?;
                let (df, cam) = self.cam.backward(&cache.cam, &dx)?;
                (df, cam, sam)
            }
            CbamOrder::SamThenCam => {
                let (dx, cam) = self.cam.backward(&cache.cam, d_out)?;
                let (df, sam) = self.sam.backward(&cache.sam, &dx)?;
                (df, cam, sam)
            }
        };
        if self.residual {
            df.add_assign(d_out);
        }
        Ok((df, CbamGrads { cam, sam }))
    }
}

/// `(Mc, F ⊙ Mc)`.
pub fn channel_attention(f: &Tensor, params: &ChannelAttention) -> Result<(Tensor, Tensor)> {
    params.forward(f).map(|(g, r, _)| (g, r))
}

/// `(Ms, F ⊙ Ms)`.
pub fn spatial_attention(f: &Tensor, params: &SpatialAttention) -> Result<(Tensor, Tensor)> {
    params.forward(f).map(|(g, r, _)| (g, r))
}

pub fn cbam(f: &Tensor, params: &Cbam, order: CbamOrder) -> Result<Tensor> {
    if order == params.order {
        params.forward(f)
    } else {
        Cbam {
            order,
            ..params.clone()
        }
        .forward(f)
    }
}
