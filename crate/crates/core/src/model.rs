//! VGG backbone with CBAM attention.
//!
//! Each stage is a Conv Block (`conv3×3 → batchnorm → ReLU`, repeated
//! `convs_per_block` times), an optional CBAM block, then a 2×2 max pool
//! that halves the spatial size. The head either averages the last feature
//! map globally or flattens it, runs optional hidden linear layers with
//! ReLU, and ends in a linear classifier.
//!
//! A 5-d input `[N, T, C, H, W]` is treated as `T` frames per sample: every
//! frame is classified on its own and the `T` logit vectors are averaged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{Cbam, CbamCache, CbamSettings};
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, maxpool2d, maxpool2d_backward, relu,
    relu_backward, BatchNorm2d, BnCache, Conv2d, Linear, PoolIndices,
};
use crate::tensor::Tensor;

pub const POOL: usize = 2;
pub const CONV_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPool {
    #[default]
    GlobalAvg,
    /// Flatten `C × H × W` as in the original VGG classifier.
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    #[serde(default)]
    pub pool: HeadPool,
    /// Widths of hidden fully connected layers before the classifier.
    #[serde(default)]
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    #[serde(default = "default_stages")]
    pub stage_channels: Vec<usize>,
    #[serde(default = "default_convs")]
    pub convs_per_block: usize,
    /// Stages (0-based) followed by a CBAM block; absent means every stage.
    #[serde(default)]
    pub cbam_stages: Option<Vec<usize>>,
    #[serde(default)]
    pub cbam: CbamSettings,
    pub num_classes: usize,
    #[serde(default)]
    pub head: HeadConfig,
}

fn default_stages() -> Vec<usize> {
    vec![64, 128, 256, 512, 512]
}

fn default_convs() -> usize {
    2
}

impl ModelConfig {
    /// The default framework: five stages of two convolutions, CBAM after
    /// every stage, global-average head.
    pub fn vgg_cbam(input_channels: usize, height: usize, width: usize, classes: usize) -> Self {
        Self {
            input_channels,
            input_height: height,
            input_width: width,
            stage_channels: default_stages(),
            convs_per_block: default_convs(),
            cbam_stages: None,
            cbam: CbamSettings::default(),
            num_classes: classes,
            head: HeadConfig::default(),
        }
    }

    /// Plain VGG-13 (with batchnorm) on 3-channel input and the
    /// 4096-4096 flattened classifier, for accounting comparisons.
    pub fn vgg_original(height: usize, width: usize, classes: usize) -> Self {
        Self {
            input_channels: 3,
            cbam_stages: Some(Vec::new()),
            head: HeadConfig {
                pool: HeadPool::Flatten,
                hidden: vec![4096, 4096],
            },
            ..Self::vgg_cbam(3, height, width, classes)
        }
    }

    pub fn has_cbam(&self, stage: usize) -> bool {
        self.cbam_stages
            .as_ref()
            .is_none_or(|s| s.contains(&stage))
    }

    /// Spatial size after the last pooling stage.
    pub fn final_spatial(&self) -> (usize, usize) {
        let n = self.stage_channels.len() as u32;
        (
            self.input_height / POOL.pow(n),
            self.input_width / POOL.pow(n),
        )
    }

    pub fn head_features(&self) -> usize {
        let c = self.stage_channels.last().copied().unwrap_or(0);
        match self.head.pool {
            HeadPool::GlobalAvg => c,
            HeadPool::Flatten => {
                let (h, w) = self.final_spatial();
                c * h * w
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.stage_channels.is_empty() {
            return bad("model.stage_channels must list at least one stage".into());
        }
        if self.stage_channels.contains(&0) || self.input_channels == 0 {
            return bad("model channel counts must be positive".into());
        }
        if self.convs_per_block == 0 {
            return bad("model.convs_per_block must be at least 1".into());
        }
        if self.num_classes == 0 {
            return bad("model.num_classes must be at least 1".into());
        }
        let (mut h, mut w) = (self.input_height, self.input_width);
        for stage in 0..self.stage_channels.len() {
            if h < POOL || w < POOL {
                return bad(format!(
                    "model: {}x{} input collapses below 1 pixel at stage {stage} of {}",
                    self.input_height,
                    self.input_width,
                    self.stage_channels.len()
                ));
            }
            h /= POOL;
            w /= POOL;
        }
        if let Some(stages) = &self.cbam_stages {
            if let Some(s) = stages.iter().find(|&&s| s >= self.stage_channels.len()) {
                return bad(format!("model.cbam_stages refers to missing stage {s}"));
            }
        }
        if self.cbam.kernel.is_multiple_of(2) || self.cbam.reduction == 0 {
            return bad("model.cbam.kernel must be odd and model.cbam.reduction positive".into());
        }
        if self.head.hidden.contains(&0) {
            return bad("model.head.hidden widths must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub layers: Vec<ConvBnRelu>,
    pub cbam: Option<Cbam>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub pool: HeadPool,
    pub hidden: Vec<Linear>,
    pub classifier: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub stages: Vec<Stage>,
    pub head: Head,
}

struct LayerCache {
    input: Tensor,
    bn: BnCache,
    pre_act: Tensor,
}

struct StageCache {
    layers: Vec<LayerCache>,
    cbam: Option<CbamCache>,
    pool_input_shape: Vec<usize>,
    pool_indices: PoolIndices,
}

/// Activations retained by [`Model::forward_train`] for the backward pass.
pub struct ForwardCache {
    input_shape: Vec<usize>,
    frames: usize,
    stages: Vec<StageCache>,
    features_shape: Vec<usize>,
    head_inputs: Vec<Tensor>,
    head_pre: Vec<Tensor>,
}

impl ForwardCache {
    /// Which side of every ReLU and which element of every max was taken.
    /// Two passes with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for stage in &self.stages {
            for l in &stage.layers {
                out.extend(l.pre_act.data().iter().map(|&v| (v > 0.0) as usize));
            }
            if let Some(c) = &stage.cbam {
                c.branch_signature(&mut out);
            }
            out.extend_from_slice(&stage.pool_indices);
        }
        for pre in &self.head_pre {
            out.extend(pre.data().iter().map(|&v| (v > 0.0) as usize));
        }
        out
    }
}

/// Gradients in [`Model::named_params`] order.
#[derive(Debug, Clone)]
pub struct Gradients(pub Vec<Tensor>);

pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c_in = config.input_channels;
    let stages = config
        .stage_channels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let layers = (0..config.convs_per_block)
                .map(|j| ConvBnRelu {
                    conv: Conv2d::new(if j == 0 { c_in } else { c }, c, CONV_KERNEL, 1, 1, &mut rng),
                    bn: BatchNorm2d::new(c),
                })
                .collect();
            c_in = c;
            Stage {
                layers,
                cbam: config
                    .has_cbam(i)
                    .then(|| Cbam::new(c, &config.cbam, &mut rng)),
            }
        })
        .collect();
    let mut f = config.head_features();
    let hidden = config
        .head
        .hidden
        .iter()
        .map(|&h| {
            let l = Linear::new(f, h, &mut rng);
            f = h;
            l
        })
        .collect();
    let classifier = Linear::new(f, config.num_classes, &mut rng);
    Ok(Model {
        config: config.clone(),
        stages,
        head: Head {
            pool: config.head.pool,
            hidden,
            classifier,
        },
    })
}

impl Model {
    /// Flattens `[N, T, C, H, W]` into `[N·T, C, H, W]`.
    fn frames_view(&self, x: &Tensor) -> Result<(Tensor, usize)> {
        let cfg = &self.config;
        let expect = [cfg.input_channels, cfg.input_height, cfg.input_width];
        match x.shape() {
            [_, c, h, w] if [*c, *h, *w] == expect => Ok((x.clone(), 1)),
            [n, t, c, h, w] if [*c, *h, *w] == expect && *t > 0 => {
                Ok((x.clone().reshape(vec![n * t, *c, *h, *w])?, *t))
            }
            other => Err(Error::ShapeMismatch(format!(
                "model expects [N, {}, {}, {}] (or with a frame axis), got {other:?}",
                expect[0], expect[1], expect[2]
            ))),
        }
    }

    fn average_frames(logits: Tensor, frames: usize) -> Result<Tensor> {
        if frames == 1 {
            return Ok(logits);
        }
        let [nt, k] = logits.dims2()?;
        let n = nt / frames;
        let mut out = vec![0.0; n * k];
        for (i, row) in logits.data().chunks(k).enumerate() {
            for (o, v) in out[(i / frames) * k..(i / frames + 1) * k].iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(Tensor::new(vec![n, k], out).scale(1.0 / frames as f64))
    }

    fn head_features(&self, features: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = features.dims4()?;
        match self.head.pool {
            HeadPool::GlobalAvg => global_avg_pool(features)?.reshape(vec![n, c]),
            HeadPool::Flatten => features.clone().reshape(vec![n, c * h * w]),
        }
    }

    /// Inference: batch norm uses running statistics.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (mut h, frames) = self.frames_view(x)?;
        for stage in &self.stages {
            for layer in &stage.layers {
                h = relu(&layer.bn.forward_eval(&layer.conv.forward(&h)?)?);
            }
            if let Some(cbam) = &stage.cbam {
                h = cbam.forward(&h)?;
            }
            h = maxpool2d(&h, POOL, POOL)?.0;
        }
        let mut z = self.head_features(&h)?;
        for l in &self.head.hidden {
            z = relu(&l.forward(&z)?);
        }
        Self::average_frames(self.head.classifier.forward(&z)?, frames)
    }

    /// Training forward pass: batch statistics, running stats updated.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let (mut h, frames) = self.frames_view(x)?;
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        for stage in &mut self.stages {
            let mut layers = Vec::with_capacity(stage.layers.len());
            for layer in &mut stage.layers {
                let conv_out = layer.conv.forward(&h)?;
                let (pre_act, bn) = layer.bn.forward_train(&conv_out)?;
                let next = relu(&pre_act);
                layers.push(LayerCache {
                    input: std::mem::replace(&mut h, next),
                    bn,
                    pre_act,
                });
            }
            let cbam = match &stage.cbam {
                Some(block) => {
                    let (out, cache) = block.forward_cached(&h)?;
                    h = out;
                    Some(cache)
                }
                None => None,
            };
            let pool_input_shape = h.shape().to_vec();
            let (pooled, pool_indices) = maxpool2d(&h, POOL, POOL)?;
            h = pooled;
            stage_caches.push(StageCache {
                layers,
                cbam,
                pool_input_shape,
                pool_indices,
            });
        }
        let features_shape = h.shape().to_vec();
        let mut z = self.head_features(&h)?;
        let mut head_inputs = Vec::new();
        let mut head_pre = Vec::new();
        for l in &self.head.hidden {
            let pre = l.forward(&z)?;
            head_inputs.push(std::mem::replace(&mut z, relu(&pre)));
            head_pre.push(pre);
        }
        let logits = self.head.classifier.forward(&z)?;
        head_inputs.push(z);
        let cache = ForwardCache {
            input_shape: x.shape().to_vec(),
            frames,
            stages: stage_caches,
            features_shape,
            head_inputs,
            head_pre,
        };
        Ok((Self::average_frames(logits, frames)?, cache))
    }

    /// Returns the input gradient and parameter gradients.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &Tensor) -> Result<(Tensor, Gradients)> {
        let d_logits = if cache.frames > 1 {
            let [n, k] = d_logits.dims2()?;
            let t = cache.frames;
            let mut d = Vec::with_capacity(n * t * k);
            for row in d_logits.data().chunks(k) {
                for _ in 0..t {
                    d.extend(row.iter().map(|g| g / t as f64));
                }
            }
            Tensor::new(vec![n * t, k], d)
        } else {
            d_logits.clone()
        };

        let mut head_grads = Vec::new();
        let classifier_in = cache.head_inputs.last().expect("classifier input");
        let (mut dz, g) = self.head.classifier.backward(classifier_in, &d_logits)?;
        let classifier_grads = [g.weight, g.bias];
        for (i, l) in self.head.hidden.iter().enumerate().rev() {
            let d_pre = relu_backward(&cache.head_pre[i], &dz);
            let (d, g) = l.backward(&cache.head_inputs[i], &d_pre)?;
            head_grads.push([g.weight, g.bias]);
            dz = d;
        }
        head_grads.reverse();

        let mut dh = match self.head.pool {
            HeadPool::GlobalAvg => global_avg_pool_backward(&cache.features_shape, &dz),
            HeadPool::Flatten => dz.reshape(cache.features_shape.clone())?,
        };

        let mut stage_grads: Vec<Vec<Tensor>> = Vec::with_capacity(self.stages.len());
        for (stage, sc) in self.stages.iter().zip(&cache.stages).rev() {
            dh = maxpool2d_backward(&sc.pool_input_shape, &sc.pool_indices, &dh);
            let mut cbam_grads = Vec::new();
            if let (Some(block), Some(bc)) = (&stage.cbam, &sc.cbam) {
                let (d, g) = block.backward(bc, &dh)?;
                dh = d;
                cbam_grads = vec![
                    g.cam.fc1.weight,
                    g.cam.fc1.bias,
                    g.cam.fc2.weight,
                    g.cam.fc2.bias,
                    g.sam.weight,
                    g.sam.bias,
                ];
            }
            let mut layer_grads = Vec::new();
            for (layer, lc) in stage.layers.iter().zip(&sc.layers).rev() {
                let d_pre = relu_backward(&lc.pre_act, &dh);
                let (d_conv, bn) = layer.bn.backward(&lc.bn, &d_pre)?;
                let (d_in, conv) = layer.conv.backward(&lc.input, &d_conv)?;
                layer_grads.push([conv.weight, conv.bias, bn.gamma, bn.beta]);
                dh = d_in;
            }
            layer_grads.reverse();
            let mut all: Vec<Tensor> = layer_grads.into_iter().flatten().collect();
            all.extend(cbam_grads);
            stage_grads.push(all);
        }
        stage_grads.reverse();

        let mut grads: Vec<Tensor> = stage_grads.into_iter().flatten().collect();
        grads.extend(head_grads.into_iter().flatten());
        grads.extend(classifier_grads);
        let dx = dh.reshape(cache.input_shape.clone())?;
        Ok((dx, Gradients(grads)))
    }

    /// Learnable tensors with stable names; gradients follow this order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, l) in stage.layers.iter().enumerate() {
                out.push((format!("stage{i}.conv{j}.weight"), &l.conv.weight));
                out.push((format!("stage{i}.conv{j}.bias"), &l.conv.bias));
                out.push((format!("stage{i}.bn{j}.gamma"), &l.bn.gamma));
                out.push((format!("stage{i}.bn{j}.beta"), &l.bn.beta));
            }
            if let Some(c) = &stage.cbam {
                out.push((format!("stage{i}.cbam.cam.fc1.weight"), &c.cam.fc1.weight));
                out.push((format!("stage{i}.cbam.cam.fc1.bias"), &c.cam.fc1.bias));
                out.push((format!("stage{i}.cbam.cam.fc2.weight"), &c.cam.fc2.weight));
                out.push((format!("stage{i}.cbam.cam.fc2.bias"), &c.cam.fc2.bias));
                out.push((format!("stage{i}.cbam.sam.weight"), &c.sam.conv.weight));
                out.push((format!("stage{i}.cbam.sam.bias"), &c.sam.conv.bias));
            }
        }
        for (j, l) in self.head.hidden.iter().enumerate() {
            out.push((format!("head.fc{j}.weight"), &l.weight));
            out.push((format!("head.fc{j}.bias"), &l.bias));
        }
        out.push(("head.classifier.weight".into(), &self.head.classifier.weight));
        out.push(("head.classifier.bias".into(), &self.head.classifier.bias));
        out
    }

    /// Same order as [`Model::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for stage in &mut self.stages {
            for l in &mut stage.layers {
                out.push(&mut l.conv.weight);
                out.push(&mut l.conv.bias);
                out.push(&mut l.bn.gamma);
                out.push(&mut l.bn.beta);
            }
            if let Some(c) = &mut stage.cbam {
                out.push(&mut c.cam.fc1.weight);
                out.push(&mut c.cam.fc1.bias);
                out.push(&mut c.cam.fc2.weight);
                out.push(&mut c.cam.fc2.bias);
                out.push(&mut c.sam.conv.weight);
                out.push(&mut c.sam.conv.bias);
            }
        }
        for l in &mut self.head.hidden {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head.classifier.weight);
        out.push(&mut self.head.classifier.bias);
        out
    }

    /// Batch-norm running statistics.
    pub fn named_buffers(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, l) in stage.layers.iter().enumerate() {
                out.push((format!("stage{i}.bn{j}.running_mean"), &l.bn.running_mean));
                out.push((format!("stage{i}.bn{j}.running_var"), &l.bn.running_var));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for stage in &mut self.stages {
            for l in &mut stage.layers {
                out.push(&mut l.bn.running_mean);
                out.push(&mut l.bn.running_var);
            }
        }
        out
    }
}

/// Central-difference check of the training-mode cross-entropy gradient
/// with respect to the input and every parameter. Returns the largest
/// relative error, or `None` when some stencil point takes a different
/// ReLU/max branch than the unperturbed pass (the difference quotient is
/// then not a derivative estimate).
///
/// The loss is scaled by 1/64. Conv biases feeding batch norm have an
/// exactly zero gradient, so their difference quotient is pure loss
/// roundoff (one ulp of an O(1) loss over `2·eps`); the scale keeps that
/// below the 1e-8 absolute floor of the relative error.
pub fn gradient_check(model: &Model, x: &Tensor, labels: &[usize], eps: f64) -> Result<Option<f64>> {
    use crate::nn::gradcheck::relative_error;
    use crate::nn::softmax_cross_entropy;
    const SCALE: f64 = 1.0 / 64.0;

    let eval = |m: &Model, x: &Tensor| -> Result<(f64, Vec<usize>)> {
        let mut m = m.clone();
        let (y, cache) = m.forward_train(x)?;
        Ok((SCALE * softmax_cross_entropy(&y, labels)?.0, cache.branch_signature()))
    };
    let mut m = model.clone();
    let (y, cache) = m.forward_train(x)?;
    let dy = softmax_cross_entropy(&y, labels)?.1.scale(SCALE);
    let (dx, grads) = model.backward(&cache, &dy)?;
    let signature = cache.branch_signature();

    let mut worst = 0.0f64;
    let mut probe = |analytic: &[f64], at: &mut dyn FnMut(usize, f64) -> Result<(f64, Vec<usize>)>| -> Result<bool> {
        for (i, a) in analytic.iter().enumerate() {
            let (plus, sp) = at(i, eps)?;
            let (minus, sm) = at(i, -eps)?;
            if sp != signature || sm != signature {
                return Ok(false);
            }
            worst = worst.max(relative_error(*a, (plus - minus) / (2.0 * eps)));
        }
        Ok(true)
    };

    let smooth = probe(dx.data(), &mut |i, d| {
        let mut xp = x.clone();
        xp.data_mut()[i] += d;
        eval(model, &xp)
    })?;
    if !smooth {
        return Ok(None);
    }
    for (pi, g) in grads.0.iter().enumerate() {
        let smooth = probe(g.data(), &mut |i, d| {
            let mut mp = model.clone();
            mp.params_mut()[pi].data_mut()[i] += d;
            eval(&mp, x)
        })?;
        if !smooth {
            return Ok(None);
        }
    }
    Ok(Some(worst))
}
