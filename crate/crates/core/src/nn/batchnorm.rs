//! Per-channel batch normalization for `N × C × H × W` inputs.
//!
//! Training mode normalizes with the biased batch variance and folds the
//! unbiased variance into the running estimate:
//! `running = momentum · running + (1 - momentum) · batch`.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{debug_check_finite, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BnGrads {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Per-channel `(mean, biased variance)`.
fn channel_stats(x: &[f64], n: usize, c: usize, plane: usize) -> Vec<(f64, f64)> {
    par::map_range(c, |ch| {
        let count = (n * plane) as f64;
        let mut sum = 0.0;
        for s in 0..n {
            sum += x[(s * c + ch) * plane..(s * c + ch + 1) * plane]
                .iter()
                .sum::<f64>();
        }
        let mean = sum / count;
        let mut sq = 0.0;
        for s in 0..n {
            sq += x[(s * c + ch) * plane..(s * c + ch + 1) * plane]
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>();
        }
        (mean, sq / count)
    })
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(vec![channels], 1.0),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], 1.0),
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Tensor) -> Result<[usize; 4]> {
        let dims = x.dims4()?;
        if dims[1] != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm over {} channels got input {:?}",
                self.channels(),
                x.shape()
            )));
        }
        Ok(dims)
    }

    /// `y = gamma · (x - mean) · inv_std + beta` plane by plane.
    fn apply(&self, x: &Tensor, mean: &[f64], inv_std: &[f64]) -> (Tensor, Tensor) {
        let [_, c, h, w] = x.dims4().expect("checked");
        let plane = h * w;
        let mut x_hat = Tensor::zeros(x.shape().to_vec());
        let mut y = Tensor::zeros(x.shape().to_vec());
        let (g, b, xd) = (self.gamma.data(), self.beta.data(), x.data());
        par::for_each_chunk_pair_mut(x_hat.data_mut(), plane, y.data_mut(), plane, |i, xh, yp| {
            let ch = i % c;
            let src = &xd[i * plane..(i + 1) * plane];
            for ((h, o), v) in xh.iter_mut().zip(yp.iter_mut()).zip(src) {
                *h = (v - mean[ch]) * inv_std[ch];
                *o = g[ch] * *h + b[ch];
            }
        });
        (y, x_hat)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, BnCache)> {
        let [n, c, h, w] = self.check(x)?;
        let per_channel = n * h * w;
        if per_channel < 2 {
            return Err(Error::DegenerateBatch(per_channel));
        }
        let stats = channel_stats(x.data(), n, c, h * w);
        let mean: Vec<f64> = stats.iter().map(|s| s.0).collect();
        let inv_std: Vec<f64> = stats.iter().map(|s| 1.0 / (s.1 + self.eps).sqrt()).collect();
        let (y, x_hat) = self.apply(x, &mean, &inv_std);

        let unbias = per_channel as f64 / (per_channel - 1) as f64;
        let m = self.momentum;
        for (ch, (mu, var)) in stats.iter().enumerate() {
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = m * *rm + (1.0 - m) * mu;
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = m * *rv + (1.0 - m) * var * unbias;
        }
        debug_check_finite(&y, "batchnorm2d");
        Ok((y, BnCache { x_hat, inv_std }))
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let inv_std: Vec<f64> = self
            .running_var
            .data()
            .iter()
            .map(|v| 1.0 / (v + self.eps).sqrt())
            .collect();
        let (y, _) = self.apply(x, self.running_mean.data(), &inv_std);
        Ok(y)
    }

    pub fn forward(&mut self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        match mode {
            BnMode::Train => self.forward_train(x).map(|(y, _)| y),
            BnMode::Eval => self.forward_eval(x),
        }
    }

    /// Backward through the training-mode forward pass.
    pub fn backward(&self, cache: &BnCache, dy: &Tensor) -> Result<(Tensor, BnGrads)> {
        let [n, c, h, w] = self.check(dy)?;
        let plane = h * w;
        let count = (n * plane) as f64;
        let (xh, dyd) = (cache.x_hat.data(), dy.data());
        // per channel: Σdy and Σ(dy · x_hat)
        let sums = par::map_range(c, |ch| {
            let mut s = 0.0;
            let mut sx = 0.0;
            for b in 0..n {
                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for (g, v) in dyd[r.clone()].iter().zip(&xh[r]) {
                    s += g;
                    sx += g * v;
                }
            }
            (s, sx)
        });
        let g = self.gamma.data();
        let mut dx = Tensor::zeros(dy.shape().to_vec());
        par::for_each_chunk_mut(dx.data_mut(), plane, |i, out| {
            let ch = i % c;
            let k = g[ch] * cache.inv_std[ch] / count;
            let (s, sx) = sums[ch];
            let r = i * plane..(i + 1) * plane;
            for ((o, g), v) in out.iter_mut().zip(&dyd[r.clone()]).zip(&xh[r]) {
                *o = k * (count * g - s - v * sx);
            }
        });
        let grads = BnGrads {
            gamma: Tensor::new(vec![c], sums.iter().map(|s| s.1).collect()),
            beta: Tensor::new(vec![c], sums.iter().map(|s| s.0).collect()),
        };
        Ok((dx, grads))
    }
}
