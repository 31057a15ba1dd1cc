//! Fully connected layer. Weight is `F_out × F_in`, so `y = x · Wᵀ + b`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::init;
use crate::par;
use crate::tensor::{debug_check_finite, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng>(f_in: usize, f_out: usize, rng: &mut R) -> Self {
        Self {
            weight: init::kaiming_uniform(vec![f_out, f_in], f_in, rng),
            bias: init::kaiming_uniform(vec![f_out], f_in, rng),
        }
    }

    pub fn zeros(f_in: usize, f_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![f_out, f_in]),
            bias: Tensor::zeros(vec![f_out]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    fn rows(&self, x: &Tensor) -> Result<usize> {
        let [n, f] = x.dims2()?;
        if f != self.in_features() {
            return Err(Error::ShapeMismatch(format!(
                "linear layer expects {} features, got {f}",
                self.in_features()
            )));
        }
        Ok(n)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.rows(x)?;
        let (fi, fo) = (self.in_features(), self.out_features());
        let mut y = Tensor::zeros(vec![n, fo]);
        let (xd, wd, bd) = (x.data(), self.weight.data(), self.bias.data());
        par::for_each_chunk_mut(y.data_mut(), fo, |s, row| {
            let xs = &xd[s * fi..(s + 1) * fi];
            for (o, out) in row.iter_mut().enumerate() {
                let wr = &wd[o * fi..(o + 1) * fi];
                *out = bd[o] + wr.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
            }
        });
        debug_check_finite(&y, "linear");
        Ok(y)
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor) -> Result<(Tensor, LinearGrads)> {
        let n = self.rows(x)?;
        let (fi, fo) = (self.in_features(), self.out_features());
        if dy.shape() != [n, fo] {
            return Err(Error::ShapeMismatch(format!(
                "linear upstream gradient {:?}, expected [{n}, {fo}]",
                dy.shape()
            )));
        }
        let (xd, wd, dyd) = (x.data(), self.weight.data(), dy.data());
        let mut dx = Tensor::zeros(vec![n, fi]);
        par::for_each_chunk_mut(dx.data_mut(), fi, |s, row| {
            for o in 0..fo {
                let g = dyd[s * fo + o];
                for (d, w) in row.iter_mut().zip(&wd[o * fi..(o + 1) * fi]) {
                    *d += g * w;
                }
            }
        });
        let mut dw = Tensor::zeros(vec![fo, fi]);
        let mut db = Tensor::zeros(vec![fo]);
        par::for_each_chunk_pair_mut(dw.data_mut(), fi, db.data_mut(), 1, |o, row, b| {
            for s in 0..n {
                let g = dyd[s * fo + o];
                b[0] += g;
                for (d, v) in row.iter_mut().zip(&xd[s * fi..(s + 1) * fi]) {
                    *d += g * v;
                }
            }
        });
        Ok((dx, LinearGrads { weight: dw, bias: db }))
    }
}
