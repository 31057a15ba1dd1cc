//! 2-D convolution as cross-correlation (no kernel flip).
//!
//! Weights are laid out `C_out × C_in × k × k`, bias `C_out`. The forward
//! pass lowers each sample to a patch matrix and multiplies; samples run
//! in parallel. The weight gradient is accumulated per output channel in a
//! fixed sample order, so it does not depend on the thread count.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::init;
use crate::par;
use crate::tensor::{debug_check_finite, Tensor};

/// Output extent is `⌊(H + 2·padding − k) / stride⌋ + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let span_h = h + 2 * padding;
        let span_w = w + 2 * padding;
        if k == 0 || stride == 0 || span_h < k || span_w < k {
            return Err(Error::ShapeMismatch(format!(
                "kernel {k} (stride {stride}, padding {padding}) does not fit a {h}x{w} input"
            )));
        }
        Ok(Self {
            c_in,
            h,
            w,
            k,
            stride,
            padding,
            h_out: (span_h - k) / stride + 1,
            w_out: (span_w - k) / stride + 1,
        })
    }

    fn patch_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Input coordinate read by output position `o` and kernel offset `kk`,
    /// or `None` inside the zero padding.
    #[inline]
    fn source(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        (o * self.stride + kk)
            .checked_sub(self.padding)
            .filter(|&i| i < extent)
    }
}

fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.h_out {
                    let out_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    match g.source(oy, ky, g.h) {
                        None => out_row.fill(0.0),
                        Some(iy) => {
                            for (ox, v) in out_row.iter_mut().enumerate() {
                                *v = g.source(ox, kx, g.w).map_or(0.0, |ix| xc[iy * g.w + ix]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.h_out {
                    let Some(iy) = g.source(oy, ky, g.h) else {
                        continue;
                    };
                    for ox in 0..g.w_out {
                        if let Some(ix) = g.source(ox, kx, g.w) {
                            dxc[iy * g.w + ix] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Four-lane dot product; the lane split lets the compiler vectorize.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn check_params(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<([usize; 4], [usize; 4])> {
    let xs = x.dims4()?;
    let ws = weight.dims4()?;
    if ws[1] != xs[1] || ws[2] != ws[3] || bias.len() != ws[0] {
        return Err(Error::ShapeMismatch(format!(
            "conv weight {:?} / bias {:?} incompatible with input {:?}",
            weight.shape(),
            bias.shape(),
            x.shape()
        )));
    }
    Ok((xs, ws))
}

pub fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let ([n, c_in, h, w], [c_out, _, k, _]) = check_params(x, weight, bias)?;
    let g = ConvGeometry::new(c_in, h, w, k, stride, padding)?;
    let plane = g.out_plane();
    let rows = g.patch_rows();
    let mut out = Tensor::zeros(vec![n, c_out, g.h_out, g.w_out]);
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    par::for_each_chunk_mut(out.data_mut(), c_out * plane, |s, y| {
        let mut cols = vec![0.0; rows * plane];
        im2col(&xd[s * c_in * h * w..(s + 1) * c_in * h * w], &g, &mut cols);
        for co in 0..c_out {
            let yc = &mut y[co * plane..(co + 1) * plane];
            yc.fill(bd[co]);
            for r in 0..rows {
                let wv = wd[co * rows + r];
                if wv == 0.0 {
                    continue;
                }
                for (o, c) in yc.iter_mut().zip(&cols[r * plane..(r + 1) * plane]) {
                    *o += wv * c;
                }
            }
        }
    });
    debug_check_finite(&out, "conv2d");
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Returns `(dx, grads)` for upstream gradient `dy`.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    dy: &Tensor,
) -> Result<(Tensor, ConvGrads)> {
    let [n, c_in, h, w] = x.dims4()?;
    let [c_out, _, k, _] = weight.dims4()?;
    let g = ConvGeometry::new(c_in, h, w, k, stride, padding)?;
    let plane = g.out_plane();
    let rows = g.patch_rows();
    if dy.shape() != [n, c_out, g.h_out, g.w_out] {
        return Err(Error::ShapeMismatch(format!(
            "conv upstream gradient {:?} does not match output shape",
            dy.shape()
        )));
    }
    let (xd, wd, dyd) = (x.data(), weight.data(), dy.data());

    let mut dx = Tensor::zeros(x.shape().to_vec());
    par::for_each_chunk_mut(dx.data_mut(), c_in * h * w, |s, dxs| {
        let dys = &dyd[s * c_out * plane..(s + 1) * c_out * plane];
        let mut dcols = vec![0.0; rows * plane];
        for co in 0..c_out {
            let dyc = &dys[co * plane..(co + 1) * plane];
            for r in 0..rows {
                let wv = wd[co * rows + r];
                for (d, g) in dcols[r * plane..(r + 1) * plane].iter_mut().zip(dyc) {
                    *d += wv * g;
                }
            }
        }
        col2im(&dcols, &g, dxs);
    });

    let mut dw = Tensor::zeros(weight.shape().to_vec());
    let mut db = Tensor::zeros(vec![c_out]);
    let mut cols = vec![0.0; rows * plane];
    for s in 0..n {
        im2col(&xd[s * c_in * h * w..(s + 1) * c_in * h * w], &g, &mut cols);
        let dys = &dyd[s * c_out * plane..(s + 1) * c_out * plane];
        par::for_each_chunk_pair_mut(dw.data_mut(), rows, db.data_mut(), 1, |co, dwc, dbc| {
            let dyc = &dys[co * plane..(co + 1) * plane];
            dbc[0] += dyc.iter().sum::<f64>();
            for (r, d) in dwc.iter_mut().enumerate() {
                *d += dot(dyc, &cols[r * plane..(r + 1) * plane]);
            }
        });
    }
    Ok((dx, ConvGrads { weight: dw, bias: db }))
}

/// A convolution layer with owned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Kaiming-uniform (fan-in) initialization.
    pub fn new<R: Rng>(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * k * k;
        Self {
            weight: init::kaiming_uniform(vec![c_out, c_in, k, k], fan_in, rng),
            bias: init::kaiming_uniform(vec![c_out], fan_in, rng),
            stride,
            padding,
        }
    }

    pub fn zeros(c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![c_out, c_in, k, k]),
            bias: Tensor::zeros(vec![c_out]),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_forward(x, &self.weight, &self.bias, self.stride, self.padding)
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor) -> Result<(Tensor, ConvGrads)> {
        conv2d_backward(x, &self.weight, self.stride, self.padding, dy)
    }
}
