//! Max pooling and the global pools used by channel attention.
//!
//! Max-type backward passes route the whole gradient to the first
//! (row-major) maximal element of each window.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Flat input index that produced each pooled output.
pub type PoolIndices = Vec<usize>;

/// `k × k` windows with the given stride; windows that would overhang the
/// input are dropped (floor mode).
pub fn maxpool2d(x: &Tensor, k: usize, stride: usize) -> Result<(Tensor, PoolIndices)> {
    let [n, c, h, w] = x.dims4()?;
    if k == 0 || stride == 0 || h < k || w < k {
        return Err(Error::ShapeMismatch(format!(
            "maxpool window {k} (stride {stride}) does not fit a {h}x{w} input"
        )));
    }
    let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let plane_out = ho * wo;
    let mut out = Tensor::zeros(vec![n, c, ho, wo]);
    let mut idx = vec![0usize; n * c * plane_out];
    let xd = x.data();
    par::for_each_chunk_pair_mut(out.data_mut(), plane_out, &mut idx, plane_out, |p, y, ix| {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                }
                y[oy * wo + ox] = xd[best];
                ix[oy * wo + ox] = best;
            }
        }
    });
    Ok((out, idx))
}

/// Scatters `dy` back onto the argmax positions of an input of `shape`.
pub fn maxpool2d_backward(shape: &[usize], indices: &PoolIndices, dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(shape.to_vec());
    let d = dx.data_mut();
    for (&i, &g) in indices.iter().zip(dy.data()) {
        d[i] += g;
    }
    dx
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let plane = h * w;
    let data = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Ok(Tensor::new(vec![n, c, 1, 1], data))
}

pub fn global_avg_pool_backward(shape: &[usize], dy: &Tensor) -> Tensor {
    let plane: usize = shape[2..].iter().product();
    let data = dy
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / plane as f64, plane))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn global_max_pool(x: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let [n, c, h, w] = x.dims4()?;
    let plane = h * w;
    let mut idx = Vec::with_capacity(n * c);
    let data = x
        .data()
        .chunks(plane)
        .enumerate()
        .map(|(p, vals)| {
            let mut best = 0;
            for (i, &v) in vals.iter().enumerate() {
                if v > vals[best] {
                    best = i;
                }
            }
            idx.push(p * plane + best);
            vals[best]
        })
        .collect();
    Ok((Tensor::new(vec![n, c, 1, 1], data), idx))
}

pub fn global_max_pool_backward(shape: &[usize], indices: &PoolIndices, dy: &Tensor) -> Tensor {
    maxpool2d_backward(shape, indices, dy)
}
