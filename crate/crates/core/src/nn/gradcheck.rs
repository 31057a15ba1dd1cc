//! Central finite-difference gradient checking.

use rand::Rng;

use crate::tensor::Tensor;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central differences `(f(x + eps·e_i) - f(x - eps·e_i)) / 2eps` for every
/// coordinate of `point`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, point: &[f64], eps: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + eps;
            let up = f(&x);
            x[i] = orig - eps;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Largest relative error between `analytic` and the numeric gradient of `f`
/// at `point`.
pub fn finite_difference_check(
    f: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    eps: f64,
) -> f64 {
    assert_eq!(point.len(), analytic.len(), "gradient length mismatch");
    numeric_gradient(f, point, eps)
        .into_iter()
        .zip(analytic)
        .map(|(n, &a)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Entries drawn from `U(-1, 1)`.
pub fn random_tensor<R: Rng>(shape: Vec<usize>, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Weights for turning a tensor output into a scalar loss. Magnitudes are
/// kept in `[0.5, 1.5)` so no output is projected away.
pub fn random_projection<R: Rng>(shape: Vec<usize>, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.5..1.5);
            if rng.gen() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data)
}

/// `Σ a_i b_i` with Neumaier compensation, so the scalar losses used for
/// differencing carry as little rounding noise as possible.
pub fn project(a: &Tensor, b: &Tensor) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let v = x * y;
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}
