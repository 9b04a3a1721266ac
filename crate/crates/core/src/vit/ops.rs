use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::model::{LayerNorm, Linear};

pub(crate) const LN_EPS: f64 = 1e-6;

/// Row-wise softmax of a `B×C` tensor, with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (rows, cols) = matrix_dims(logits)?;
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("softmax input must be finite".into()));
    }
    let mut out = logits.clone();
    for r in 0..rows {
        softmax_in_place(&mut out.data_mut()[r * cols..(r + 1) * cols]);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    pub dlogits: Tensor,
}

/// Mean negative log-likelihood of `labels` and its gradient `(softmax - onehot) / B`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<CrossEntropy> {
    let (rows, cols) = matrix_dims(logits)?;
    if labels.len() != rows {
        return Err(Error::Argument(format!(
            "{} labels for a batch of {rows}",
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|l| **l >= cols) {
        return Err(Error::Argument(format!("label {l} outside 0..{cols}")));
    }
    let probs = softmax(logits)?;
    let mut dlogits = probs.clone();
    let mut loss = 0.0;
    let scale = 1.0 / rows as f64;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        loss += log_sum - row[label];
        let d = &mut dlogits.data_mut()[r * cols..(r + 1) * cols];
        d[label] -= 1.0;
        d.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(CrossEntropy {
        loss: loss * scale,
        dlogits,
    })
}

fn matrix_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] if *c > 0 => Ok((*r, *c)),
        s => Err(Error::Argument(format!("expected a 2-D B×C tensor, got {s:?}"))),
    }
}

/// `x[n, in] · Wᵀ + b` for row-major `x`.
pub(crate) fn linear(x: &[f64], rows: usize, lin: &Linear) -> Vec<f64> {
    let (in_dim, out_dim) = (lin.in_dim(), lin.out_dim());
    debug_assert_eq!(x.len(), rows * in_dim);
    let w = lin.weight.data();
    let b = lin.bias.data();
    let mut out = vec![0.0; rows * out_dim];
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let yr = &mut out[r * out_dim..(r + 1) * out_dim];
        for (o, y) in yr.iter_mut().enumerate() {
            *y = b[o] + dot(xr, &w[o * in_dim..(o + 1) * in_dim]);
        }
    }
    out
}

/// Accumulates parameter gradients into `grad` and, when asked, returns `dx`.
pub(crate) fn linear_backward(
    dy: &[f64],
    x: &[f64],
    rows: usize,
    lin: &Linear,
    grad: &mut Linear,
    want_dx: bool,
) -> Option<Vec<f64>> {
    let (in_dim, out_dim) = (lin.in_dim(), lin.out_dim());
    let w = lin.weight.data();
    {
        let gw = grad.weight.data_mut();
        for r in 0..rows {
            let xr = &x[r * in_dim..(r + 1) * in_dim];
            for o in 0..out_dim {
                let g = dy[r * out_dim + o];
                if g != 0.0 {
                    axpy(g, xr, &mut gw[o * in_dim..(o + 1) * in_dim]);
                }
            }
        }
    }
    let gb = grad.bias.data_mut();
    for r in 0..rows {
        for o in 0..out_dim {
            gb[o] += dy[r * out_dim + o];
        }
    }
    if !want_dx {
        return None;
    }
    let mut dx = vec![0.0; rows * in_dim];
    for r in 0..rows {
        let dxr = &mut dx[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            let g = dy[r * out_dim + o];
            if g != 0.0 {
                axpy(g, &w[o * in_dim..(o + 1) * in_dim], dxr);
            }
        }
    }
    Some(dx)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Per-row normalization statistics kept for the reverse pass.
#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm(x: &[f64], rows: usize, ln: &LayerNorm) -> (Vec<f64>, LnCache) {
    let dim = ln.gamma.len();
    let (g, b) = (ln.gamma.data(), ln.beta.data());
    let mut y = vec![0.0; rows * dim];
    let mut xhat = vec![0.0; rows * dim];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let mean = xr.iter().sum::<f64>() / dim as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for i in 0..dim {
            let h = (xr[i] - mean) * rs;
            xhat[r * dim + i] = h;
            y[r * dim + i] = g[i] * h + b[i];
        }
    }
    (y, LnCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward(dy: &[f64], cache: &LnCache, ln: &LayerNorm, grad: &mut LayerNorm) -> Vec<f64> {
    let dim = ln.gamma.len();
    let rows = cache.rstd.len();
    let g = ln.gamma.data();
    let mut dx = vec![0.0; rows * dim];
    for r in 0..rows {
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        let dyr = &dy[r * dim..(r + 1) * dim];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        {
            let gg = grad.gamma.data_mut();
            for i in 0..dim {
                gg[i] += dyr[i] * xh[i];
            }
        }
        {
            let gb = grad.beta.data_mut();
            for i in 0..dim {
                gb[i] += dyr[i];
            }
        }
        for i in 0..dim {
            let d = dyr[i] * g[i];
            mean_dxhat += d;
            mean_dxhat_xhat += d * xh[i];
        }
        mean_dxhat /= dim as f64;
        mean_dxhat_xhat /= dim as f64;
        for i in 0..dim {
            let d = dyr[i] * g[i];
            dx[r * dim + i] = cache.rstd[r] * (d - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Exact GELU, `x·Φ(x)`.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(rows: usize, data: Vec<f64>) -> Tensor {
        let cols = data.len() / rows;
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn softmax_uniform() {
        let p = softmax(&t(1, vec![0.3; 9])).unwrap();
        assert!(p.data().iter().all(|v| (v - 1.0 / 9.0).abs() < 1e-15));
    }

    #[test]
    fn softmax_large_logit_is_stable() {
        let mut logits = vec![0.0; 9];
        logits[0] = 1000.0;
        let p = softmax(&t(1, logits)).unwrap();
        assert!(p.data().iter().all(|v| v.is_finite()));
        assert!((p.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax(&t(1, vec![f64::NAN, 0.0])).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln9() {
        let ce = cross_entropy(&t(2, vec![1.5; 18]), &[0, 8]).unwrap();
        assert!((ce.loss - 9f64.ln()).abs() < 1e-12);
        assert!((ce.loss - 2.1972).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_confident_limit() {
        let mut logits = vec![0.0; 9];
        logits[4] = 60.0;
        let ce = cross_entropy(&t(1, logits), &[4]).unwrap();
        assert!(ce.loss < 1e-20);
    }

    #[test]
    fn cross_entropy_gradient_matches_central_differences() {
        let logits = t(3, (0..27).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect());
        let labels = [2, 0, 7];
        let ce = cross_entropy(&logits, &labels).unwrap();
        let h = 1e-5;
        for i in 0..logits.len() {
            let mut plus = logits.clone();
            plus.data_mut()[i] += h;
            let mut minus = logits.clone();
            minus.data_mut()[i] -= h;
            let num = (cross_entropy(&plus, &labels).unwrap().loss - cross_entropy(&minus, &labels).unwrap().loss)
                / (2.0 * h);
            let ana = ce.dlogits.data()[i];
            let rel = (num - ana).abs() / ana.abs().max(num.abs()).max(1e-12);
            assert!(rel < 1e-6, "index {i}: analytic {ana}, numeric {num}");
        }
    }

    #[test]
    fn cross_entropy_label_checks() {
        assert!(cross_entropy(&t(1, vec![0.0; 9]), &[9]).is_err());
        assert!(cross_entropy(&t(2, vec![0.0; 18]), &[1]).is_err());
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            row in proptest::collection::vec(-50.0f64..50.0, 9),
            shift in -100.0f64..100.0,
        ) {
            let a = softmax(&t(1, row.clone())).unwrap();
            let b = softmax(&t(1, row.iter().map(|v| v + shift).collect())).unwrap();
            prop_assert!((a.data().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(a.data().iter().all(|v| *v >= 0.0));
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
