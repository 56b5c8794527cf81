use super::{same_shape, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn check_mask(mask: Option<&[bool]>, len: usize) -> Result<()> {
    match mask {
        Some(m) if m.len() != len => Err(Error::Dimension {
            left: m.len(),
            right: len,
        }),
        Some(m) if !m.contains(&true) => Err(Error::AllMasked),
        _ => Ok(()),
    }
}

fn valid(mask: Option<&[bool]>, i: usize) -> bool {
    mask.map_or(true, |m| m[i])
}

/// Softmax along the last axis. Masked positions get probability 0.
pub fn softmax(x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let n = x.cols();
    check_mask(mask, n)?;
    let mut out = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        let row = x.row(r);
        let max = row
            .iter()
            .enumerate()
            .filter(|&(i, _)| valid(mask, i))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let o = out.row_mut(r);
        let mut total = 0.0;
        for i in 0..n {
            if valid(mask, i) {
                o[i] = (row[i] - max).exp();
                total += o[i];
            }
        }
        o.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out.debug_finite("softmax"))
}

/// Takes the softmax output `y`.
pub fn softmax_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    same_shape("softmax_backward", y, dy)?;
    let mut dx = Tensor::zeros(y.shape());
    for r in 0..y.rows() {
        let (yr, gr) = (y.row(r), dy.row(r));
        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
            *d = yv * (g - inner);
        }
    }
    Ok(dx)
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

/// Takes the forward output `y = tanh(x)`.
pub fn tanh_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    zip_map("tanh_backward", y, dy, |y, g| g * (1.0 - y * y))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Takes the forward input; the subgradient at 0 is 0.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    zip_map("relu_backward", x, dy, |x, g| if x > 0.0 { g } else { 0.0 })
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Takes the forward output `y = sigmoid(x)`.
pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    zip_map("sigmoid_backward", y, dy, |y, g| g * y * (1.0 - y))
}

fn zip_map(op: &str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
}

/// Normalizes each row over the last axis, then applies `gain` and `bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<(Tensor, LayerNormCache)> {
    let n = x.cols();
    if gain.shape() != [n] || bias.shape() != [n] {
        return Err(Error::Shape(format!(
            "layer_norm: input {:?}, gain {:?}, bias {:?}",
            x.shape(),
            gain.shape(),
            bias.shape()
        )));
    }
    let mut normalized = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(inv);
        for (h, &v) in normalized.row_mut(r).iter_mut().zip(row) {
            *h = (v - mean) * inv;
        }
        for ((o, &h), (&g, &b)) in out
            .row_mut(r)
            .iter_mut()
            .zip(normalized.row(r))
            .zip(gain.data().iter().zip(bias.data()))
        {
            *o = h * g + b;
        }
    }
    Ok((out.debug_finite("layer_norm"), LayerNormCache { normalized, inv_std }))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(cache: &LayerNormCache, gain: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    same_shape("layer_norm_backward", &cache.normalized, dy)?;
    let n = dy.cols();
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgain = Tensor::zeros(gain.shape());
    let mut dbias = Tensor::zeros(gain.shape());
    for r in 0..dy.rows() {
        let (xh, g) = (cache.normalized.row(r), dy.row(r));
        let dxh: Vec<f64> = g.iter().zip(gain.data()).map(|(a, b)| a * b).collect();
        let sum: f64 = dxh.iter().sum();
        let sum_x: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
        let inv = cache.inv_std[r];
        for (i, d) in dx.row_mut(r).iter_mut().enumerate() {
            *d = inv / n as f64 * (n as f64 * dxh[i] - sum - xh[i] * sum_x);
        }
        for i in 0..n {
            dgain.data_mut()[i] += g[i] * xh[i];
            dbias.data_mut()[i] += g[i];
        }
    }
    Ok((dx, dgain, dbias))
}

/// Reduction axis of a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows (axis 0); one result per column.
    Rows,
    /// Reduce over columns (axis 1); one result per row.
    Cols,
}

fn matrix_dims(x: &Tensor, op: &str) -> Result<(usize, usize)> {
    if x.rank() != 2 {
        return Err(Error::Shape(format!("{op} needs a matrix, got {:?}", x.shape())));
    }
    Ok((x.shape()[0], x.shape()[1]))
}

/// `(reduced length, kept length, index of element (reduced, kept))`.
fn reduction(r: usize, c: usize, axis: Axis) -> (usize, usize, impl Fn(usize, usize) -> usize) {
    let (red, keep, red_stride, keep_stride) = match axis {
        Axis::Rows => (r, c, c, 1),
        Axis::Cols => (c, r, 1, c),
    };
    (red, keep, move |i: usize, k: usize| i * red_stride + k * keep_stride)
}

/// Mean over the valid entries of `axis`.
pub fn mean_pool(x: &Tensor, axis: Axis, mask: Option<&[bool]>) -> Result<Tensor> {
    let (r, c) = matrix_dims(x, "mean_pool")?;
    let (red, keep, at) = reduction(r, c, axis);
    check_mask(mask, red)?;
    let count = (0..red).filter(|&i| valid(mask, i)).count() as f64;
    let data = (0..keep)
        .map(|k| {
            (0..red)
                .filter(|&i| valid(mask, i))
                .map(|i| x.data()[at(i, k)])
                .sum::<f64>()
                / count
        })
        .collect();
    Tensor::vector(data)
}

pub fn mean_pool_backward(shape: &[usize], axis: Axis, mask: Option<&[bool]>, dy: &Tensor) -> Result<Tensor> {
    let mut dx = Tensor::zeros(shape);
    let (red, keep, at) = reduction(shape[0], shape[1], axis);
    check_mask(mask, red)?;
    if dy.shape() != [keep] {
        return Err(Error::Dimension {
            left: dy.len(),
            right: keep,
        });
    }
    let count = (0..red).filter(|&i| valid(mask, i)).count() as f64;
    for k in 0..keep {
        for i in (0..red).filter(|&i| valid(mask, i)) {
            dx.data_mut()[at(i, k)] = dy.data()[k] / count;
        }
    }
    Ok(dx)
}

/// Max over the valid entries of `axis`, with the (first) argmax of each result.
pub fn max_pool(x: &Tensor, axis: Axis, mask: Option<&[bool]>) -> Result<(Tensor, Vec<usize>)> {
    let (r, c) = matrix_dims(x, "max_pool")?;
    let (red, keep, at) = reduction(r, c, axis);
    check_mask(mask, red)?;
    let mut values = Vec::with_capacity(keep);
    let mut argmax = Vec::with_capacity(keep);
    for k in 0..keep {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..red).filter(|&i| valid(mask, i)) {
            let v = x.data()[at(i, k)];
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        let (i, v) = best.expect("mask checked");
        values.push(v);
        argmax.push(i);
    }
    Ok((Tensor::vector(values)?, argmax))
}

pub fn max_pool_backward(shape: &[usize], axis: Axis, argmax: &[usize], dy: &Tensor) -> Result<Tensor> {
    let mut dx = Tensor::zeros(shape);
    let (_, keep, at) = reduction(shape[0], shape[1], axis);
    if dy.shape() != [keep] || argmax.len() != keep {
        return Err(Error::Dimension {
            left: dy.len(),
            right: keep,
        });
    }
    for k in 0..keep {
        dx.data_mut()[at(argmax[k], k)] += dy.data()[k];
    }
    Ok(dx)
}
