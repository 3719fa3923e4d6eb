//! Row-wise building blocks with explicit backward passes.

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use rand::Rng;

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) struct LayerNormTrace {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub(crate) fn layer_norm(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    bias: &Array1<f64>,
) -> (Array2<f64>, LayerNormTrace) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *s = 1.0 / (var + LN_EPS).sqrt();
        let is = *s;
        row.mapv_inplace(|v| v * is);
    }
    let y = &xhat * gain + bias;
    (y, LayerNormTrace { xhat, inv_std })
}

/// Returns `dx` and accumulates gain/bias gradients.
pub(crate) fn layer_norm_backward(
    dy: &Array2<f64>,
    trace: &LayerNormTrace,
    gain: &Array1<f64>,
    d_gain: &mut Array1<f64>,
    d_bias: &mut Array1<f64>,
) -> Array2<f64> {
    *d_gain += &(dy * &trace.xhat).sum_axis(Axis(0));
    *d_bias += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut dx = dy * gain;
    for ((mut row, xhat), &is) in dx
        .rows_mut()
        .into_iter()
        .zip(trace.xhat.rows())
        .zip(trace.inv_std.iter())
    {
        let mean_g = row.sum() / d;
        let mean_gx = row.iter().zip(xhat.iter()).map(|(g, x)| g * x).sum::<f64>() / d;
        Zip::from(&mut row)
            .and(&xhat)
            .for_each(|g, &x| *g = is * (*g - mean_g - x * mean_gx));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Inverted-dropout mask: entries are 0 or `1 / (1 - p)`.
pub(crate) fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut impl Rng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.gen::<f64>() < p { 0.0 } else { keep })
}

/// Numerically stable log-softmax of one row.
pub(crate) fn log_softmax(row: ArrayView1<f64>) -> Array1<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.mapv(|v| v - lse)
}

/// Index of the largest entry; ties go to the lowest index.
pub(crate) fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
