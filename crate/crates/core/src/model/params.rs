use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    /// Query, key and value projections side by side: `d x 3d`.
    pub w_qkv: Array2<f64>,
    pub b_qkv: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub w_ff1: Array2<f64>,
    pub b_ff1: Array1<f64>,
    pub w_ff2: Array2<f64>,
    pub b_ff2: Array1<f64>,
}

/// All trainable decoder weights. Gradients and optimizer moments reuse this type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Linear map from the concatenated one-hot feature and time encodings.
    pub input_proj: Array2<f64>,
    pub node_emb: Array2<f64>,
    pub customer_emb: Array2<f64>,
    /// Row 0 is the begin-of-sequence position.
    pub pos_emb: Array2<f64>,
    pub bos: Array1<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Array1<f64>,
    pub lnf_bias: Array1<f64>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

macro_rules! named_slices {
    ($self:expr, $slice:ident, $iter:ident) => {{
        let mut out = Vec::with_capacity(9 + 12 * $self.layers.len());
        out.push(("input_proj".to_string(), $self.input_proj.$slice().expect("standard layout")));
        out.push(("node_emb".to_string(), $self.node_emb.$slice().expect("standard layout")));
        out.push(("customer_emb".to_string(), $self.customer_emb.$slice().expect("standard layout")));
        out.push(("pos_emb".to_string(), $self.pos_emb.$slice().expect("standard layout")));
        out.push(("bos".to_string(), $self.bos.$slice().expect("standard layout")));
        for (l, layer) in $self.layers.$iter().enumerate() {
            let p = |n: &str| format!("layers.{l}.{n}");
            out.push((p("ln1_gain"), layer.ln1_gain.$slice().expect("standard layout")));
            out.push((p("ln1_bias"), layer.ln1_bias.$slice().expect("standard layout")));
            out.push((p("w_qkv"), layer.w_qkv.$slice().expect("standard layout")));
            out.push((p("b_qkv"), layer.b_qkv.$slice().expect("standard layout")));
            out.push((p("w_out"), layer.w_out.$slice().expect("standard layout")));
            out.push((p("b_out"), layer.b_out.$slice().expect("standard layout")));
            out.push((p("ln2_gain"), layer.ln2_gain.$slice().expect("standard layout")));
            out.push((p("ln2_bias"), layer.ln2_bias.$slice().expect("standard layout")));
            out.push((p("w_ff1"), layer.w_ff1.$slice().expect("standard layout")));
            out.push((p("b_ff1"), layer.b_ff1.$slice().expect("standard layout")));
            out.push((p("w_ff2"), layer.w_ff2.$slice().expect("standard layout")));
            out.push((p("b_ff2"), layer.b_ff2.$slice().expect("standard layout")));
        }
        out.push(("lnf_gain".to_string(), $self.lnf_gain.$slice().expect("standard layout")));
        out.push(("lnf_bias".to_string(), $self.lnf_bias.$slice().expect("standard layout")));
        out.push(("head_w".to_string(), $self.head_w.$slice().expect("standard layout")));
        out.push(("head_b".to_string(), $self.head_b.$slice().expect("standard layout")));
        out
    }};
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let layer = LayerParams {
            ln1_gain: Array1::zeros(d),
            ln1_bias: Array1::zeros(d),
            w_qkv: Array2::zeros((d, 3 * d)),
            b_qkv: Array1::zeros(3 * d),
            w_out: Array2::zeros((d, d)),
            b_out: Array1::zeros(d),
            ln2_gain: Array1::zeros(d),
            ln2_bias: Array1::zeros(d),
            w_ff1: Array2::zeros((d, cfg.d_ff)),
            b_ff1: Array1::zeros(cfg.d_ff),
            w_ff2: Array2::zeros((cfg.d_ff, d)),
            b_ff2: Array1::zeros(d),
        };
        Self {
            input_proj: Array2::zeros((cfg.input_dim(), d)),
            node_emb: Array2::zeros((cfg.n_nodes, d)),
            customer_emb: Array2::zeros((cfg.n_customers, d)),
            pos_emb: Array2::zeros((cfg.max_len + 1, d)),
            bos: Array1::zeros(d),
            layers: vec![layer; cfg.layers],
            lnf_gain: Array1::zeros(d),
            lnf_bias: Array1::zeros(d),
            head_w: Array2::zeros((d, cfg.output_dim())),
            head_b: Array1::zeros(cfg.output_dim()),
        }
    }

    /// Small-normal weights, unit layer-norm gains, zero biases. Residual output
    /// projections are scaled down with depth.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(cfg);
        let std = 0.02;
        let resid_std = std / (2.0 * cfg.layers.max(1) as f64).sqrt();
        let mut fill = |a: &mut [f64], s: f64| {
            let n = Normal::new(0.0, s).expect("positive std");
            a.iter_mut().for_each(|x| *x = n.sample(rng));
        };
        fill(p.input_proj.as_slice_mut().unwrap(), std);
        fill(p.node_emb.as_slice_mut().unwrap(), std);
        fill(p.customer_emb.as_slice_mut().unwrap(), std);
        fill(p.pos_emb.as_slice_mut().unwrap(), std);
        fill(p.bos.as_slice_mut().unwrap(), std);
        for layer in &mut p.layers {
            layer.ln1_gain.fill(1.0);
            layer.ln2_gain.fill(1.0);
            fill(layer.w_qkv.as_slice_mut().unwrap(), std);
            fill(layer.w_out.as_slice_mut().unwrap(), resid_std);
            fill(layer.w_ff1.as_slice_mut().unwrap(), std);
            fill(layer.w_ff2.as_slice_mut().unwrap(), resid_std);
        }
        p.lnf_gain.fill(1.0);
        fill(p.head_w.as_slice_mut().unwrap(), std);
        p
    }

    /// Every tensor as `(name, flat row-major slice)`, in the order of
    /// [`ModelConfig::parameter_shapes`].
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        named_slices!(self, as_slice, iter)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        named_slices!(self, as_slice_mut, iter_mut)
    }

    pub fn for_each(&self, mut f: impl FnMut(String, &[f64])) {
        for (n, s) in self.tensors() {
            f(n, s);
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(String, &mut [f64])) {
        for (n, s) in self.tensors_mut() {
            f(n, s);
        }
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, s| n += s.len());
        n
    }

    pub fn fill(&mut self, value: f64) {
        self.for_each_mut(|_, s| s.fill(value));
    }

    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        let mut n = 0.0;
        self.for_each(|_, s| n += s.iter().map(|x| x * x).sum::<f64>());
        n
    }

    pub fn scale(&mut self, factor: f64) {
        self.for_each_mut(|_, s| s.iter_mut().for_each(|x| *x *= factor));
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, s| ok &= s.iter().all(|x| x.is_finite()));
        ok
    }
}
