use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::TIME_ONE_HOT;

/// Shape of the causal decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Longest input sequence (in minutes) the model accepts.
    pub max_len: usize,
    pub n_features: usize,
    pub n_bins: usize,
    pub n_nodes: usize,
    pub n_customers: usize,
    pub dropout: f64,
}

// Bounds keep checkpoint decoding from attempting absurd allocations.
const MAX_DIM: usize = 1 << 16;
const MAX_VOCAB: usize = 1 << 22;

impl ModelConfig {
    /// 4 layers, 4 heads, width 128, feed-forward 512, 512-minute context.
    pub fn base(n_features: usize, n_nodes: usize, n_customers: usize) -> Self {
        Self {
            layers: 4,
            heads: 4,
            d_model: 128,
            d_ff: 512,
            max_len: 512,
            n_features,
            n_bins: 10,
            n_nodes,
            n_customers,
            dropout: 0.3,
        }
    }

    /// Reduced width and depth for desk-scale runs.
    pub fn small(n_features: usize, n_nodes: usize, n_customers: usize) -> Self {
        Self {
            layers: 2,
            heads: 2,
            d_model: 48,
            d_ff: 192,
            dropout: 0.1,
            ..Self::base(n_features, n_nodes, n_customers)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.max_len == 0 || self.d_ff == 0 || self.n_features == 0 {
            return fail("max_len, d_ff and n_features must be positive".into());
        }
        if !(2..=256).contains(&self.n_bins) {
            return fail(format!("n_bins {} outside 2..=256", self.n_bins));
        }
        if self.n_nodes == 0 || self.n_customers == 0 {
            return fail("node and customer vocabularies must be non-empty".into());
        }
        if [self.layers, self.d_model, self.d_ff, self.max_len, self.n_features]
            .iter()
            .any(|&x| x > MAX_DIM)
            || self.n_nodes > MAX_VOCAB
            || self.n_customers > MAX_VOCAB
        {
            return fail("model dimensions out of range".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// One-hot feature tokens followed by the one-hot time block.
    pub fn input_dim(&self) -> usize {
        self.n_features * self.n_bins + TIME_ONE_HOT
    }

    pub fn output_dim(&self) -> usize {
        self.n_features * self.n_bins
    }

    /// Named parameter tensors and their shapes, in checkpoint order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = vec![
            ("input_proj".to_string(), vec![self.input_dim(), d]),
            ("node_emb".to_string(), vec![self.n_nodes, d]),
            ("customer_emb".to_string(), vec![self.n_customers, d]),
            ("pos_emb".to_string(), vec![self.max_len + 1, d]),
            ("bos".to_string(), vec![d]),
        ];
        for l in 0..self.layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            out.extend([
                (p("ln1_gain"), vec![d]),
                (p("ln1_bias"), vec![d]),
                (p("w_qkv"), vec![d, 3 * d]),
                (p("b_qkv"), vec![3 * d]),
                (p("w_out"), vec![d, d]),
                (p("b_out"), vec![d]),
                (p("ln2_gain"), vec![d]),
                (p("ln2_bias"), vec![d]),
                (p("w_ff1"), vec![d, self.d_ff]),
                (p("b_ff1"), vec![self.d_ff]),
                (p("w_ff2"), vec![self.d_ff, d]),
                (p("b_ff2"), vec![d]),
            ]);
        }
        out.extend([
            ("lnf_gain".to_string(), vec![d]),
            ("lnf_bias".to_string(), vec![d]),
            ("head_w".to_string(), vec![d, self.output_dim()]),
            ("head_b".to_string(), vec![self.output_dim()]),
        ]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}
