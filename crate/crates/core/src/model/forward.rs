//! Causal decoder: embedding, pre-norm attention blocks, per-feature categorical head.
//!
//! Internally every sequence is prefixed with a learned begin-of-sequence position, so
//! position `p` holds minute `p` (1-based) and the output at position `p` predicts minute
//! `p + 1`. Teacher-forced training feeds minutes `1..T-1` and scores all `T` minutes.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::ops::{self, LayerNormTrace};
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::time::TimeFeatures;

/// Model input for one minute of one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInput<'a> {
    pub tokens: &'a [u8],
    pub time: TimeFeatures,
    pub node: usize,
    pub customer: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout enabled, masks drawn from the given seed.
    Train { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// `n_features x n_bins` logits for the next minute.
    pub logits: Array2<f64>,
    pub hidden: Array1<f64>,
}

impl StepOutput {
    /// Per-feature softmax of the logits.
    pub fn probabilities(&self) -> Array2<f64> {
        let mut p = self.logits.clone();
        for mut row in p.rows_mut() {
            let l = ops::log_softmax(row.view());
            row.assign(&l.mapv(f64::exp));
        }
        p
    }
}

/// Summed negative log-likelihood and argmax hits over scored (minute, feature) pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub nll_sum: f64,
    pub correct: u64,
    pub count: u64,
}

impl LossStats {
    pub fn merge(&mut self, other: &LossStats) {
        self.nll_sum += other.nll_sum;
        self.correct += other.correct;
        self.count += other.count;
    }

    pub fn mean_loss(&self) -> f64 {
        self.nll_sum / self.count.max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count.max(1) as f64
    }
}

struct LayerTrace {
    ln1: LayerNormTrace,
    normed1: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
    attn_mask: Option<Array2<f64>>,
    ln2: LayerNormTrace,
    normed2: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
    ff_mask: Option<Array2<f64>>,
}

struct Trace {
    emb_mask: Option<Array2<f64>>,
    layers: Vec<LayerTrace>,
    lnf: LayerNormTrace,
    hidden: Array2<f64>,
    logits: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Causal softmax in place: row `i` attends to columns `0..=i`.
fn causal_softmax(scores: &mut Array2<f64>) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let max = row.slice(s![..=i]).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.slice_mut(s![..=i]) {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.slice_mut(s![..=i]).mapv_inplace(|v| v / sum);
        row.slice_mut(s![i + 1..]).fill(0.0);
    }
}

fn add_matmul(out: &mut Array2<f64>, a: ArrayView2<f64>, b: ArrayView2<f64>) {
    general_mat_mul(1.0, &a, &b, 1.0, out);
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&config, &mut rng);
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let shapes = config.parameter_shapes();
        let tensors = params.tensors();
        if shapes.len() != tensors.len()
            || shapes
                .iter()
                .zip(&tensors)
                .any(|((n, s), (m, t))| n != m || s.iter().product::<usize>() != t.len())
        {
            return Err(Error::Shape("parameters do not match configuration".into()));
        }
        Ok(Self { config, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    fn check_step(&self, step: &StepInput) -> Result<()> {
        let c = &self.config;
        if step.tokens.len() != c.n_features {
            return Err(Error::Shape(format!(
                "step has {} feature tokens, model expects {}",
                step.tokens.len(),
                c.n_features
            )));
        }
        if let Some(&t) = step.tokens.iter().find(|&&t| t as usize >= c.n_bins) {
            return Err(Error::OutOfVocabulary {
                kind: "token",
                index: t as usize,
                size: c.n_bins,
            });
        }
        if step.node >= c.n_nodes {
            return Err(Error::OutOfVocabulary {
                kind: "node",
                index: step.node,
                size: c.n_nodes,
            });
        }
        if step.customer >= c.n_customers {
            return Err(Error::OutOfVocabulary {
                kind: "customer",
                index: step.customer,
                size: c.n_customers,
            });
        }
        Ok(())
    }

    /// Rows of the input projection selected by a step's one-hot encoding.
    fn active_rows(&self, step: &StepInput) -> impl Iterator<Item = usize> + '_ {
        let n_bins = self.config.n_bins;
        let time_base = self.config.n_features * n_bins;
        let tokens: Vec<usize> = step
            .tokens
            .iter()
            .enumerate()
            .map(|(f, &y)| f * n_bins + y as usize)
            .collect();
        tokens
            .into_iter()
            .chain(step.time.one_hot_indices().map(|i| time_base + i))
    }

    /// Projection of the one-hot step encoding plus node and customer embeddings.
    pub fn embed_step(&self, step: &StepInput) -> Result<Array1<f64>> {
        self.check_step(step)?;
        let p = &self.params;
        let mut e = &p.node_emb.row(step.node) + &p.customer_emb.row(step.customer);
        for r in self.active_rows(step) {
            e += &p.input_proj.row(r);
        }
        Ok(e)
    }

    /// Runs `[BOS, steps...]`. `anchor` supplies the node and customer of the BOS position.
    fn run(&self, anchor: &StepInput, steps: &[StepInput], mode: Mode) -> Result<Trace> {
        let c = &self.config;
        let p = &self.params;
        if steps.len() > c.max_len {
            return Err(Error::SequenceTooLong {
                len: steps.len(),
                max: c.max_len,
            });
        }
        self.check_step(anchor)?;
        let n = steps.len() + 1;
        let d = c.d_model;
        let mut rng = match mode {
            Mode::Train { seed } if c.dropout > 0.0 => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };

        let mut x = Array2::<f64>::zeros((n, d));
        {
            let mut row = x.row_mut(0);
            row += &p.bos;
            row += &p.node_emb.row(anchor.node);
            row += &p.customer_emb.row(anchor.customer);
        }
        for (i, step) in steps.iter().enumerate() {
            x.row_mut(i + 1).assign(&self.embed_step(step)?);
        }
        x += &p.pos_emb.slice(s![..n, ..]);
        let emb_mask = rng.as_mut().map(|r| ops::dropout_mask((n, d), c.dropout, r));
        if let Some(m) = &emb_mask {
            x *= m;
        }

        let heads = c.heads;
        let dh = c.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut layers = Vec::with_capacity(c.layers);
        for lp in &p.layers {
            let (normed1, ln1) = ops::layer_norm(&x, &lp.ln1_gain, &lp.ln1_bias);
            let qkv = normed1.dot(&lp.w_qkv) + &lp.b_qkv;
            let mut concat = Array2::<f64>::zeros((n, d));
            let mut probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
                let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut scores = q.dot(&k.t());
                scores *= scale;
                causal_softmax(&mut scores);
                concat
                    .slice_mut(s![.., h * dh..(h + 1) * dh])
                    .assign(&scores.dot(&v));
                probs.push(scores);
            }
            let mut attn = concat.dot(&lp.w_out) + &lp.b_out;
            let attn_mask = rng.as_mut().map(|r| ops::dropout_mask((n, d), c.dropout, r));
            if let Some(m) = &attn_mask {
                attn *= m;
            }
            x += &attn;

            let (normed2, ln2) = ops::layer_norm(&x, &lp.ln2_gain, &lp.ln2_bias);
            let ff_pre = normed2.dot(&lp.w_ff1) + &lp.b_ff1;
            let ff_act = ff_pre.mapv(ops::gelu);
            let mut ff = ff_act.dot(&lp.w_ff2) + &lp.b_ff2;
            let ff_mask = rng.as_mut().map(|r| ops::dropout_mask((n, d), c.dropout, r));
            if let Some(m) = &ff_mask {
                ff *= m;
            }
            x += &ff;
            layers.push(LayerTrace {
                ln1,
                normed1,
                qkv,
                probs,
                concat,
                attn_mask,
                ln2,
                normed2,
                ff_pre,
                ff_act,
                ff_mask,
            });
        }
        let (hidden, lnf) = ops::layer_norm(&x, &p.lnf_gain, &p.lnf_bias);
        let logits = hidden.dot(&p.head_w) + &p.head_b;
        Ok(Trace {
            emb_mask,
            layers,
            lnf,
            hidden,
            logits,
        })
    }

    fn backward(
        &self,
        trace: &Trace,
        anchor: &StepInput,
        steps: &[StepInput],
        dlogits: &Array2<f64>,
        g: &mut ModelParams,
    ) {
        let c = &self.config;
        let p = &self.params;
        let d = c.d_model;
        let dh = c.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        add_matmul(&mut g.head_w, trace.hidden.t(), dlogits.view());
        g.head_b += &dlogits.sum_axis(Axis(0));
        let dhidden = dlogits.dot(&p.head_w.t());
        let mut dx = ops::layer_norm_backward(
            &dhidden,
            &trace.lnf,
            &p.lnf_gain,
            &mut g.lnf_gain,
            &mut g.lnf_bias,
        );

        for ((lp, gl), lt) in p
            .layers
            .iter()
            .zip(g.layers.iter_mut())
            .zip(&trace.layers)
            .rev()
        {
            let mut dff = dx.clone();
            if let Some(m) = &lt.ff_mask {
                dff *= m;
            }
            add_matmul(&mut gl.w_ff2, lt.ff_act.t(), dff.view());
            gl.b_ff2 += &dff.sum_axis(Axis(0));
            let mut dpre = dff.dot(&lp.w_ff2.t());
            dpre.zip_mut_with(&lt.ff_pre, |g, &x| *g *= ops::gelu_grad(x));
            add_matmul(&mut gl.w_ff1, lt.normed2.t(), dpre.view());
            gl.b_ff1 += &dpre.sum_axis(Axis(0));
            let dnormed2 = dpre.dot(&lp.w_ff1.t());
            dx += &ops::layer_norm_backward(
                &dnormed2,
                &lt.ln2,
                &lp.ln2_gain,
                &mut gl.ln2_gain,
                &mut gl.ln2_bias,
            );

            let mut dattn = dx.clone();
            if let Some(m) = &lt.attn_mask {
                dattn *= m;
            }
            add_matmul(&mut gl.w_out, lt.concat.t(), dattn.view());
            gl.b_out += &dattn.sum_axis(Axis(0));
            let dconcat = dattn.dot(&lp.w_out.t());
            let mut dqkv = Array2::<f64>::zeros(lt.qkv.raw_dim());
            for (h, probs) in lt.probs.iter().enumerate() {
                let cols = h * dh..(h + 1) * dh;
                let q = lt.qkv.slice(s![.., cols.clone()]);
                let k = lt.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
                let v = lt.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let dout = dconcat.slice(s![.., cols.clone()]);
                let mut dscores = dout.dot(&v.t());
                for (mut ds, pr) in dscores.rows_mut().into_iter().zip(probs.rows()) {
                    let dot: f64 = ds.iter().zip(pr.iter()).map(|(a, b)| a * b).sum();
                    ds.zip_mut_with(&pr, |g, &pv| *g = pv * (*g - dot) * scale);
                }
                dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh])
                    .assign(&probs.t().dot(&dout));
                dqkv.slice_mut(s![.., cols]).assign(&dscores.dot(&k));
                dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh])
                    .assign(&dscores.t().dot(&q));
            }
            add_matmul(&mut gl.w_qkv, lt.normed1.t(), dqkv.view());
            gl.b_qkv += &dqkv.sum_axis(Axis(0));
            let dnormed1 = dqkv.dot(&lp.w_qkv.t());
            dx += &ops::layer_norm_backward(
                &dnormed1,
                &lt.ln1,
                &lp.ln1_gain,
                &mut gl.ln1_gain,
                &mut gl.ln1_bias,
            );
        }

        if let Some(m) = &trace.emb_mask {
            dx *= m;
        }
        let n = dx.nrows();
        {
            let mut pos = g.pos_emb.slice_mut(s![..n, ..]);
            pos += &dx;
        }
        let mut rows = dx.rows().into_iter();
        let first = rows.next().expect("BOS row");
        g.bos += &first;
        {
            let mut r = g.node_emb.row_mut(anchor.node);
            r += &first;
        }
        {
            let mut r = g.customer_emb.row_mut(anchor.customer);
            r += &first;
        }
        for (step, de) in steps.iter().zip(rows) {
            {
                let mut r = g.node_emb.row_mut(step.node);
                r += &de;
            }
            {
                let mut r = g.customer_emb.row_mut(step.customer);
                r += &de;
            }
            for idx in self.active_rows(step) {
                let mut r = g.input_proj.row_mut(idx);
                r += &de;
            }
        }
    }

    /// One output per input minute; output `t` parameterizes the distribution of minute
    /// `t + 1` and depends only on minutes `1..=t`.
    pub fn forward(&self, seq: &[StepInput], mode: Mode) -> Result<Vec<StepOutput>> {
        let anchor = seq.first().ok_or(Error::Empty("empty input sequence"))?;
        let trace = self.run(anchor, seq, mode)?;
        let (f, nb) = (self.config.n_features, self.config.n_bins);
        Ok((1..=seq.len())
            .map(|p| StepOutput {
                logits: trace
                    .logits
                    .row(p)
                    .to_owned()
                    .into_shape_with_order((f, nb))
                    .expect("head width"),
                hidden: trace.hidden.row(p).to_owned(),
            })
            .collect())
    }

    /// Final-layer (post-norm, pre-head) states, `T x d`, in eval mode.
    pub fn hidden_states(&self, seq: &[StepInput]) -> Result<Array2<f64>> {
        let anchor = seq.first().ok_or(Error::Empty("empty input sequence"))?;
        let trace = self.run(anchor, seq, Mode::Eval)?;
        Ok(trace.hidden.slice(s![1.., ..]).to_owned())
    }

    /// Teacher-forced negative log-likelihood of every minute and feature of `seq`.
    pub fn sequence_loss(&self, seq: &[StepInput]) -> Result<LossStats> {
        let anchor = seq.first().ok_or(Error::Empty("empty input sequence"))?;
        let trace = self.run(anchor, &seq[..seq.len() - 1], Mode::Eval)?;
        Ok(self.score(&trace.logits, seq, None))
    }

    /// Like [`Model::sequence_loss`], and adds `grad_scale * d(nll_sum)/d(params)` into `grads`.
    pub fn loss_and_grad(
        &self,
        seq: &[StepInput],
        mode: Mode,
        grad_scale: f64,
        grads: &mut ModelParams,
    ) -> Result<LossStats> {
        let anchor = seq.first().ok_or(Error::Empty("empty input sequence"))?;
        let inputs = &seq[..seq.len() - 1];
        let trace = self.run(anchor, inputs, mode)?;
        let mut dlogits = Array2::zeros(trace.logits.raw_dim());
        let stats = self.score(&trace.logits, seq, Some((&mut dlogits, grad_scale)));
        self.backward(&trace, anchor, inputs, &dlogits, grads);
        Ok(stats)
    }

    fn score(
        &self,
        logits: &Array2<f64>,
        targets: &[StepInput],
        mut grad: Option<(&mut Array2<f64>, f64)>,
    ) -> LossStats {
        let nb = self.config.n_bins;
        let mut stats = LossStats::default();
        for (p, target) in targets.iter().enumerate() {
            for (f, &y) in target.tokens.iter().enumerate() {
                let cols = f * nb..(f + 1) * nb;
                let row = logits.slice(s![p, cols.clone()]);
                let logp = ops::log_softmax(row);
                let y = y as usize;
                stats.nll_sum -= logp[y];
                stats.correct += u64::from(ops::argmax(row) == y);
                stats.count += 1;
                if let Some((dl, scale)) = grad.as_mut() {
                    let mut out = dl.slice_mut(s![p, cols]);
                    for (j, o) in out.iter_mut().enumerate() {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        *o = (logp[j].exp() - onehot) * *scale;
                    }
                }
            }
        }
        stats
    }
}

/// Mean negative log-likelihood of `targets[t]` under `outputs[t]`, averaged over steps and
/// features.
pub fn loss(outputs: &[StepOutput], targets: &[&[u8]]) -> Result<f64> {
    if outputs.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} outputs for {} targets",
            outputs.len(),
            targets.len()
        )));
    }
    let mut stats = LossStats::default();
    for (o, y) in outputs.iter().zip(targets) {
        if o.logits.nrows() != y.len() {
            return Err(Error::Shape("target width differs from feature count".into()));
        }
        for (row, &t) in o.logits.rows().into_iter().zip(y.iter()) {
            let t = t as usize;
            if t >= row.len() {
                return Err(Error::OutOfVocabulary {
                    kind: "token",
                    index: t,
                    size: row.len(),
                });
            }
            stats.nll_sum -= ops::log_softmax(row)[t];
            stats.count += 1;
        }
    }
    Ok(stats.mean_loss())
}
