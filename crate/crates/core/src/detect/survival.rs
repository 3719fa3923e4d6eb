use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::examples::DetectionExample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::TokenTensor;
use crate::train::unit_steps;

pub const HEAD_HIDDEN: usize = 512;

/// Per-minute hazard from a backbone state: `d -> hidden (ReLU) -> 1 (logistic)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalHead {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

/// Cached backbone states of one window and its anomaly marks.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadExample {
    pub hidden: Array2<f64>,
    pub marks: Vec<bool>,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Survival from per-minute hazard logits: `s_t = prod_{i <= t} (1 - sigmoid(z_i))`, computed in
/// log space and kept strictly positive.
pub fn survival_from_logits(logits: &[f64]) -> Vec<f64> {
    let mut log_s = 0.0;
    logits
        .iter()
        .map(|&z| {
            log_s -= softplus(z);
            log_s.exp().max(f64::MIN_POSITIVE)
        })
        .collect()
}

impl SurvivalHead {
    pub fn new(d_model: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let n1 = Normal::new(0.0, (2.0 / d_model as f64).sqrt()).expect("positive std");
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("positive std");
        Self {
            w1: Array2::from_shape_simple_fn((d_model, hidden), || n1.sample(rng)),
            b1: Array1::zeros(hidden),
            w2: Array1::from_shape_simple_fn(hidden, || n2.sample(rng)),
            b2: 0.0,
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.len()),
            w2: Array1::zeros(self.w2.len()),
            b2: 0.0,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w1.nrows()
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    /// Hazard logits, one per row of `hidden`.
    pub fn logits(&self, hidden: &Array2<f64>) -> Array1<f64> {
        let a = (hidden.dot(&self.w1) + &self.b1).mapv(|x| x.max(0.0));
        a.dot(&self.w2) + self.b2
    }

    pub fn hazards(&self, hidden: &Array2<f64>) -> Array1<f64> {
        self.logits(hidden).mapv(sigmoid)
    }

    pub fn survival(&self, hidden: &Array2<f64>) -> Vec<f64> {
        survival_from_logits(self.logits(hidden).as_slice().expect("contiguous"))
    }

    /// Mean per-minute binary cross-entropy of the hazards against the marks, and its
    /// gradient.
    pub fn loss_and_grad(&self, batch: &[HeadExample]) -> (f64, SurvivalHead) {
        let minutes: usize = batch.iter().map(|e| e.marks.len()).sum();
        let scale = 1.0 / minutes.max(1) as f64;
        let mut g = self.zeros_like();
        let mut loss = 0.0;
        for ex in batch {
            let pre = ex.hidden.dot(&self.w1) + &self.b1;
            let a = pre.mapv(|x| x.max(0.0));
            let z = a.dot(&self.w2) + self.b2;
            let mut dz = Array1::zeros(z.len());
            for (t, (&zt, &y)) in z.iter().zip(&ex.marks).enumerate() {
                let y = if y { 1.0 } else { 0.0 };
                loss += (softplus(zt) - y * zt) * scale;
                dz[t] = (sigmoid(zt) - y) * scale;
            }
            g.b2 += dz.sum();
            g.w2 += &a.t().dot(&dz);
            let mut dpre = dz.insert_axis(Axis(1)).dot(&self.w2.view().insert_axis(Axis(0)));
            dpre.zip_mut_with(&pre, |d, &p| {
                if p <= 0.0 {
                    *d = 0.0
                }
            });
            g.w1 += &ex.hidden.t().dot(&dpre);
            g.b1 += &dpre.sum_axis(Axis(0));
        }
        (loss, g)
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_slice_mut().expect("contiguous"),
            self.b1.as_slice_mut().expect("contiguous"),
            self.w2.as_slice_mut().expect("contiguous"),
            std::slice::from_mut(&mut self.b2),
        ]
    }

    fn all_finite(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(&self.w2).all(|x| x.is_finite()) && self.b2.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            learning_rate: 1e-3,
            hidden: HEAD_HIDDEN,
            seed: 0,
        }
    }
}

/// Final-layer backbone states for the window minutes of each example.
///
/// `node_map` gives the embedding node of each tensor node and `customers` the customer of
/// each embedding node.
pub fn window_states(
    model: &Model,
    tokens: &TokenTensor,
    examples: &[DetectionExample],
    node_map: &[usize],
    customers: &[usize],
) -> Result<Vec<Array2<f64>>> {
    examples
        .par_iter()
        .map(|ex| {
            let mut start = ex.history_start;
            let end = ex.window_start + ex.window_len;
            start = start.max(end.saturating_sub(model.config.max_len));
            let model_node = node_map[ex.node];
            let steps = unit_steps(tokens, ex.node, start, end - start, model_node, customers[model_node]);
            let h = model.hidden_states(&steps)?;
            Ok(h.slice(ndarray::s![h.nrows() - ex.window_len.., ..]).to_owned())
        })
        .collect()
}

/// Fits a fresh head on cached backbone states with Adam; the backbone is not touched.
pub fn finetune(
    examples: &[HeadExample],
    config: &FinetuneConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<SurvivalHead> {
    let d = examples
        .first()
        .ok_or(Error::Empty("no fine-tuning examples"))?
        .hidden
        .ncols();
    if examples.iter().any(|e| e.hidden.ncols() != d || e.hidden.nrows() != e.marks.len()) {
        return Err(Error::Shape("inconsistent fine-tuning examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut head = SurvivalHead::new(d, config.hidden, &mut rng);
    // Start from the base rate of anomalous minutes.
    let marks: Vec<bool> = examples.iter().flat_map(|e| e.marks.iter().copied()).collect();
    let rate = (marks.iter().filter(|&&m| m).count() as f64 / marks.len().max(1) as f64).clamp(1e-4, 1.0 - 1e-4);
    head.b2 = (rate / (1.0 - rate)).ln();
    let mut m = head.zeros_like();
    let mut v = head.zeros_like();
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 1..=config.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<HeadExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let (loss, mut g) = head.loss_and_grad(&batch);
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("fine-tuning epoch {epoch}"),
                });
            }
            epoch_loss += loss * chunk.len() as f64;
            step += 1;
            let bc1 = 1.0 - b1.powi(step);
            let bc2 = 1.0 - b2.powi(step);
            for ((p, gr), (mm, vv)) in head
                .slices_mut()
                .into_iter()
                .zip(g.slices_mut())
                .zip(m.slices_mut().into_iter().zip(v.slices_mut()))
            {
                for i in 0..p.len() {
                    mm[i] = b1 * mm[i] + (1.0 - b1) * gr[i];
                    vv[i] = b2 * vv[i] + (1.0 - b2) * gr[i] * gr[i];
                    p[i] -= config.learning_rate * (mm[i] / bc1) / ((vv[i] / bc2).sqrt() + eps);
                }
            }
        }
        if !head.all_finite() {
            return Err(Error::NonFinite {
                context: format!("fine-tuning epoch {epoch}"),
            });
        }
        on_epoch(epoch, epoch_loss / examples.len() as f64);
    }
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, proptest};

    fn toy(seed: u64) -> (SurvivalHead, Vec<HeadExample>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = SurvivalHead::new(4, 6, &mut rng);
        let ex = (0..3)
            .map(|k| HeadExample {
                hidden: Array2::from_shape_simple_fn((5, 4), || rng.gen_range(-1.0..1.0)),
                marks: (0..5).map(|t| k > 0 && t >= 2 + k).collect(),
            })
            .collect();
        (head, ex)
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let (head, ex) = toy(1);
        let (_, mut g) = head.loss_and_grad(&ex);
        let h = 1e-6;
        let analytic: Vec<Vec<f64>> = g.slices_mut().iter().map(|s| s.to_vec()).collect();
        for (k, a) in analytic.iter().enumerate() {
            let (mut diff, mut norm) = (0.0f64, 0.0f64);
            for i in 0..a.len() {
                let mut p = head.clone();
                p.slices_mut()[k][i] += h;
                let mut q = head.clone();
                q.slices_mut()[k][i] -= h;
                let fd = (p.loss_and_grad(&ex).0 - q.loss_and_grad(&ex).0) / (2.0 * h);
                diff += (fd - a[i]).powi(2);
                norm += fd.powi(2) + a[i].powi(2);
            }
            assert!(diff.sqrt() / norm.sqrt().max(1e-12) < 1e-4, "tensor {k}");
        }
    }

    #[test]
    fn default_head_size() {
        let head = SurvivalHead::new(128, HEAD_HIDDEN, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(head.parameter_count(), 66_561);
    }

    #[test]
    fn fitting_follows_marks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let normal = HeadExample {
            hidden: Array2::from_shape_simple_fn((10, 4), || rng.gen_range(-1.0..0.0)),
            marks: vec![false; 10],
        };
        let attack = HeadExample {
            hidden: Array2::from_shape_simple_fn((10, 4), || rng.gen_range(0.5..1.5)),
            marks: vec![true; 10],
        };
        let cfg = FinetuneConfig {
            epochs: 1500,
            hidden: 16,
            ..FinetuneConfig::default()
        };
        let head = finetune(&[normal.clone(), attack.clone()], &cfg, |_, _| {}).unwrap();
        let sn = head.survival(&normal.hidden);
        assert!(sn[9] > 0.9, "{sn:?}");
        let s = head.survival(&attack.hidden);
        assert!(s[0] < 0.2 && s[9] < 1e-3);
    }

    proptest! {
        #[test]
        fn survival_is_non_increasing(logits in prop::collection::vec(-50.0f64..50.0, 1..40)) {
            let s = survival_from_logits(&logits);
            prop_assert!(s.iter().all(|&x| x > 0.0 && x <= 1.0));
            prop_assert!(s.windows(2).all(|w| w[1] <= w[0]));
        }
    }
}
