//! Per-(node, feature) quantile binning of raw traffic counts.
//!
//! Category 0 is reserved for zero traffic. Positive values are split into up to `N - 1`
//! bins holding roughly equal numbers of training observations; cutoffs are found on the
//! sorted training series, with a refinement pass that skips over repeated values so the
//! cutoffs stay strictly increasing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RawTensor, Tensor3, TokenTensor};

pub const DEFAULT_BINS: usize = 10;

/// Cutoffs `c_0 = 0 < c_1 < ... < c_{effective-1}` of one (node, feature).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BinCutoffs(Vec<f64>);

impl BinCutoffs {
    pub fn new(cutoffs: Vec<f64>, n_bins: usize) -> Result<Self> {
        let ok = !cutoffs.is_empty()
            && cutoffs.len() <= n_bins
            && cutoffs[0] == 0.0
            && cutoffs.iter().all(|c| c.is_finite())
            && cutoffs.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::format(
                "bin cutoffs",
                format!("{cutoffs:?} is not 0 followed by at most {} increasing values", n_bins - 1),
            ));
        }
        Ok(Self(cutoffs))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Number of categories the cutoffs can emit for training data.
    pub fn effective_bins(&self) -> usize {
        self.0.len()
    }
}

fn round_half_away(x: f64) -> usize {
    // f64::round rounds half away from zero.
    x.round() as usize
}

/// Fits cutoffs to one training series.
pub fn fit_bins(series: &[f64], n_bins: usize) -> Result<BinCutoffs> {
    if n_bins < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 bins, got {n_bins}")));
    }
    if series.is_empty() {
        return Err(Error::Empty("cannot fit bins to an empty series"));
    }
    if let Some(x) = series.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::InvalidConfig(format!("series value {x} is not a non-negative count")));
    }
    let mut xs = series.to_vec();
    xs.sort_by(f64::total_cmp);
    let t = xs.len();
    // 1-based order statistic; indices past the end clamp to the maximum.
    let order = |i: usize| xs[i.min(t) - 1];

    let Some(first_positive) = xs.iter().position(|&x| x > 0.0) else {
        return Ok(BinCutoffs(vec![0.0]));
    };
    let k = first_positive + 1;
    let step = round_half_away((t - (k - 1)) as f64 / (n_bins - 1) as f64).max(1);
    // tentative[j - 1] holds the tentative cutoff for bin j.
    let mut tentative: Vec<f64> = (1..n_bins).map(|i| order(k - 1 + i * step)).collect();

    let mut cutoffs = Vec::with_capacity(n_bins);
    cutoffs.push(0.0);
    cutoffs.push(tentative[0]);
    for j in 2..n_bins {
        let prev = cutoffs[j - 1];
        let candidate = tentative[j - 1];
        if candidate > prev {
            cutoffs.push(candidate);
            continue;
        }
        // Repeated value: jump to the first value above the previous cutoff and re-space
        // the next tentative cutoff over what remains.
        let m = xs.partition_point(|&x| x <= prev) + 1;
        if m > t {
            break;
        }
        cutoffs.push(order(m));
        if j + 1 < n_bins {
            let rest = round_half_away((t - (m - 1)) as f64 / (n_bins - j) as f64).max(1);
            tentative[j] = order(m - 1 + rest);
        }
    }
    Ok(BinCutoffs(cutoffs))
}

/// Category of a raw value. Zero maps to 0; `c_{i-1} < x <= c_i` maps to `i`; values above
/// the last cutoff clamp to the top fitted category. Positive values never map to 0.
pub fn discretize_value(x: f64, cutoffs: &BinCutoffs) -> u8 {
    if x <= 0.0 {
        return 0;
    }
    let c = cutoffs.values();
    if c.len() == 1 {
        return 1;
    }
    let i = c[1..].partition_point(|&cut| cut < x) + 1;
    i.min(c.len() - 1) as u8
}

/// Five-number node summary used to match unseen nodes to training nodes:
/// `[min, max, p25, p50, p75]` of standardized features, averaged over features.
pub type NodeSummary = [f64; 5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discretizer {
    pub n_bins: usize,
    pub schema_hash: String,
    /// `cutoffs[node][feature]`.
    pub cutoffs: Vec<Vec<BinCutoffs>>,
    pub summaries: Vec<NodeSummary>,
    #[serde(default)]
    pub config_digest: String,
}

impl Discretizer {
    pub fn nodes(&self) -> usize {
        self.cutoffs.len()
    }

    pub fn features(&self) -> usize {
        self.cutoffs.first().map_or(0, Vec::len)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    /// Parses and validates a persisted discretizer.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Wire {
            n_bins: usize,
            schema_hash: String,
            cutoffs: Vec<Vec<Vec<f64>>>,
            summaries: Vec<NodeSummary>,
            #[serde(default)]
            config_digest: String,
        }
        let w: Wire = serde_json::from_slice(bytes)?;
        if !(2..=256).contains(&w.n_bins) {
            return Err(Error::format("discretizer", format!("n_bins {} outside 2..=256", w.n_bins)));
        }
        if w.summaries.len() != w.cutoffs.len() {
            return Err(Error::format("discretizer", "one summary per node required"));
        }
        let features = w.cutoffs.first().map_or(0, Vec::len);
        let mut cutoffs = Vec::with_capacity(w.cutoffs.len());
        for node in w.cutoffs {
            if node.len() != features {
                return Err(Error::format("discretizer", "ragged feature lists"));
            }
            cutoffs.push(
                node.into_iter()
                    .map(|c| BinCutoffs::new(c, w.n_bins))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        if w.summaries.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::format("discretizer", "non-finite node summary"));
        }
        Ok(Self {
            n_bins: w.n_bins,
            schema_hash: w.schema_hash,
            cutoffs,
            summaries: w.summaries,
            config_digest: w.config_digest,
        })
    }
}

/// Fits cutoffs for every (node, feature) of a training tensor.
pub fn fit_all(tensor: &RawTensor, n_bins: usize) -> Result<Discretizer> {
    if tensor.minutes == 0 {
        return Err(Error::Empty("cannot fit a discretizer on zero minutes"));
    }
    let per_node: Vec<(Vec<BinCutoffs>, NodeSummary)> = (0..tensor.nodes)
        .into_par_iter()
        .map(|v| {
            let cutoffs = (0..tensor.features)
                .map(|f| fit_bins(&tensor.series(v, f), n_bins))
                .collect::<Result<Vec<_>>>()?;
            Ok((cutoffs, summarize_node(tensor, v)))
        })
        .collect::<Result<_>>()?;
    let (cutoffs, summaries) = per_node.into_iter().unzip();
    Ok(Discretizer {
        n_bins,
        schema_hash: tensor.schema_hash.clone(),
        cutoffs,
        summaries,
        config_digest: String::new(),
    })
}

/// Tokenizes a tensor whose nodes are the discretizer's training nodes.
pub fn transform(tensor: &RawTensor, discretizer: &Discretizer) -> Result<TokenTensor> {
    if tensor.nodes != discretizer.nodes() {
        return Err(Error::Shape(format!(
            "tensor has {} nodes, discretizer {}; map unseen nodes with transform_mapped",
            tensor.nodes,
            discretizer.nodes()
        )));
    }
    let identity: Vec<usize> = (0..tensor.nodes).collect();
    transform_mapped(tensor, discretizer, &identity)
}

/// Tokenizes a tensor using, for node `v`, the cutoffs of training node `node_map[v]`.
pub fn transform_mapped(
    tensor: &RawTensor,
    discretizer: &Discretizer,
    node_map: &[usize],
) -> Result<TokenTensor> {
    if tensor.schema_hash != discretizer.schema_hash {
        return Err(Error::SchemaMismatch {
            expected: discretizer.schema_hash.clone(),
            found: tensor.schema_hash.clone(),
        });
    }
    if tensor.features != discretizer.features() {
        return Err(Error::Shape(format!(
            "tensor has {} features, discretizer {}",
            tensor.features,
            discretizer.features()
        )));
    }
    if node_map.len() != tensor.nodes {
        return Err(Error::Shape("node map must cover every tensor node".into()));
    }
    if let Some(&bad) = node_map.iter().find(|&&m| m >= discretizer.nodes()) {
        return Err(Error::OutOfVocabulary {
            kind: "training node",
            index: bad,
            size: discretizer.nodes(),
        });
    }
    let mut out = Tensor3::<u8>::zeros(
        tensor.nodes,
        tensor.minutes,
        tensor.features,
        tensor.epoch_minute,
        tensor.schema_hash.clone(),
    );
    let per_node = tensor.minutes * tensor.features;
    out.data
        .par_chunks_mut(per_node.max(1))
        .enumerate()
        .for_each(|(v, chunk)| {
            let cuts = &discretizer.cutoffs[node_map[v]];
            for (i, slot) in chunk.iter_mut().enumerate() {
                let (t, f) = (i / tensor.features, i % tensor.features);
                *slot = discretize_value(tensor.get(v, t, f), &cuts[f]);
            }
        });
    TokenTensor::new(out, discretizer.n_bins)
}

/// Percentile with linear interpolation between order statistics; `q` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Standardizes each feature series along time (constant series become all-zero), reduces
/// it to `[min, max, p25, p50, p75]`, and averages the five statistics over features.
pub fn summarize_series(features: &[Vec<f64>]) -> NodeSummary {
    let mut acc = [0.0; 5];
    if features.is_empty() {
        return acc;
    }
    for series in features {
        let n = series.len() as f64;
        let lo = series.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z: Vec<f64> = if series.is_empty() || lo == hi {
            vec![0.0; series.len().max(1)]
        } else {
            let mean = series.iter().sum::<f64>() / n;
            let var = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            series.iter().map(|x| (x - mean) / sd).collect()
        };
        z.sort_by(f64::total_cmp);
        let stats = [
            z[0],
            z[z.len() - 1],
            percentile_sorted(&z, 0.25),
            percentile_sorted(&z, 0.50),
            percentile_sorted(&z, 0.75),
        ];
        for (a, s) in acc.iter_mut().zip(stats) {
            *a += s;
        }
    }
    acc.map(|a| a / features.len() as f64)
}

pub fn summarize_node(tensor: &RawTensor, node: usize) -> NodeSummary {
    let features: Vec<Vec<f64>> = (0..tensor.features).map(|f| tensor.series(node, f)).collect();
    summarize_series(&features)
}

pub fn l1_distance(a: &NodeSummary, b: &NodeSummary) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Index of the training summary closest in L1 distance; ties go to the lowest index.
pub fn nearest_training_node(summary: &NodeSummary, training: &[NodeSummary]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in training.iter().enumerate() {
        let d = l1_distance(summary, s);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|b| b.0)
        .ok_or(Error::Empty("no training nodes to match against"))
}

/// Maps every node of an unseen-node tensor to its nearest training node.
pub fn map_unseen_nodes(tensor: &RawTensor, discretizer: &Discretizer) -> Result<Vec<usize>> {
    (0..tensor.nodes)
        .map(|v| nearest_training_node(&summarize_node(tensor, v), &discretizer.summaries))
        .collect()
}
