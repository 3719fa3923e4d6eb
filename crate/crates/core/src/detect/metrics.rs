use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::examples::DetectionExample;
use crate::error::{Error, Result};

/// First 1-based minute whose survival falls strictly below `tau`.
pub fn detect(survival: &[f64], tau: f64) -> Option<usize> {
    survival.iter().position(|&s| s < tau).map(|i| i + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cost {
    pub effectiveness: f64,
    pub overhead: f64,
}

/// Share of anomalous volume at or after the detection and share of normal volume wrongly
/// covered by it, both in percent.
pub fn effectiveness_overhead(example: &DetectionExample, detection: Option<usize>) -> Result<Cost> {
    let w = example.volume.len();
    if example.marks.len() != w {
        return Err(Error::MalformedLabels("marks and volume lengths differ".into()));
    }
    let from = detection.map(|t| t.saturating_sub(1)).unwrap_or(w);
    let (mut anom_total, mut anom_after, mut norm_total, mut norm_after) = (0.0, 0.0, 0.0, 0.0);
    for (i, (&v, &m)) in example.volume.iter().zip(&example.marks).enumerate() {
        if m {
            anom_total += v;
            if i >= from {
                anom_after += v;
            }
        } else {
            norm_total += v;
            if i >= from {
                norm_after += v;
            }
        }
    }
    let effectiveness = if example.label {
        if anom_total <= 0.0 {
            return Err(Error::MalformedLabels(format!(
                "attack window of node {} at minute {} has no anomalous volume",
                example.node, example.window_start
            )));
        }
        match (detection, example.onset) {
            (None, _) => 0.0,
            (Some(t), Some(a)) if t <= a => 100.0,
            _ => 100.0 * anom_after / anom_total,
        }
    } else {
        0.0
    };
    let overhead = if norm_total > 0.0 {
        100.0 * norm_after / norm_total
    } else {
        0.0
    };
    Ok(Cost {
        effectiveness,
        overhead,
    })
}

/// Candidate thresholds 0.01, 0.02, ..., 0.99.
pub fn tau_grid() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub tau: f64,
    pub feasible: bool,
    pub mean_effectiveness: f64,
    /// Fraction of customers whose mean overhead is within the cap.
    pub customers_within_cap: f64,
}

/// Per-threshold operating point on a set of examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub tau: f64,
    pub mean_effectiveness: f64,
    pub customers_within_cap: f64,
}

fn operating_point(
    examples: &[DetectionExample],
    curves: &[Vec<f64>],
    tau: f64,
    overhead_cap: f64,
) -> Result<OperatingPoint> {
    let mut eff = Vec::new();
    let mut per_customer: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for (ex, s) in examples.iter().zip(curves) {
        let c = effectiveness_overhead(ex, detect(s, tau))?;
        if ex.label {
            eff.push(c.effectiveness);
        }
        let e = per_customer.entry(ex.customer).or_default();
        e.0 += c.overhead;
        e.1 += 1;
    }
    let within = per_customer
        .values()
        .filter(|(sum, n)| sum / *n as f64 <= overhead_cap)
        .count();
    Ok(OperatingPoint {
        tau,
        mean_effectiveness: if eff.is_empty() {
            0.0
        } else {
            eff.iter().sum::<f64>() / eff.len() as f64
        },
        customers_within_cap: within as f64 / per_customer.len() as f64,
    })
}

/// Grid search for the threshold with the best mean effectiveness among those that keep at
/// least `customer_pct` percent of customers within `overhead_cap` percent mean overhead.
/// Ties go to the larger threshold. Without a feasible threshold, the one with the fewest
/// violating customers is returned.
pub fn select_threshold(
    examples: &[DetectionExample],
    curves: &[Vec<f64>],
    overhead_cap: f64,
    customer_pct: f64,
) -> Result<ThresholdChoice> {
    if examples.is_empty() || curves.is_empty() {
        return Err(Error::Empty("no survival curves to select a threshold on"));
    }
    if examples.len() != curves.len() {
        return Err(Error::Shape("one survival curve per example required".into()));
    }
    if !(customer_pct > 0.0 && customer_pct <= 100.0) || overhead_cap < 0.0 {
        return Err(Error::InvalidConfig(
            "customer fraction must lie in (0, 100] and the overhead cap be >= 0".into(),
        ));
    }
    let points: Vec<OperatingPoint> = tau_grid()
        .into_iter()
        .map(|tau| operating_point(examples, curves, tau, overhead_cap))
        .collect::<Result<_>>()?;
    let need = customer_pct / 100.0;
    let best_feasible = points
        .iter()
        .filter(|p| p.customers_within_cap >= need - 1e-12)
        .fold(None::<&OperatingPoint>, |best, p| match best {
            Some(b) if b.mean_effectiveness > p.mean_effectiveness => Some(b),
            _ => Some(p),
        });
    if let Some(p) = best_feasible {
        return Ok(ThresholdChoice {
            tau: p.tau,
            feasible: true,
            mean_effectiveness: p.mean_effectiveness,
            customers_within_cap: p.customers_within_cap,
        });
    }
    let p = points
        .iter()
        .fold(None::<&OperatingPoint>, |best, p| match best {
            Some(b) if b.customers_within_cap > p.customers_within_cap => Some(b),
            _ => Some(p),
        })
        .expect("non-empty grid");
    Ok(ThresholdChoice {
        tau: p.tau,
        feasible: false,
        mean_effectiveness: p.mean_effectiveness,
        customers_within_cap: p.customers_within_cap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub examples: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    /// Mean over attack examples, percent.
    pub effectiveness: f64,
    /// Mean over all examples, percent.
    pub overhead: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub f1: f64,
    /// `|t_d - t_a|` for every true positive, in minutes.
    pub mitigation_times: Vec<usize>,
    pub median_mitigation: Option<f64>,
    pub mean_mitigation: Option<f64>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn median(values: &[usize]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    })
}

pub fn report(examples: &[DetectionExample], detections: &[Option<usize>], tau: f64) -> Result<EvalReport> {
    if examples.len() != detections.len() {
        return Err(Error::Shape("one detection per example required".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    let mut eff = Vec::new();
    let mut overhead = 0.0;
    let mut times = Vec::new();
    for (ex, &d) in examples.iter().zip(detections) {
        let c = effectiveness_overhead(ex, d)?;
        overhead += c.overhead;
        match (ex.label, d) {
            (true, Some(t)) => {
                tp += 1;
                if let Some(a) = ex.onset {
                    times.push(t.abs_diff(a));
                }
            }
            (true, None) => fn_ += 1,
            (false, Some(_)) => fp += 1,
            (false, None) => tn += 1,
        }
        if ex.label {
            eff.push(c.effectiveness);
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(EvalReport {
        threshold: tau,
        examples: examples.len(),
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fn_,
        effectiveness: mean(&eff),
        overhead: if examples.is_empty() { 0.0 } else { overhead / examples.len() as f64 },
        fpr: 100.0 * ratio(fp, fp + tn),
        fnr: 100.0 * ratio(fn_, fn_ + tp),
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
        median_mitigation: median(&times),
        mean_mitigation: (!times.is_empty()).then(|| times.iter().sum::<usize>() as f64 / times.len() as f64),
        mitigation_times: times,
    })
}

impl EvalReport {
    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        let rows = [
            ("Effectiveness (%) ↑", format!("{:.2}", self.effectiveness)),
            ("Overhead (%) ↓", format!("{:.3}", self.overhead)),
            ("FPR (%) ↓", format!("{:.2}", self.fpr)),
            ("FNR (%) ↓", format!("{:.2}", self.fnr)),
            ("F1 score ↑", format!("{:.3}", self.f1)),
            ("Median mitigation (min)", opt(self.median_mitigation)),
            ("Mean mitigation (min)", opt(self.mean_mitigation)),
            ("Threshold", format!("{:.2}", self.threshold)),
            ("Examples", self.examples.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<26}{v:>10}");
        }
        out
    }
}
