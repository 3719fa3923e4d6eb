use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cusum::{cusum_onset, CusumParams, MIN_REFERENCE};
use super::labels::{AttackLabel, AttackType};
use crate::error::{Error, Result};
use crate::schema::{Direction, FeatureDescriptor, FeatureSchema, Measure, PortCategory, Protocol, Selector};
use crate::tensor::{RawTensor, TokenTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    /// Minutes per example window.
    pub window: usize,
    /// Minutes of an attack window that precede the labeled attack start.
    pub lead: usize,
    /// Backbone context fed before each window, clipped to the split.
    pub history: usize,
    /// Minutes before the window used to calibrate the onset detector.
    pub reference: usize,
    pub cusum: CusumParams,
    pub seed: u64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window: 30,
            lead: 20,
            history: 482,
            reference: 60,
            cusum: CusumParams::default(),
            seed: 0,
        }
    }
}

/// A labeled window of one node. Minute positions inside the window are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionExample {
    pub node: usize,
    pub customer: usize,
    /// Minute index (within the split tensor) of the first context minute.
    pub history_start: usize,
    /// Minute index (within the split tensor) of the first window minute.
    pub window_start: usize,
    pub window_len: usize,
    /// Per-minute anomaly marks.
    pub marks: Vec<bool>,
    pub label: bool,
    pub attack_type: Option<AttackType>,
    /// Anomaly onset in the window.
    pub onset: Option<usize>,
    /// Last anomalous minute in the window.
    pub attack_end: Option<usize>,
    /// Onset detection found no change and the labeled start was used.
    pub onset_from_label: bool,
    /// Inbound byte volume per window minute.
    pub volume: Vec<f64>,
}

impl DetectionExample {
    pub fn context_len(&self) -> usize {
        self.window_start - self.history_start + self.window_len
    }
}

/// The volume feature effectiveness and overhead are measured on.
pub fn volume_feature(schema: &FeatureSchema) -> Result<usize> {
    schema
        .index_of(&FeatureDescriptor {
            direction: Direction::In,
            measure: Measure::Bytes,
            selector: Selector::Volume,
        })
        .ok_or(Error::Empty("schema lacks the inbound byte volume feature"))
}

/// The inbound byte feature that an attack of the given type inflates, or the inbound byte
/// volume when the schema lacks it.
pub fn matching_feature(schema: &FeatureSchema, attack: AttackType) -> Result<usize> {
    let selector = match attack {
        AttackType::Dns => Selector::Port(PortCategory::Dns),
        AttackType::Ntp => Selector::Port(PortCategory::Ntp),
        AttackType::Udp => Selector::Protocol(Protocol::Udp),
    };
    let d = FeatureDescriptor {
        direction: Direction::In,
        measure: Measure::Bytes,
        selector,
    };
    match schema.index_of(&d) {
        Some(i) => Ok(i),
        None => volume_feature(schema),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildStats {
    pub attacks: usize,
    pub skipped_attacks: usize,
    pub onsets_from_label: usize,
    pub sigma_floored: usize,
}

fn overlaps(labels: &[(usize, usize)], start: usize, end: usize) -> bool {
    labels.iter().any(|&(s, e)| s < end && start < e)
}

/// One attack window per label that falls inside the split plus one clean window of the same
/// node, both fully inside the split.
///
/// `raw` and `tokens` must cover the same span. `customers` maps node index to customer.
pub fn build_examples(
    raw: &RawTensor,
    tokens: &TokenTensor,
    schema: &FeatureSchema,
    labels: &[AttackLabel],
    customers: &[usize],
    config: &WindowConfig,
) -> Result<(Vec<DetectionExample>, BuildStats)> {
    let t = &tokens.tokens;
    if raw.nodes != t.nodes || raw.minutes != t.minutes || raw.epoch_minute != t.epoch_minute {
        return Err(Error::Shape("raw and token tensors cover different spans".into()));
    }
    if raw.features != schema.len() || raw.schema_hash != schema.hash() {
        return Err(Error::SchemaMismatch {
            expected: schema.hash(),
            found: raw.schema_hash.clone(),
        });
    }
    if config.window == 0 || config.lead >= config.window || config.reference < MIN_REFERENCE {
        return Err(Error::InvalidConfig(
            "need window > lead and a reference of at least 10 minutes".into(),
        ));
    }
    if customers.len() < raw.nodes {
        return Err(Error::Shape("customer map shorter than node count".into()));
    }
    let volume = volume_feature(schema)?;
    let w = config.window;
    let base = raw.epoch_minute;
    let end_abs = base + raw.minutes as u64;

    // Label spans per node, in split-relative minutes (clipped).
    let mut spans: Vec<Vec<(usize, usize)>> = vec![Vec::new(); raw.nodes];
    let mut in_split: Vec<&AttackLabel> = Vec::new();
    for l in labels {
        if l.node >= raw.nodes || l.end_minute <= base || l.start_minute >= end_abs {
            continue;
        }
        let s = l.start_minute.max(base) - base;
        let e = l.end_minute.min(end_abs) - base;
        spans[l.node].push((s as usize, e as usize));
        if l.start_minute >= base {
            in_split.push(l);
        }
    }
    in_split.sort_by_key(|l| (l.start_minute, l.node));

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stats = BuildStats::default();
    let mut out = Vec::new();
    let min_start = config.reference;
    for l in in_split {
        stats.attacks += 1;
        let start = (l.start_minute - base) as usize;
        let Some(ws) = start.checked_sub(config.lead).filter(|&ws| ws >= min_start && ws + w <= raw.minutes) else {
            log::warn!("attack on node {} at minute {} does not fit in the split", l.node, l.start_minute);
            stats.skipped_attacks += 1;
            continue;
        };
        // Paired clean window of the same node.
        let mut clean = None;
        if raw.minutes >= min_start + w {
            for _ in 0..1000 {
                let s = rng.gen_range(min_start..=raw.minutes - w);
                if !overlaps(&spans[l.node], s - config.reference, s + w) {
                    clean = Some(s);
                    break;
                }
            }
        }
        let Some(cs) = clean else {
            log::warn!("node {} has no clean window; skipping its attack", l.node);
            stats.skipped_attacks += 1;
            continue;
        };

        let series_of = |f: usize, s: usize, e: usize| -> Vec<f64> {
            (s..e).map(|m| raw.get(l.node, m, f)).collect()
        };
        let matching = matching_feature(schema, l.attack_type)?;
        let reference = series_of(matching, ws - config.reference, ws);
        let cus = cusum_onset(&series_of(matching, ws, ws + w), &reference, config.cusum)?;
        stats.sigma_floored += usize::from(cus.sigma_floored);
        let marks: Vec<bool> = (ws..ws + w)
            .map(|m| spans[l.node].iter().any(|&(s, e)| (s..e).contains(&m)))
            .collect();
        let attack_end = marks.iter().rposition(|&m| m).map(|i| i + 1);
        let (onset, from_label) = match cus.onset {
            Some(i) => (i + 1, false),
            None => (config.lead + 1, true),
        };
        stats.onsets_from_label += usize::from(from_label);
        let customer = customers[l.node];
        let history_start = ws.saturating_sub(config.history);
        out.push(DetectionExample {
            node: l.node,
            customer,
            history_start,
            window_start: ws,
            window_len: w,
            label: marks.iter().any(|&m| m),
            marks,
            attack_type: Some(l.attack_type),
            onset: Some(onset.min(attack_end.unwrap_or(onset))),
            attack_end,
            onset_from_label: from_label,
            volume: series_of(volume, ws, ws + w),
        });
        out.push(DetectionExample {
            node: l.node,
            customer,
            history_start: cs.saturating_sub(config.history),
            window_start: cs,
            window_len: w,
            marks: vec![false; w],
            label: false,
            attack_type: None,
            onset: None,
            attack_end: None,
            onset_from_label: false,
            volume: series_of(volume, cs, cs + w),
        });
    }
    Ok((out, stats))
}
