//! Labeled detection windows, the survival head and detection metrics.

mod cusum;
mod examples;
mod labels;
mod metrics;
mod survival;

pub use cusum::{cusum_onset, CusumOutcome, CusumParams, MIN_REFERENCE};
pub use examples::{build_examples, matching_feature, volume_feature, BuildStats, DetectionExample, WindowConfig};
pub use labels::{labels_to_csv, parse_labels_csv, AttackLabel, AttackType, LABEL_CSV_HEADER};
pub use metrics::{
    detect, effectiveness_overhead, median, report, select_threshold, tau_grid, Cost, EvalReport, OperatingPoint,
    ThresholdChoice,
};
pub use survival::{finetune, survival_from_logits, window_states, FinetuneConfig, HeadExample, SurvivalHead, HEAD_HIDDEN};
