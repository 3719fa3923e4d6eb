use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum reference length for estimating the pre-change mean and spread.
pub const MIN_REFERENCE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CusumParams {
    /// Slack, in standard deviations.
    pub kappa: f64,
    /// Decision threshold, in standard deviations.
    pub h: f64,
}

impl Default for CusumParams {
    fn default() -> Self {
        Self { kappa: 0.5, h: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CusumOutcome {
    /// Index into the candidate series of the first alarm.
    pub onset: Option<usize>,
    /// The reference had zero spread and a floor was used instead.
    pub sigma_floored: bool,
}

/// One-sided upper CUSUM over `series`, calibrated on `reference`.
pub fn cusum_onset(series: &[f64], reference: &[f64], params: CusumParams) -> Result<CusumOutcome> {
    if reference.len() < MIN_REFERENCE {
        return Err(Error::InvalidConfig(format!(
            "CUSUM reference has {} minutes, need at least {MIN_REFERENCE}",
            reference.len()
        )));
    }
    let n = reference.len() as f64;
    let mu = reference.iter().sum::<f64>() / n;
    let mut sigma = (reference.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n).sqrt();
    let sigma_floored = sigma == 0.0;
    if sigma_floored {
        sigma = (0.01 * mu).max(1.0);
    }
    let mut s = 0.0f64;
    for (t, &x) in series.iter().enumerate() {
        s = (s + (x - mu - params.kappa * sigma)).max(0.0);
        if s > params.h * sigma {
            return Ok(CusumOutcome { onset: Some(t), sigma_floored });
        }
    }
    Ok(CusumOutcome { onset: None, sigma_floored })
}
