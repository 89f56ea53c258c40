//! Two-stage recalibration of a first-stage band.
//!
//! Each uncensored subject of the second calibration fold gets the
//! boundary-distance score `max(q_lo − T, T − q_hi)` against its own
//! first-stage band. The weighted `(1 − α)` quantile `η` of those scores then
//! widens (or shrinks) every test band to `[q_lo − η, q_hi + η]`.

use serde::{Deserialize, Serialize};

use super::{ConfidenceBand, FirstStageBand, WeightedScoreDistribution};
use crate::data::SurvivalDataset;
use crate::error::{Error, Result};
use crate::weights::{normalize, WeightFunction};

/// How the first-stage band is built from the one-stage conformal set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FirstStage {
    /// Hull of the one-stage set at level `1 − α`; unbounded above.
    Hull,
    /// Two one-sided runs at `α/2` each; usually bounded.
    #[default]
    Split,
}

pub fn second_stage_score(b: FirstStageBand, t: f64) -> f64 {
    (b.q_lo - t).max(t - b.q_hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsciCalibration {
    pub scores: Vec<f64>,
    pub raw_weights: Vec<f64>,
}

impl TsciCalibration {
    pub fn unweighted(&self) -> Self {
        Self {
            scores: self.scores.clone(),
            raw_weights: vec![1.0; self.scores.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `η` for a test point of weight `weight_test`; `+inf` when the finite
    /// atoms cannot reach `1 − α`.
    pub fn eta(&self, weight_test: f64, alpha: f64) -> f64 {
        let nw = normalize(&self.raw_weights, weight_test)
            .expect("calibration weights are validated positive");
        WeightedScoreDistribution::from_scores(&self.scores, &nw)
            .expect("normalized weights sum to one")
            .quantile(1.0 - alpha)
    }
}

/// `first_stage[j]` is the band of subject `cal2[j]`; censored subjects are
/// skipped.
pub fn tsci_calibrate(
    first_stage: &[FirstStageBand],
    weight: &dyn WeightFunction,
    ds: &SurvivalDataset,
    cal2: &[usize],
) -> Result<TsciCalibration> {
    if first_stage.len() != cal2.len() {
        return Err(Error::InvalidArgument(format!(
            "{} first-stage bands for {} calibration subjects",
            first_stage.len(),
            cal2.len()
        )));
    }
    let (scores, raw_weights): (Vec<f64>, Vec<f64>) = cal2
        .iter()
        .zip(first_stage)
        .map(|(&i, b)| (ds.subject(i), b))
        .filter(|(s, _)| s.event)
        .map(|(s, b)| (second_stage_score(*b, s.observed_time), weight.weight(&s.covariates)))
        .unzip();
    if scores.is_empty() {
        return Err(Error::InsufficientData(
            "second calibration fold has no uncensored subjects".into(),
        ));
    }
    if let Some(w) = raw_weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(Error::InvalidArgument(format!("calibration weight {w} is not positive")));
    }
    Ok(TsciCalibration {
        scores,
        raw_weights,
    })
}

/// `[max(q_lo − η, 0), min(q_hi + η, max_duration)]`. Truncated when the
/// upper end is clamped.
pub fn tsci_predict(b: FirstStageBand, eta: f64, max_duration: f64) -> ConfidenceBand {
    if eta == f64::INFINITY {
        return ConfidenceBand::truncated(0.0, max_duration);
    }
    let lower = (b.q_lo - eta).max(0.0);
    let upper = b.q_hi + eta;
    if upper >= max_duration {
        return ConfidenceBand::truncated(lower, max_duration);
    }
    if lower > upper {
        let mid = 0.5 * (b.q_lo + b.q_hi);
        log::warn!("negative eta collapsed the band; returning the point band at {mid}");
        return ConfidenceBand::new(mid, mid, max_duration);
    }
    ConfidenceBand::new(lower, upper, max_duration)
}
