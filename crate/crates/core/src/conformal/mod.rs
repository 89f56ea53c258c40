//! Conformal bands on the survival time.
//!
//! The non-conformity score of a pair `(x, t)` is the per-sample partial
//! log-likelihood term `V(x, t) = log Σ_{k ∈ R(t) ∩ train} exp(g(X_k) − g(x))`,
//! with risk sets drawn from the training fold so calibration scores stay
//! exchangeable. [`wcci`] turns a weighted quantile of calibration scores into
//! a band by set inclusion over a time grid; [`tsci`] recalibrates that band
//! with the distance-to-boundary score `max(q_lo − t, t − q_hi)`.

mod quantile;
mod score;
pub mod tsci;
pub mod wcci;

use serde::{Deserialize, Serialize};

use crate::data::SurvivalDataset;
use crate::error::{Error, Result};

pub use quantile::{weighted_quantile, WeightedScoreDistribution};
pub use score::{score_partial, RiskTable};
pub use tsci::{second_stage_score, tsci_calibrate, tsci_predict, FirstStage, TsciCalibration};
pub use wcci::{wcci_calibrate, wcci_predict, wcci_predict_two_sided, WcciCalibration};

/// Interval `[lower, upper]` on the survival time. A truncated band had an
/// unbounded (or over-long) upper end clamped to `max_duration`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBand {
    pub lower: f64,
    pub upper: f64,
    pub truncated: bool,
    pub max_duration: f64,
}

impl ConfidenceBand {
    pub fn new(lower: f64, upper: f64, max_duration: f64) -> Self {
        debug_assert!(0.0 <= lower && lower <= upper, "band [{lower}, {upper}]");
        Self {
            lower,
            upper,
            truncated: false,
            max_duration,
        }
    }

    pub fn truncated(lower: f64, max_duration: f64) -> Self {
        Self {
            lower: lower.min(max_duration),
            upper: max_duration,
            truncated: true,
            max_duration,
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        self.lower <= t && t <= self.upper
    }

    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }
}

/// First-stage band `[q_lo, q_hi]` fed to the two-stage procedure. `q_hi` is
/// `+∞` when the first stage was unbounded above.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirstStageBand {
    pub q_lo: f64,
    pub q_hi: f64,
}

impl FirstStageBand {
    pub fn new(q_lo: f64, q_hi: f64) -> Result<Self> {
        if !(q_lo >= 0.0 && q_lo <= q_hi) {
            return Err(Error::InvalidArgument(format!(
                "first-stage band [{q_lo}, {q_hi}] is not ordered"
            )));
        }
        Ok(Self { q_lo, q_hi })
    }
}

impl From<ConfidenceBand> for FirstStageBand {
    fn from(b: ConfidenceBand) -> Self {
        Self {
            q_lo: b.lower,
            q_hi: if b.truncated { f64::INFINITY } else { b.upper },
        }
    }
}

/// Sorted, strictly increasing candidate times, starting at 0 and ending at
/// the truncation ceiling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGrid {
    times: Vec<f64>,
}

impl CandidateGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        let ok = !times.is_empty()
            && times[0] == 0.0
            && times.iter().all(|t| t.is_finite())
            && times.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::InvalidArgument(
                "grid must be nonempty, start at 0 and be strictly increasing".into(),
            ));
        }
        Ok(Self { times })
    }

    /// Distinct training observed times up to `max_duration`, plus 0 and `max_duration`.
    pub fn from_training(ds: &SurvivalDataset, train: &[usize], max_duration: f64) -> Result<Self> {
        if !(max_duration > 0.0 && max_duration.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "max duration must be positive, got {max_duration}"
            )));
        }
        let mut times: Vec<f64> = train
            .iter()
            .map(|&k| ds.subject(k).observed_time)
            .filter(|&t| t > 0.0 && t < max_duration)
            .collect();
        times.push(0.0);
        times.push(max_duration);
        times.sort_by(f64::total_cmp);
        times.dedup();
        Self::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn max_duration(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }
}
