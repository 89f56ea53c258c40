//! One-stage weighted conformal band.
//!
//! Calibration scores `V_i = V(X_i, Y_i)` come from uncensored calibration
//! subjects only, weighted by `ŵ(X_i)`. For a test point the weighted
//! `(1 − α)` quantile `Q` (with the test weight placed at +∞) defines the
//! conformal set `{t : V(x', t) ≤ Q}`, reported as its hull over a grid.
//!
//! Under the `Y_k ≥ t` risk-set convention `V(x, t)` is non-increasing in
//! `t`, so the set is an upper ray and the hull runs to the grid ceiling.

use serde::{Deserialize, Serialize};

use super::{CandidateGrid, ConfidenceBand, RiskTable, WeightedScoreDistribution};
use crate::data::SurvivalDataset;
use crate::error::{Error, Result};
use crate::predictor::RiskScore;
use crate::weights::{normalize, WeightFunction};

/// Scores and raw weights of the uncensored calibration subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WcciCalibration {
    pub scores: Vec<f64>,
    pub raw_weights: Vec<f64>,
}

impl WcciCalibration {
    /// Same scores with every weight forced to 1.
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

    fn distribution(&self, weight_test: f64) -> WeightedScoreDistribution {
        let nw = normalize(&self.raw_weights, weight_test)
            .expect("calibration weights are validated positive");
        WeightedScoreDistribution::from_scores(&self.scores, &nw)
            .expect("normalized weights sum to one")
    }

    /// Weighted `level` quantile of the scores with the test mass at +∞.
    pub fn upper_threshold(&self, weight_test: f64, level: f64) -> f64 {
        self.distribution(weight_test).quantile(level)
    }

    /// Mirror image: the `1 − level` lower quantile with the test mass at −∞.
    pub fn lower_threshold(&self, weight_test: f64, level: f64) -> f64 {
        let negated = Self {
            scores: self.scores.iter().map(|v| -v).collect(),
            raw_weights: self.raw_weights.clone(),
        };
        -negated.distribution(weight_test).quantile(level)
    }
}

/// Scores every uncensored calibration subject at its observed time and
/// records its weight; censored subjects contribute nothing.
pub fn wcci_calibrate(
    table: &RiskTable,
    g: &dyn RiskScore,
    weight: &dyn WeightFunction,
    ds: &SurvivalDataset,
    cal: &[usize],
) -> Result<WcciCalibration> {
    let (scores, raw_weights): (Vec<f64>, Vec<f64>) = cal
        .iter()
        .map(|&i| ds.subject(i))
        .filter(|s| s.event)
        .map(|s| {
            (
                table.score(g.risk(&s.covariates), s.observed_time),
                weight.weight(&s.covariates),
            )
        })
        .unzip();
    if scores.is_empty() {
        return Err(Error::InsufficientData(
            "calibration fold has no uncensored subjects".into(),
        ));
    }
    if let Some(w) = raw_weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(Error::InvalidArgument(format!("calibration weight {w} is not positive")));
    }
    Ok(WcciCalibration {
        scores,
        raw_weights,
    })
}

/// Hull of the grid points accepted by `accept`, with the degenerate fallback
/// to the point minimizing `distance` when nothing is accepted.
fn hull_band(
    table: &RiskTable,
    g_at_x: f64,
    grid: &CandidateGrid,
    accept: impl Fn(f64) -> bool,
    distance: impl Fn(f64) -> f64,
) -> ConfidenceBand {
    let max_duration = grid.max_duration();
    let mut lo = None;
    let mut hi = None;
    for &t in grid.times() {
        if accept(table.score(g_at_x, t)) {
            lo.get_or_insert(t);
            hi = Some(t);
        }
    }
    match (lo, hi) {
        (Some(lo), Some(hi)) if hi >= max_duration => ConfidenceBand::truncated(lo, max_duration),
        (Some(lo), Some(hi)) => ConfidenceBand::new(lo, hi, max_duration),
        _ => {
            let best = grid
                .times()
                .iter()
                .copied()
                .min_by(|&a, &b| {
                    distance(table.score(g_at_x, a)).total_cmp(&distance(table.score(g_at_x, b)))
                })
                .unwrap_or(0.0);
            log::warn!("empty conformal set; returning the point band at t = {best}");
            ConfidenceBand::new(best, best, max_duration)
        }
    }
}

/// One-sided band: hull of `{t ∈ grid : V(x', t) ≤ Q_{1−α}}`.
pub fn wcci_predict(
    table: &RiskTable,
    calibration: &WcciCalibration,
    g_at_x: f64,
    weight_test: f64,
    alpha: f64,
    grid: &CandidateGrid,
) -> ConfidenceBand {
    let q = calibration.upper_threshold(weight_test, 1.0 - alpha);
    if q == f64::INFINITY {
        return ConfidenceBand::truncated(0.0, grid.max_duration());
    }
    hull_band(table, g_at_x, grid, |v| v <= q, |v| v - q)
}

/// Two-sided band from two one-sided runs at `α/2`: hull of
/// `{t : Q^lo_{α/2} ≤ V(x', t) ≤ Q_{1−α/2}}`, where the lower threshold puts
/// the test mass at −∞.
pub fn wcci_predict_two_sided(
    table: &RiskTable,
    calibration: &WcciCalibration,
    g_at_x: f64,
    weight_test: f64,
    alpha: f64,
    grid: &CandidateGrid,
) -> ConfidenceBand {
    let level = 1.0 - alpha / 2.0;
    let q_hi = calibration.upper_threshold(weight_test, level);
    let q_lo = calibration.lower_threshold(weight_test, level);
    hull_band(
        table,
        g_at_x,
        grid,
        |v| q_lo <= v && v <= q_hi,
        |v| {
            if v < q_lo {
                q_lo - v
            } else {
                (v - q_hi).max(0.0)
            }
        },
    )
}
