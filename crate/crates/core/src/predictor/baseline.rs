use serde::{Deserialize, Serialize};

use crate::conformal::ConfidenceBand;
use crate::data::SurvivalDataset;
use crate::numeric::LogSumExp;

/// Right-continuous step function `Λ₀(t)`, zero before the first event time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineHazard {
    pub event_times: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl BaselineHazard {
    pub fn at(&self, t: f64) -> f64 {
        let k = self.event_times.partition_point(|&e| e <= t);
        if k == 0 {
            0.0
        } else {
            self.cumulative[k - 1]
        }
    }

    /// `S(t | x) = exp(−Λ₀(t)·exp(g(x)))`.
    pub fn survival(&self, t: f64, g_at_x: f64) -> f64 {
        (-self.at(t) * g_at_x.exp()).exp()
    }
}

/// Breslow estimator over `pool`:
/// `Λ₀(t) = Σ_{event j, Y_j ≤ t} 1 / Σ_{k ∈ pool, Y_k ≥ Y_j} exp g_k`.
/// With `g ≡ 0` this is the Nelson–Aalen estimator.
pub fn breslow(ds: &SurvivalDataset, pool: &[usize], g: &[f64]) -> BaselineHazard {
    let groups = super::descending_time_groups(ds, pool);
    let mut acc = LogSumExp::new();
    let mut jumps = Vec::new();
    for group in &groups {
        for &k in group {
            acc.push(g[k]);
        }
        let events = group.iter().filter(|&&j| ds.subject(j).event).count();
        if events > 0 {
            let t = ds.subject(group[0]).observed_time;
            jumps.push((t, events as f64 * (-acc.value()).exp()));
        }
    }
    jumps.reverse();
    let mut total = 0.0;
    let (event_times, cumulative) = jumps
        .into_iter()
        .map(|(t, h)| {
            total += h;
            (t, total)
        })
        .unzip();
    BaselineHazard {
        event_times,
        cumulative,
    }
}

/// Upper band from the fitted survival curve: the first event time at which
/// `S(t | x) ≤ alpha`, or the truncated full range if the curve never drops
/// that far.
pub fn naive_band(
    g_at_x: f64,
    baseline: &BaselineHazard,
    alpha: f64,
    max_duration: f64,
) -> ConfidenceBand {
    let hit = baseline
        .event_times
        .iter()
        .zip(&baseline.cumulative)
        .find(|(_, &cum)| (-cum * g_at_x.exp()).exp() <= alpha)
        .map(|(&t, _)| t);
    match hit {
        Some(t) if t < max_duration => ConfidenceBand::new(0.0, t, max_duration),
        _ => ConfidenceBand::truncated(0.0, max_duration),
    }
}
