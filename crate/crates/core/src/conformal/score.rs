use serde::{Deserialize, Serialize};

use crate::data::SurvivalDataset;
use crate::numeric::LogSumExp;
use crate::predictor::RiskScore;

/// Partial-likelihood score `log Σ_{k ∈ R(t) ∩ train} exp(g(X_k) − g(x))`,
/// evaluated directly over the training pool.
///
/// An empty risk set (t past every training time) yields `-inf`, so such
/// times always fall inside the conformal set.
pub fn score_partial(
    g: &dyn RiskScore,
    train_pool: &[usize],
    ds: &SurvivalDataset,
    x: &[f64],
    t: f64,
) -> f64 {
    let mut acc = LogSumExp::new();
    for &k in train_pool {
        let s = ds.subject(k);
        if s.observed_time >= t {
            acc.push(g.risk(&s.covariates));
        }
    }
    if acc.is_empty() {
        log::warn!("empty training risk set at t = {t}; scoring as -inf");
        return f64::NEG_INFINITY;
    }
    acc.value() - g.risk(x)
}

/// Precomputed `log Σ_{k ∈ train, Y_k ≥ t} exp g_k` at every distinct
/// training time, so a score costs one binary search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskTable {
    /// Distinct training observed times, ascending.
    pub times: Vec<f64>,
    /// Log risk-set denominator at each time in `times`.
    pub log_denominators: Vec<f64>,
}

impl RiskTable {
    /// `g` is indexed like `ds`.
    pub fn new(ds: &SurvivalDataset, train: &[usize], g: &[f64]) -> Self {
        let mut order = train.to_vec();
        order.sort_by(|&a, &b| ds.subject(b).observed_time.total_cmp(&ds.subject(a).observed_time));
        let mut times = Vec::new();
        let mut log_denominators = Vec::new();
        let mut acc = LogSumExp::new();
        let mut i = 0;
        while i < order.len() {
            let t = ds.subject(order[i]).observed_time;
            while i < order.len() && ds.subject(order[i]).observed_time == t {
                acc.push(g[order[i]]);
                i += 1;
            }
            times.push(t);
            log_denominators.push(acc.value());
        }
        times.reverse();
        log_denominators.reverse();
        Self {
            times,
            log_denominators,
        }
    }

    /// Log denominator of the risk set at `t-`; `-inf` when it is empty.
    pub fn log_denominator(&self, t: f64) -> f64 {
        let idx = self.times.partition_point(|&s| s < t);
        self.log_denominators
            .get(idx)
            .copied()
            .unwrap_or(f64::NEG_INFINITY)
    }

    pub fn score(&self, g_at_x: f64, t: f64) -> f64 {
        self.log_denominator(t) - g_at_x
    }
}
