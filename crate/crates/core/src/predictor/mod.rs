//! Risk predictors `g(x)` for the proportional-hazards model
//! `Λ(t; x) = Λ₀(t)·exp(g(x))`, the partial likelihood they are fitted on,
//! and the Breslow baseline hazard.

mod baseline;
mod linear;
mod mlp;

use serde::{Deserialize, Serialize};

pub use baseline::{breslow, naive_band, BaselineHazard};
pub use linear::{fit_linear, LinearFit, LinearOptions, LinearPredictor};
pub use mlp::{fit_mlp, DenseLayer, MlpFit, MlpOptions, MlpPredictor};

use crate::data::SurvivalDataset;
use crate::error::{Error, Result};
use crate::numeric::LogSumExp;

/// Anything that maps a covariate vector to a log relative hazard.
pub trait RiskScore {
    fn risk(&self, x: &[f64]) -> f64;

    /// `g(x)` for every subject of `ds`, indexed like the dataset.
    fn risks(&self, ds: &SurvivalDataset) -> Vec<f64> {
        ds.subjects().iter().map(|s| self.risk(&s.covariates)).collect()
    }
}

impl<T: RiskScore + ?Sized> RiskScore for &T {
    fn risk(&self, x: &[f64]) -> f64 {
        (**self).risk(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predictor {
    Linear(LinearPredictor),
    Mlp(MlpPredictor),
}

impl RiskScore for Predictor {
    fn risk(&self, x: &[f64]) -> f64 {
        match self {
            Predictor::Linear(p) => p.risk(x),
            Predictor::Mlp(p) => p.risk(x),
        }
    }
}

/// Pool indices sorted by observed time, descending, grouped by equal time.
pub(crate) fn descending_time_groups(ds: &SurvivalDataset, pool: &[usize]) -> Vec<Vec<usize>> {
    let mut order = pool.to_vec();
    order.sort_by(|&a, &b| {
        ds.subject(b)
            .observed_time
            .total_cmp(&ds.subject(a).observed_time)
            .then(a.cmp(&b))
    });
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for k in order {
        let t = ds.subject(k).observed_time;
        match groups.last_mut() {
            Some(g) if ds.subject(g[0]).observed_time == t => g.push(k),
            _ => groups.push(vec![k]),
        }
    }
    groups
}

/// Cox partial log-likelihood in the usual sign convention,
/// `Σ_{j ∈ pool, event} [g_j − log Σ_{k ∈ pool, Y_k ≥ Y_j} exp g_k]`,
/// using the Breslow convention for ties. `g` is indexed like `ds`.
pub fn partial_log_lik(g: &[f64], ds: &SurvivalDataset, pool: &[usize]) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument("pool is empty".into()));
    }
    if let Some(&k) = pool.iter().find(|&&k| !g[k].is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "risk value of subject {k} is not finite"
        )));
    }
    let mut acc = LogSumExp::new();
    let mut pl = 0.0;
    for group in descending_time_groups(ds, pool) {
        for &k in &group {
            acc.push(g[k]);
        }
        let lse = acc.value();
        for &j in group.iter().filter(|&&j| ds.subject(j).event) {
            if acc.is_empty() {
                return Err(Error::EmptyRiskSet(j));
            }
            pl += g[j] - lse;
        }
    }
    Ok(pl)
}
