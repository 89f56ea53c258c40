//! Covariate-shift weights `w(x) = P(Δ=1) / P(Δ=1 | X=x)`.
//!
//! Calibration scores exist only for uncensored subjects, whose covariates
//! follow `P_{X|Δ=1}`. Reweighting each calibration atom by `w(X_i)` transfers
//! the conformal guarantee back to the full covariate distribution `P_X`.
//! `P(Δ=1 | X=x)` is estimated with ridge-penalized logistic regression.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::SurvivalDataset;
use crate::error::{Error, Result};
use crate::numeric::{sigmoid, solve_spd};

/// A source of importance weights evaluated at a covariate vector.
pub trait WeightFunction: Sync {
    fn weight(&self, x: &[f64]) -> f64;
}

impl<T: WeightFunction + ?Sized> WeightFunction for &T {
    fn weight(&self, x: &[f64]) -> f64 {
        (**self).weight(x)
    }
}

/// `w ≡ 1`: the unweighted procedure.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UnitWeight;

impl WeightFunction for UnitWeight {
    fn weight(&self, _x: &[f64]) -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightModel {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// Event fraction of the pool the model was fitted on.
    pub marginal_event_rate: f64,
    /// `(w_min, w_max)`; `None` disables clipping.
    pub clip: Option<(f64, f64)>,
    /// Constant multiplier applied after clipping (see [`renormalize_mean_one`]).
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl WeightModel {
    pub fn event_probability(&self, x: &[f64]) -> f64 {
        let z: f64 = self.intercept
            + self
                .coefficients
                .iter()
                .zip(x)
                .map(|(c, v)| c * v)
                .sum::<f64>();
        sigmoid(z)
    }

    fn validate(&self) -> Result<()> {
        let finite = self.coefficients.iter().all(|c| c.is_finite())
            && self.intercept.is_finite()
            && self.scale.is_finite()
            && self.scale > 0.0;
        let rate_ok = self.marginal_event_rate > 0.0 && self.marginal_event_rate < 1.0;
        let clip_ok = self
            .clip
            .is_none_or(|(lo, hi)| lo > 0.0 && lo <= hi && hi.is_finite());
        if finite && rate_ok && clip_ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid weight model {self:?}")))
        }
    }
}

/// `scale · clip(rate / σ(intercept + coefficients·x), w_min, w_max)`.
pub fn weight_at(m: &WeightModel, x: &[f64]) -> f64 {
    let raw = m.marginal_event_rate / m.event_probability(x);
    let clipped = match m.clip {
        Some((lo, hi)) => raw.clamp(lo, hi),
        None => raw,
    };
    m.scale * clipped
}

impl WeightFunction for WeightModel {
    fn weight(&self, x: &[f64]) -> f64 {
        weight_at(self, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightOptions {
    pub max_iter: usize,
    /// Bound on the gradient max-norm, per subject.
    pub tol: f64,
    /// Penalty on the coefficients (the intercept is not penalized).
    pub ridge: f64,
    pub clip: Option<(f64, f64)>,
}

impl Default for WeightOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-10,
            ridge: 1e-6,
            clip: Some((0.05, 20.0)),
        }
    }
}

fn logistic_objective(xs: &[Vec<f64>], ys: &[f64], theta: &DVector<f64>, ridge: f64) -> f64 {
    let mut ll = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let z: f64 = theta[0] + x.iter().zip(theta.iter().skip(1)).map(|(a, b)| a * b).sum::<f64>();
        // log σ(z) = −softplus(−z), log(1 − σ(z)) = −softplus(z)
        let softplus = |u: f64| if u > 0.0 { u + (-u).exp().ln_1p() } else { u.exp().ln_1p() };
        ll -= if *y > 0.5 { softplus(-z) } else { softplus(z) };
    }
    let penalty: f64 = theta.iter().skip(1).map(|b| b * b).sum();
    ll - 0.5 * ridge * penalty
}

/// Fits `P(Δ=1 | X=x)` by Newton–Raphson on the ridge-penalized logistic
/// log-likelihood over `pool`.
pub fn fit_weight_model(
    ds: &SurvivalDataset,
    pool: &[usize],
    opts: &WeightOptions,
) -> Result<WeightModel> {
    let events = pool.iter().filter(|&&k| ds.subject(k).event).count();
    if events == 0 || events == pool.len() {
        return Err(Error::InsufficientData(
            "weight model needs both censored and uncensored subjects".into(),
        ));
    }
    let d = ds.dim();
    let xs: Vec<Vec<f64>> = pool.iter().map(|&k| ds.subject(k).covariates.clone()).collect();
    let ys: Vec<f64> = pool
        .iter()
        .map(|&k| if ds.subject(k).event { 1.0 } else { 0.0 })
        .collect();
    let rate = events as f64 / pool.len() as f64;

    let mut theta = DVector::zeros(d + 1);
    theta[0] = (rate / (1.0 - rate)).ln();
    let mut objective = logistic_objective(&xs, &ys, &theta, opts.ridge);
    for _ in 0..opts.max_iter {
        let mut grad = DVector::zeros(d + 1);
        let mut info = DMatrix::zeros(d + 1, d + 1);
        for (x, y) in xs.iter().zip(&ys) {
            let row = DVector::from_iterator(d + 1, std::iter::once(1.0).chain(x.iter().copied()));
            let p = sigmoid(row.dot(&theta));
            grad.axpy(y - p, &row, 1.0);
            info.ger(p * (1.0 - p), &row, &row, 1.0);
        }
        for i in 1..=d {
            grad[i] -= opts.ridge * theta[i];
            info[(i, i)] += opts.ridge;
        }
        if grad.amax() < opts.tol * xs.len() as f64 {
            break;
        }
        let step = solve_spd(info, &grad).ok_or_else(|| {
            Error::NonFinite("logistic information matrix is singular".into())
        })?;
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=30 {
            let candidate = &theta + &step * scale;
            let obj = logistic_objective(&xs, &ys, &candidate, opts.ridge);
            if !obj.is_finite() {
                return Err(Error::NonFinite("logistic objective diverged".into()));
            }
            if obj >= objective {
                theta = candidate;
                objective = obj;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            log::warn!("logistic Newton iteration stalled");
            break;
        }
    }
    let model = WeightModel {
        coefficients: theta.iter().skip(1).copied().collect(),
        intercept: theta[0],
        marginal_event_rate: rate,
        clip: opts.clip,
        scale: 1.0,
    };
    model.validate()?;
    Ok(model)
}

/// Probabilities `p_i = W_i / (ΣW + W')` over calibration atoms and the mass
/// `p_∞ = W' / (ΣW + W')` placed at +∞ for the test point.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedWeights {
    pub p: Vec<f64>,
    pub p_inf: f64,
}

pub fn normalize(weights_cal: &[f64], weight_test: f64) -> Result<NormalizedWeights> {
    if weights_cal.iter().chain([&weight_test]).any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::InvalidArgument("weights must be positive and finite".into()));
    }
    let total: f64 = weights_cal.iter().sum::<f64>() + weight_test;
    let p: Vec<f64> = weights_cal.iter().map(|w| w / total).collect();
    let p_inf = weight_test / total;
    Ok(NormalizedWeights { p, p_inf })
}

/// Rescales the model so its weights average exactly 1 over `cal_uncensored`.
pub fn renormalize_mean_one(m: &WeightModel, cal_uncensored: &[Vec<f64>]) -> Result<WeightModel> {
    if cal_uncensored.is_empty() {
        return Err(Error::InsufficientData(
            "no uncensored calibration points to renormalize over".into(),
        ));
    }
    let mean = cal_uncensored.iter().map(|x| weight_at(m, x)).sum::<f64>()
        / cal_uncensored.len() as f64;
    Ok(WeightModel {
        scale: m.scale / mean,
        ..m.clone()
    })
}
