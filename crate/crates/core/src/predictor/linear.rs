use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{descending_time_groups, RiskScore};
use crate::data::SurvivalDataset;
use crate::error::{Error, Result};
use crate::numeric::solve_spd;

/// `g(x) = xᵀβ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPredictor {
    pub beta: Vec<f64>,
}

impl LinearPredictor {
    pub fn new(beta: Vec<f64>) -> Result<Self> {
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidArgument("coefficients must be finite".into()));
        }
        Ok(Self { beta })
    }
}

impl RiskScore for LinearPredictor {
    fn risk(&self, x: &[f64]) -> f64 {
        self.beta.iter().zip(x).map(|(b, v)| b * v).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearOptions {
    pub max_iter: usize,
    /// Bound on the gradient max-norm, per event.
    pub tol: f64,
    pub ridge: f64,
}

impl Default for LinearOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-9,
            ridge: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub predictor: LinearPredictor,
    pub converged: bool,
    pub iterations: usize,
    /// Penalized objective after each accepted step, starting at β = 0.
    pub objective_trace: Vec<f64>,
}

const MAX_HALVINGS: usize = 30;

struct Evaluation {
    objective: f64,
    gradient: DVector<f64>,
    information: DMatrix<f64>,
}

/// Penalized partial log-likelihood, its gradient and the negative Hessian.
/// Risk-set sums are accumulated over time-descending groups with a running
/// maximum so no exponent exceeds zero.
fn evaluate(
    ds: &SurvivalDataset,
    groups: &[Vec<usize>],
    beta: &DVector<f64>,
    ridge: f64,
    with_second_order: bool,
) -> Evaluation {
    let d = beta.len();
    let eta = |k: usize| -> f64 {
        ds.subject(k)
            .covariates
            .iter()
            .zip(beta.iter())
            .map(|(x, b)| x * b)
            .sum()
    };
    let mut shift = f64::NEG_INFINITY;
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(d);
    let mut s2 = DMatrix::zeros(d, d);
    let mut objective = 0.0;
    let mut gradient = DVector::zeros(d);
    let mut information = DMatrix::zeros(d, d);
    for group in groups {
        for &k in group {
            let e = eta(k);
            if e > shift {
                let r = (shift - e).exp();
                s0 *= r;
                s1 *= r;
                if with_second_order {
                    s2 *= r;
                }
                shift = e;
            }
            let w = (e - shift).exp();
            let x = DVector::from_column_slice(&ds.subject(k).covariates);
            s0 += w;
            s1.axpy(w, &x, 1.0);
            if with_second_order {
                s2.ger(w, &x, &x, 1.0);
            }
        }
        let events: Vec<usize> = group
            .iter()
            .copied()
            .filter(|&j| ds.subject(j).event)
            .collect();
        if events.is_empty() {
            continue;
        }
        let log_denominator = shift + s0.ln();
        let mean = &s1 / s0;
        for &j in &events {
            objective += eta(j) - log_denominator;
            let x = DVector::from_column_slice(&ds.subject(j).covariates);
            gradient += x - &mean;
        }
        if with_second_order {
            let cov = &s2 / s0 - &mean * mean.transpose();
            information += cov * events.len() as f64;
        }
    }
    objective -= 0.5 * ridge * beta.norm_squared();
    gradient.axpy(-ridge, beta, 1.0);
    if with_second_order {
        for i in 0..d {
            information[(i, i)] += ridge;
        }
    }
    Evaluation {
        objective,
        gradient,
        information,
    }
}

/// Cox regression: maximizes `pl(β) − ridge·‖β‖²/2` by Newton–Raphson with
/// step halving, starting from β = 0.
pub fn fit_linear(ds: &SurvivalDataset, pool: &[usize], opts: &LinearOptions) -> Result<LinearFit> {
    let d = ds.dim();
    if d == 0 {
        return Err(Error::InvalidArgument("at least one feature is required".into()));
    }
    if !pool.iter().any(|&k| ds.subject(k).event) {
        return Err(Error::InsufficientData("pool has no events".into()));
    }
    let groups = descending_time_groups(ds, pool);
    // summed gradients carry rounding noise that grows with the event count
    let tol = opts.tol * pool.iter().filter(|&&k| ds.subject(k).event).count() as f64;
    let mut beta = DVector::zeros(d);
    let mut current = evaluate(ds, &groups, &beta, opts.ridge, true);
    let mut trace = vec![current.objective];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        if current.gradient.amax() < tol {
            converged = true;
            break;
        }
        iterations += 1;
        let step = solve_spd(current.information.clone(), &current.gradient).ok_or_else(|| {
            Error::NonFinite("information matrix is singular".into())
        })?;
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate = &beta + &step * scale;
            let eval = evaluate(ds, &groups, &candidate, opts.ridge, false);
            if !eval.objective.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective became {} at iteration {iterations}",
                    eval.objective
                )));
            }
            if eval.objective >= current.objective {
                accepted = Some(candidate);
                break;
            }
            scale *= 0.5;
        }
        let Some(next) = accepted else {
            log::warn!("Cox Newton iteration stalled after {MAX_HALVINGS} step halvings");
            break;
        };
        beta = next;
        let next_eval = evaluate(ds, &groups, &beta, opts.ridge, true);
        debug_assert!(next_eval.objective >= current.objective);
        current = next_eval;
        trace.push(current.objective);
    }
    if !converged && current.gradient.amax() < tol {
        converged = true;
    }
    Ok(LinearFit {
        predictor: LinearPredictor::new(beta.iter().copied().collect())?,
        converged,
        iterations,
        objective_trace: trace,
    })
}
