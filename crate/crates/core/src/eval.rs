//! Coverage and band-length metrics.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::ConfidenceBand;
use crate::data::SurvivalDataset;
use crate::error::{Error, Result};
use crate::numeric::{mean_sd, rng_for};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    /// Against the true survival time.
    #[serde(rename = "EC")]
    Empirical,
    /// From censored observations only.
    #[serde(rename = "SEC")]
    Surrogate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub coverage_total: f64,
    /// `None` when the test set has no subjects of that class.
    pub coverage_censored: Option<f64>,
    pub coverage_uncensored: Option<f64>,
    pub mean_length: f64,
    pub sd_length: f64,
    pub truncated_fraction: f64,
    pub n_evaluated: usize,
    pub metric_kind: MetricKind,
}

fn report(
    bands: &[ConfidenceBand],
    ds: &SurvivalDataset,
    test: &[usize],
    kind: MetricKind,
    hit: impl Fn(&ConfidenceBand, usize) -> bool,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::InsufficientData("empty test set".into()));
    }
    if bands.len() != test.len() {
        return Err(Error::InvalidArgument(format!(
            "{} bands for {} test subjects",
            bands.len(),
            test.len()
        )));
    }
    let mut hits = [0usize; 2];
    let mut counts = [0usize; 2];
    for (b, &i) in bands.iter().zip(test) {
        let class = ds.subject(i).event as usize;
        counts[class] += 1;
        hits[class] += hit(b, i) as usize;
    }
    let rate = |c: usize| (counts[c] > 0).then(|| hits[c] as f64 / counts[c] as f64);
    let lengths: Vec<f64> = bands.iter().map(ConfidenceBand::length).collect();
    let (mean_length, sd_length) = mean_sd(&lengths);
    Ok(EvalReport {
        coverage_total: (hits[0] + hits[1]) as f64 / test.len() as f64,
        coverage_censored: rate(0),
        coverage_uncensored: rate(1),
        mean_length,
        sd_length,
        truncated_fraction: bands.iter().filter(|b| b.truncated).count() as f64 / bands.len() as f64,
        n_evaluated: test.len(),
        metric_kind: kind,
    })
}

/// Fraction of test subjects whose true survival time lies in their band.
/// `bands[j]` belongs to `test[j]`.
pub fn empirical_coverage(
    bands: &[ConfidenceBand],
    ds: &SurvivalDataset,
    test: &[usize],
) -> Result<EvalReport> {
    if let Some(&i) = test.iter().find(|&&i| ds.subject(i).true_time.is_none()) {
        return Err(Error::MissingTrueTime(i));
    }
    report(bands, ds, test, MetricKind::Empirical, |b, i| {
        b.contains(ds.subject(i).true_time.expect("checked above"))
    })
}

/// `𝕀(Y ∈ band, Δ = 1) + 𝕀(Y ≤ upper, Δ = 0)`, averaged over the test set.
pub fn surrogate_empirical_coverage(
    bands: &[ConfidenceBand],
    ds: &SurvivalDataset,
    test: &[usize],
) -> Result<EvalReport> {
    report(bands, ds, test, MetricKind::Surrogate, |b, i| {
        let s = ds.subject(i);
        if s.event {
            b.contains(s.observed_time)
        } else {
            s.observed_time <= b.upper
        }
    })
}

/// EC when every test subject has a true time, SEC otherwise.
pub fn best_available_coverage(
    bands: &[ConfidenceBand],
    ds: &SurvivalDataset,
    test: &[usize],
) -> Result<EvalReport> {
    if test.iter().all(|&i| ds.subject(i).true_time.is_some()) {
        empirical_coverage(bands, ds, test)
    } else {
        surrogate_empirical_coverage(bands, ds, test)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Median pairwise Euclidean distance between test covariates.
pub fn median_bandwidth(ds: &SurvivalDataset, test: &[usize]) -> f64 {
    let mut d: Vec<f64> = Vec::with_capacity(test.len() * test.len().saturating_sub(1) / 2);
    for (a, &i) in test.iter().enumerate() {
        for &j in &test[a + 1..] {
            d.push(sq_dist(&ds.subject(i).covariates, &ds.subject(j).covariates).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len() / 2;
    let med = if d.len() % 2 == 1 { d[m] } else { 0.5 * (d[m - 1] + d[m]) };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelLocalReport {
    pub centers: Vec<usize>,
    pub per_center: Vec<EvalReport>,
    pub mean_coverage: f64,
    pub sd_coverage: f64,
}

/// Local coverage around random centers.
///
/// Draws `n_centers` centers uniformly from `test`; around each center `x₀`
/// samples `n_per_center` test subjects with replacement, with probability
/// proportional to `exp(−‖x − x₀‖² / (2h²))`, and evaluates coverage on the
/// sample. `bandwidth = None` uses [`median_bandwidth`].
pub fn kernel_local_protocol(
    band_of: impl Fn(usize) -> ConfidenceBand + Sync,
    ds: &SurvivalDataset,
    test: &[usize],
    n_centers: usize,
    n_per_center: usize,
    bandwidth: Option<f64>,
    seed: u64,
) -> Result<KernelLocalReport> {
    if test.len() < n_per_center || n_centers == 0 || n_per_center == 0 {
        return Err(Error::InvalidArgument(format!(
            "need 0 < n_per_center ({n_per_center}) <= test size ({}) and n_centers > 0",
            test.len()
        )));
    }
    let h = bandwidth.unwrap_or_else(|| median_bandwidth(ds, test));
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {h}")));
    }
    let mut rng = rng_for(seed, 0xce);
    let centers: Vec<usize> = (0..n_centers)
        .map(|_| test[rng.random_range(0..test.len())])
        .collect();
    let bands: Vec<ConfidenceBand> = test.iter().map(|&i| band_of(i)).collect();
    let per_center = centers
        .par_iter()
        .enumerate()
        .map(|(c, &center)| {
            let x0 = &ds.subject(center).covariates;
            // log-kernel shifted by its max so the center's own weight is 1
            let logk: Vec<f64> = test
                .iter()
                .map(|&i| -sq_dist(&ds.subject(i).covariates, x0) / (2.0 * h * h))
                .collect();
            let top = logk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dist = WeightedIndex::new(logk.iter().map(|l| (l - top).exp()))
                .map_err(|e| Error::InvalidArgument(format!("kernel weights: {e}")))?;
            let mut local = rng_for(seed, 1 + c as u64);
            let picks: Vec<usize> = (0..n_per_center).map(|_| dist.sample(&mut local)).collect();
            let sample: Vec<usize> = picks.iter().map(|&p| test[p]).collect();
            let sample_bands: Vec<ConfidenceBand> = picks.iter().map(|&p| bands[p]).collect();
            best_available_coverage(&sample_bands, ds, &sample)
        })
        .collect::<Result<Vec<_>>>()?;
    let cov: Vec<f64> = per_center.iter().map(|r| r.coverage_total).collect();
    let (mean_coverage, sd_coverage) = mean_sd(&cov);
    Ok(KernelLocalReport {
        centers,
        per_center,
        mean_coverage,
        sd_coverage,
    })
}
