//! A fitted band model: predictor, baseline hazard, weight model and both
//! calibration folds, serializable to a versioned JSON document.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conformal::{
    second_stage_score, tsci_predict, wcci_calibrate, wcci_predict, wcci_predict_two_sided,
    CandidateGrid, ConfidenceBand, FirstStage, FirstStageBand, RiskTable, TsciCalibration,
    WcciCalibration,
};
use crate::data::{FoldSplit, Normalization, SurvivalDataset};
use crate::error::{Error, Result};
use crate::predictor::{
    breslow, fit_linear, fit_mlp, naive_band, BaselineHazard, LinearOptions, MlpOptions, Predictor,
    RiskScore,
};
use crate::weights::{fit_weight_model, UnitWeight, WeightFunction, WeightModel, WeightOptions};

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Naive,
    Wcci,
    Tsci,
    WcciUnweighted,
    TsciUnweighted,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Naive,
        Method::Wcci,
        Method::Tsci,
        Method::WcciUnweighted,
        Method::TsciUnweighted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Wcci => "wcci",
            Method::Tsci => "tsci",
            Method::WcciUnweighted => "wcci_unweighted",
            Method::TsciUnweighted => "tsci_unweighted",
        }
    }

    /// Unweighted variants run the weighted code path with every weight set to 1.
    pub fn forces_unit_weights(self) -> bool {
        matches!(self, Method::WcciUnweighted | Method::TsciUnweighted)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PredictorSpec {
    Linear(LinearOptions),
    Mlp(MlpOptions),
}

impl Default for PredictorSpec {
    fn default() -> Self {
        Self::Linear(LinearOptions::default())
    }
}

/// Everything needed to turn raw data and a split into a [`FittedModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitSettings {
    pub predictor: PredictorSpec,
    pub weights: WeightOptions,
    pub first_stage: FirstStage,
    /// Standardize covariates with training-fold statistics.
    pub standardize: bool,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            predictor: PredictorSpec::default(),
            weights: WeightOptions::default(),
            first_stage: FirstStage::default(),
            standardize: true,
        }
    }
}

/// An uncensored subject of the second calibration fold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub risk: f64,
    pub time: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub version: u32,
    pub feature_names: Vec<String>,
    pub normalization: Option<Normalization>,
    pub predictor: Predictor,
    pub baseline: BaselineHazard,
    pub risk_table: RiskTable,
    pub grid: CandidateGrid,
    /// `None` means unit weights (for instance a training fold without censoring).
    pub weight_model: Option<WeightModel>,
    pub cal1: WcciCalibration,
    pub cal2: Vec<CalibrationPoint>,
    pub first_stage: FirstStage,
}

/// Query covariates mapped to what band construction needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Query {
    pub risk: f64,
    pub weight: f64,
}

/// Fits every component on `split` of the raw dataset `ds`.
///
/// `external_weight`, when given, replaces the estimated weight model and is
/// evaluated on raw covariates; it is used for calibration weights only, so
/// callers supply matching query weights themselves.
pub fn fit_model(
    ds: &SurvivalDataset,
    split: &FoldSplit,
    settings: &FitSettings,
    external_weight: Option<&dyn WeightFunction>,
) -> Result<FittedModel> {
    if split.train.is_empty() || split.cal1.is_empty() || split.cal2.is_empty() {
        return Err(Error::InsufficientData(
            "training and both calibration folds must be nonempty".into(),
        ));
    }
    let raw = ds.denormalized();
    let (work, normalization) = if settings.standardize {
        let norm = Normalization::fit(&raw, &split.train)?;
        (raw.with_normalization(norm.clone())?, Some(norm))
    } else {
        (raw.clone(), None)
    };

    let predictor = match &settings.predictor {
        PredictorSpec::Linear(opts) => {
            let fit = fit_linear(&work, &split.train, opts)?;
            if !fit.converged {
                log::warn!("Cox regression stopped after {} iterations without converging", fit.iterations);
            }
            Predictor::Linear(fit.predictor)
        }
        PredictorSpec::Mlp(opts) => Predictor::Mlp(fit_mlp(&work, &split.train, opts)?.model),
    };
    let g = predictor.risks(&work);
    let baseline = breslow(&work, &split.train, &g);
    let risk_table = RiskTable::new(&work, &split.train, &g);
    let max_duration = split
        .train
        .iter()
        .map(|&k| work.subject(k).observed_time)
        .fold(0.0, f64::max);
    let grid = CandidateGrid::from_training(&work, &split.train, max_duration)?;

    let has_censoring = split.train.iter().any(|&k| !work.subject(k).event);
    let weight_model = if external_weight.is_some() {
        None
    } else if has_censoring {
        Some(fit_weight_model(&work, &split.train, &settings.weights)?)
    } else {
        log::info!("training fold has no censoring; using unit weights");
        None
    };
    let weight_of = |i: usize| match (external_weight, &weight_model) {
        (Some(w), _) => w.weight(&raw.subject(i).covariates),
        (None, Some(m)) => m.weight(&work.subject(i).covariates),
        (None, None) => UnitWeight.weight(&[]),
    };

    let cal1 = {
        let mut scores = Vec::new();
        let mut raw_weights = Vec::new();
        for &i in &split.cal1 {
            let s = work.subject(i);
            if s.event {
                scores.push(risk_table.score(g[i], s.observed_time));
                raw_weights.push(weight_of(i));
            }
        }
        if scores.is_empty() {
            return Err(Error::InsufficientData(
                "calibration fold has no uncensored subjects".into(),
            ));
        }
        WcciCalibration { scores, raw_weights }
    };
    let cal2: Vec<CalibrationPoint> = split
        .cal2
        .iter()
        .filter(|&&i| work.subject(i).event)
        .map(|&i| CalibrationPoint {
            risk: g[i],
            time: work.subject(i).observed_time,
            weight: weight_of(i),
        })
        .collect();
    if cal2.is_empty() {
        return Err(Error::InsufficientData(
            "second calibration fold has no uncensored subjects".into(),
        ));
    }
    if cal1.raw_weights.iter().chain(cal2.iter().map(|p| &p.weight)).any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::NonFinite("calibration weight is not positive and finite".into()));
    }

    Ok(FittedModel {
        version: MODEL_VERSION,
        feature_names: ds.feature_names().to_vec(),
        normalization,
        predictor,
        baseline,
        risk_table,
        grid,
        weight_model,
        cal1,
        cal2,
        first_stage: settings.first_stage,
    })
}

impl FittedModel {
    pub fn max_duration(&self) -> f64 {
        self.grid.max_duration()
    }

    /// Risk and weight of raw (unstandardized) covariates.
    pub fn query(&self, raw_x: &[f64]) -> Result<Query> {
        if raw_x.len() != self.feature_names.len() {
            return Err(Error::InvalidArgument(format!(
                "query has {} features, model expects {}",
                raw_x.len(),
                self.feature_names.len()
            )));
        }
        let z = match &self.normalization {
            Some(n) => n.apply(raw_x),
            None => raw_x.to_vec(),
        };
        Ok(Query {
            risk: self.predictor.risk(&z),
            weight: self.weight_model.as_ref().map_or(1.0, |m| m.weight(&z)),
        })
    }

    fn first_stage_band(&self, calib: &WcciCalibration, q: Query, alpha: f64) -> FirstStageBand {
        let b = match self.first_stage {
            FirstStage::Hull => wcci_predict(&self.risk_table, calib, q.risk, q.weight, alpha, &self.grid),
            FirstStage::Split => {
                wcci_predict_two_sided(&self.risk_table, calib, q.risk, q.weight, alpha, &self.grid)
            }
        };
        b.into()
    }

    /// Second-stage calibration at level `alpha`.
    pub fn tsci_calibration(&self, alpha: f64, unit_weights: bool) -> TsciCalibration {
        let cal1 = if unit_weights { self.cal1.unweighted() } else { self.cal1.clone() };
        let (scores, raw_weights) = self
            .cal2
            .iter()
            .map(|p| {
                let w = if unit_weights { 1.0 } else { p.weight };
                let fs = self.first_stage_band(&cal1, Query { risk: p.risk, weight: w }, alpha);
                (second_stage_score(fs, p.time), w)
            })
            .unzip();
        TsciCalibration { scores, raw_weights }
    }

    /// One band per query. `shared_eta` computes a single `η` using the mean
    /// query weight for the infinity mass instead of one per query.
    pub fn predict(&self, method: Method, alpha: f64, queries: &[Query], shared_eta: bool) -> Result<Vec<ConfidenceBand>> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha {alpha} not in (0, 1)")));
        }
        let unit = method.forces_unit_weights();
        let queries: Vec<Query> = queries
            .iter()
            .map(|q| Query {
                weight: if unit { 1.0 } else { q.weight },
                ..*q
            })
            .collect();
        if let Some(q) = queries.iter().find(|q| !(q.weight > 0.0 && q.weight.is_finite() && q.risk.is_finite())) {
            return Err(Error::NonFinite(format!("query risk/weight {q:?}")));
        }
        let max = self.max_duration();
        let cal1 = if unit { self.cal1.unweighted() } else { self.cal1.clone() };
        Ok(match method {
            Method::Naive => queries
                .iter()
                .map(|q| naive_band(q.risk, &self.baseline, alpha, max))
                .collect(),
            Method::Wcci | Method::WcciUnweighted => queries
                .iter()
                .map(|q| wcci_predict(&self.risk_table, &cal1, q.risk, q.weight, alpha, &self.grid))
                .collect(),
            Method::Tsci | Method::TsciUnweighted => {
                let calib = self.tsci_calibration(alpha, unit);
                let shared = shared_eta.then(|| {
                    let mean_w = queries.iter().map(|q| q.weight).sum::<f64>() / queries.len().max(1) as f64;
                    calib.eta(mean_w, alpha)
                });
                queries
                    .iter()
                    .map(|&q| {
                        let eta = shared.unwrap_or_else(|| calib.eta(q.weight, alpha));
                        tsci_predict(self.first_stage_band(&cal1, q, alpha), eta, max)
                    })
                    .collect()
            }
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.version != MODEL_VERSION {
            return Err(Error::Config(format!(
                "model version {} is not supported (expected {MODEL_VERSION})",
                m.version
            )));
        }
        Ok(m)
    }
}

/// Same calibration the one-stage module computes from a dataset, exposed for
/// cross-checking [`fit_model`].
pub fn cal1_reference(
    model: &FittedModel,
    ds_standardized: &SurvivalDataset,
    cal1: &[usize],
    weight: &dyn WeightFunction,
) -> Result<WcciCalibration> {
    wcci_calibrate(&model.risk_table, &model.predictor, weight, ds_standardized, cal1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_dataset, SplitFractions};
    use crate::synth::{generate, SynthConfig};

    fn fitted(first_stage: FirstStage) -> (SurvivalDataset, FoldSplit, FittedModel) {
        let ds = generate(&SynthConfig {
            n: 1000,
            seed: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        let split = split_dataset(ds.len(), SplitFractions::new(0.6, 0.15, 0.15, 0.1), 9).unwrap();
        let settings = FitSettings {
            first_stage,
            ..FitSettings::default()
        };
        let m = fit_model(&ds, &split, &settings, None).unwrap();
        (ds, split, m)
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("cqr".parse::<Method>().is_err());
    }

    #[test]
    fn calibration_matches_module_path() {
        let (ds, split, m) = fitted(FirstStage::Split);
        let z = ds.with_normalization(m.normalization.clone().unwrap()).unwrap();
        let reference = cal1_reference(&m, &z, &split.cal1, m.weight_model.as_ref().unwrap()).unwrap();
        assert_eq!(reference.scores.len(), m.cal1.scores.len());
        for (a, b) in reference.scores.iter().zip(&m.cal1.scores) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(reference.raw_weights, m.cal1.raw_weights);
    }

    #[test]
    fn json_round_trip() {
        let (_, _, m) = fitted(FirstStage::Hull);
        let back = FittedModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let mut old = m.clone();
        old.version = 99;
        assert!(FittedModel::from_json(&old.to_json().unwrap()).is_err());
    }

    #[test]
    fn bands_for_every_method() {
        let (ds, split, m) = fitted(FirstStage::Split);
        let queries: Vec<Query> = split
            .test
            .iter()
            .map(|&i| m.query(&ds.subject(i).covariates).unwrap())
            .collect();
        for method in Method::ALL {
            for shared in [false, true] {
                let bands = m.predict(method, 0.1, &queries, shared).unwrap();
                assert_eq!(bands.len(), queries.len());
                for b in &bands {
                    assert!(0.0 <= b.lower && b.lower <= b.upper && b.upper <= m.max_duration());
                }
            }
        }
        assert!(m.predict(Method::Wcci, 1.0, &queries, false).is_err());
    }

    #[test]
    fn unweighted_methods_ignore_query_weights() {
        let (ds, split, m) = fitted(FirstStage::Split);
        let q: Vec<Query> = split.test.iter().map(|&i| m.query(&ds.subject(i).covariates).unwrap()).collect();
        let ones: Vec<Query> = q.iter().map(|x| Query { weight: 1.0, ..*x }).collect();
        let mut unit_model = m.clone();
        unit_model.cal1.raw_weights.iter_mut().for_each(|w| *w = 1.0);
        unit_model.cal2.iter_mut().for_each(|p| p.weight = 1.0);
        assert_eq!(
            m.predict(Method::TsciUnweighted, 0.1, &q, false).unwrap(),
            unit_model.predict(Method::Tsci, 0.1, &ones, false).unwrap()
        );
        assert_eq!(
            m.predict(Method::WcciUnweighted, 0.1, &q, false).unwrap(),
            unit_model.predict(Method::Wcci, 0.1, &ones, false).unwrap()
        );
    }

    #[test]
    fn bands_invariant_to_weight_rescaling() {
        let (ds, split, m) = fitted(FirstStage::Split);
        let q: Vec<Query> = split.test.iter().map(|&i| m.query(&ds.subject(i).covariates).unwrap()).collect();
        for c in [1e-3, 0.37, 8.0, 1e3] {
            let mut scaled = m.clone();
            scaled.cal1.raw_weights.iter_mut().for_each(|w| *w *= c);
            scaled.cal2.iter_mut().for_each(|p| p.weight *= c);
            let qs: Vec<Query> = q.iter().map(|x| Query { weight: x.weight * c, ..*x }).collect();
            for method in [Method::Wcci, Method::Tsci] {
                let a = m.predict(method, 0.1, &q, false).unwrap();
                let b = scaled.predict(method, 0.1, &qs, false).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    assert!((x.lower - y.lower).abs() <= 1e-12 && (x.upper - y.upper).abs() <= 1e-12);
                }
            }
        }
    }
}
