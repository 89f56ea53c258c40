//! Conformal confidence bands for right-censored survival times.
//!
//! The crate fits a Cox-type risk predictor `g(x)` (linear Cox regression or
//! a small MLP trained on the partial likelihood), scores calibration subjects
//! with the per-sample partial log-likelihood, and inverts a weighted
//! conformal quantile into a band on the survival time. Two procedures are
//! provided:
//!
//! - [`conformal::wcci`]: a one-stage weighted conformal band whose weights
//!   correct the covariate shift between censored and uncensored subjects.
//! - [`conformal::tsci`]: a two-stage procedure that recalibrates the
//!   one-stage band with a boundary-distance score, bounding coverage from
//!   both sides.
//!
//! [`synth`] generates proportional-hazards data with known survival times so
//! coverage can be measured exactly, and [`eval`] computes the coverage
//! metrics. [`experiment`] wires everything into replicated runs.

pub mod conformal;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod numeric;
pub mod predictor;
pub mod synth;
pub mod weights;

pub use conformal::{CandidateGrid, ConfidenceBand, FirstStageBand, WeightedScoreDistribution};
pub use data::{FoldSplit, Normalization, Subject, SurvivalDataset};
pub use error::{Error, Result};
pub use predictor::{BaselineHazard, LinearPredictor, MlpPredictor, Predictor, RiskScore};
pub use weights::{NormalizedWeights, UnitWeight, WeightFunction, WeightModel};
