//! Replicated fit → calibrate → predict → evaluate runs.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::FirstStage;
use crate::data::{load_csv, split_dataset, CsvSchema, SplitFractions, SurvivalDataset};
use crate::error::{Error, Result};
use crate::eval::{best_available_coverage, MetricKind};
use crate::model::{fit_model, FitSettings, Method, PredictorSpec, Query};
use crate::numeric::{derive_seed, mean_sd};
use crate::synth::{generate, OracleWeight, SynthConfig};
use crate::weights::{WeightFunction, WeightOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    /// A fresh dataset per replication, seeded from the master seed.
    Synth(SynthConfig),
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightSource {
    #[default]
    Estimated,
    /// The generator's true weight; synthetic data only.
    Oracle,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputPaths {
    pub results: Option<PathBuf>,
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub fractions: SplitFractions,
    pub methods: Vec<Method>,
    pub alphas: Vec<f64>,
    pub replications: usize,
    pub master_seed: u64,
    pub predictor: PredictorSpec,
    pub weight_source: WeightSource,
    pub weights: WeightOptions,
    pub first_stage: FirstStage,
    pub shared_eta: bool,
    pub standardize: bool,
    pub output: OutputPaths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synth(SynthConfig::default()),
            fractions: SplitFractions::default(),
            methods: vec![Method::Naive, Method::Wcci, Method::Tsci],
            alphas: vec![0.05, 0.1],
            replications: 10,
            master_seed: 0,
            predictor: PredictorSpec::default(),
            weight_source: WeightSource::Estimated,
            weights: WeightOptions::default(),
            first_stage: FirstStage::default(),
            shared_eta: false,
            standardize: true,
            output: OutputPaths::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::Config("alphas must be nonempty and each in (0, 1)".into()));
        }
        if self.replications == 0 {
            return Err(Error::Config("replications must be positive".into()));
        }
        self.fractions
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.fractions.cal1 <= 0.0 || self.fractions.cal2 <= 0.0 || self.fractions.test <= 0.0 {
            return Err(Error::Config(
                "experiments need positive cal1, cal2 and test fractions".into(),
            ));
        }
        match &self.data {
            DataSource::Synth(s) => s.validate()?,
            DataSource::Csv { .. } if self.weight_source == WeightSource::Oracle => {
                return Err(Error::Config("oracle weights need a synthetic data source".into()));
            }
            DataSource::Csv { .. } => {}
        }
        Ok(())
    }

    pub fn fit_settings(&self, replication_seed: u64) -> FitSettings {
        let predictor = match &self.predictor {
            PredictorSpec::Mlp(opts) => PredictorSpec::Mlp(crate::predictor::MlpOptions {
                seed: derive_seed(opts.seed, replication_seed),
                ..opts.clone()
            }),
            other => other.clone(),
        };
        FitSettings {
            predictor,
            weights: self.weights,
            first_stage: self.first_stage,
            standardize: self.standardize,
        }
    }
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub alpha: f64,
    pub replication: usize,
    pub coverage_total: f64,
    pub coverage_censored: Option<f64>,
    pub coverage_uncensored: Option<f64>,
    pub mean_length: f64,
    pub sd_length: f64,
    pub truncated_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationFailure {
    pub replication: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<ReplicationFailure>,
    pub replications: usize,
    pub metric_kind: Option<MetricKind>,
}

impl ExperimentOutcome {
    /// More than a fifth of the replications failed.
    pub fn excessive_failures(&self) -> bool {
        5 * self.failures.len() > self.replications
    }
}

enum Shared {
    Synth {
        config: SynthConfig,
        oracle: Option<OracleWeight>,
    },
    Csv(SurvivalDataset),
}

fn run_replication(cfg: &ExperimentConfig, shared: &Shared, r: usize) -> Result<(Vec<ResultRow>, MetricKind)> {
    let seed = derive_seed(cfg.master_seed, r as u64);
    let generated;
    let (ds, oracle) = match shared {
        Shared::Synth { config, oracle } => {
            generated = generate(&SynthConfig {
                seed,
                ..config.clone()
            })?;
            (&generated, oracle.as_ref())
        }
        Shared::Csv(ds) => (ds, None),
    };
    let split = split_dataset(ds.len(), cfg.fractions, seed)?;
    let external = oracle.map(|o| o as &dyn WeightFunction);
    let model = fit_model(ds, &split, &cfg.fit_settings(seed), external)?;
    let queries: Vec<Query> = split
        .test
        .iter()
        .map(|&i| {
            let x = &ds.subject(i).covariates;
            let q = model.query(x)?;
            Ok(match oracle {
                Some(o) => Query {
                    weight: o.weight(x),
                    ..q
                },
                None => q,
            })
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut kind = MetricKind::Empirical;
    for &method in &cfg.methods {
        for &alpha in &cfg.alphas {
            let bands = model.predict(method, alpha, &queries, cfg.shared_eta)?;
            let report = best_available_coverage(&bands, ds, &split.test)?;
            kind = report.metric_kind;
            rows.push(ResultRow {
                method,
                alpha,
                replication: r,
                coverage_total: report.coverage_total,
                coverage_censored: report.coverage_censored,
                coverage_uncensored: report.coverage_uncensored,
                mean_length: report.mean_length,
                sd_length: report.sd_length,
                truncated_fraction: report.truncated_fraction,
            });
        }
    }
    Ok((rows, kind))
}

/// Runs every replication (in parallel) and collects rows ordered by
/// replication, then method and alpha in config order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let shared = match &cfg.data {
        DataSource::Synth(s) => Shared::Synth {
            config: s.clone(),
            oracle: match cfg.weight_source {
                WeightSource::Oracle => Some(OracleWeight::new(s)?),
                WeightSource::Estimated => None,
            },
        },
        DataSource::Csv { path, schema } => Shared::Csv(load_csv(path, schema)?),
    };
    let results: Vec<_> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| (r, run_replication(cfg, &shared, r)))
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut metric_kind = None;
    for (r, res) in results {
        match res {
            Ok((mut rs, kind)) => {
                rows.append(&mut rs);
                metric_kind = Some(kind);
            }
            Err(e) => {
                log::error!("replication {r} failed: {e}");
                failures.push(ReplicationFailure {
                    replication: r,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(ExperimentOutcome {
        rows,
        failures,
        replications: cfg.replications,
        metric_kind,
    })
}

pub fn write_results<W: Write>(rows: &[ResultRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record([
            "method",
            "alpha",
            "replication",
            "coverage_total",
            "coverage_censored",
            "coverage_uncensored",
            "mean_length",
            "sd_length",
            "truncated_fraction",
        ])?;
    }
    w.flush().map_err(|e| Error::io("<results>", e))?;
    Ok(())
}

pub fn read_results<R: Read>(reader: R) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(reader);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Mean and sample sd of one metric across replications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    fn of(values: &[f64]) -> Option<Self> {
        (!values.is_empty()).then(|| {
            let (mean, sd) = mean_sd(values);
            Self { mean, sd }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub alpha: f64,
    pub replications: usize,
    pub coverage_total: MeanSd,
    pub coverage_censored: Option<MeanSd>,
    pub coverage_uncensored: Option<MeanSd>,
    pub mean_length: MeanSd,
    pub truncated_fraction: MeanSd,
}

/// Groups rows by `(method, alpha)`, in order of first appearance.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: Vec<((Method, u64), Vec<&ResultRow>)> = Vec::new();
    for row in rows {
        let key = (row.method, row.alpha.to_bits());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(row),
            None => groups.push((key, vec![row])),
        }
    }
    groups
        .into_iter()
        .map(|(_, g)| {
            let col = |f: &dyn Fn(&ResultRow) -> Option<f64>| -> Vec<f64> { g.iter().filter_map(|r| f(r)).collect() };
            SummaryRow {
                method: g[0].method,
                alpha: g[0].alpha,
                replications: g.len(),
                coverage_total: MeanSd::of(&col(&|r| Some(r.coverage_total))).expect("group is nonempty"),
                coverage_censored: MeanSd::of(&col(&|r| r.coverage_censored)),
                coverage_uncensored: MeanSd::of(&col(&|r| r.coverage_uncensored)),
                mean_length: MeanSd::of(&col(&|r| Some(r.mean_length))).expect("group is nonempty"),
                truncated_fraction: MeanSd::of(&col(&|r| Some(r.truncated_fraction))).expect("group is nonempty"),
            }
        })
        .collect()
}

pub fn summary_json(rows: &[ResultRow]) -> Result<String> {
    Ok(serde_json::to_string_pretty(&summarize(rows))?)
}

/// Plain-text table of `summarize(rows)`, one line per `(method, alpha)`.
pub fn format_summary(rows: &[ResultRow]) -> String {
    let fmt = |m: Option<MeanSd>| m.map_or_else(|| "-".to_string(), |m| format!("{:.3} ± {:.3}", m.mean, m.sd));
    let mut out = format!(
        "{:<16} {:>6} {:>5}  {:>15}  {:>15}  {:>15}  {:>15}  {:>15}\n",
        "method", "alpha", "reps", "total", "censored", "uncensored", "length", "truncated"
    );
    for s in summarize(rows) {
        out.push_str(&format!(
            "{:<16} {:>6} {:>5}  {:>15}  {:>15}  {:>15}  {:>15}  {:>15}\n",
            s.method.name(),
            s.alpha,
            s.replications,
            fmt(Some(s.coverage_total)),
            fmt(s.coverage_censored),
            fmt(s.coverage_uncensored),
            fmt(Some(s.mean_length)),
            fmt(Some(s.truncated_fraction)),
        ));
    }
    out
}
