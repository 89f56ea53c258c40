//! Synthetic proportional-hazards data with known survival times.
//!
//! `X ~ N(0, I)`, cumulative hazard `Λ(t | x) = t^k · exp(g(x))`, so
//! `T = (−log U · e^{−g(x)})^{1/k}` by inversion. Censoring is exponential
//! with log-rate affine in `x`, drawn independently of `T` given `X`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Normalization, Subject, SurvivalDataset};
use crate::error::{Error, Result};
use crate::numeric::{integrate, rng_for};
use crate::weights::WeightFunction;

/// Log-rate intercept giving roughly 30% censoring under
/// [`SynthConfig::default`] (see `calibrate_censor_intercept`).
pub const DEFAULT_CENSOR_INTERCEPT: f64 = -0.952;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PredictorKind {
    Linear { beta: Vec<f64> },
    /// `c1·x1·x2 + c2·sin(x3) + c3·x1²`.
    Nonlinear { c1: f64, c2: f64, c3: f64 },
}

impl PredictorKind {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Self::Linear { beta } => beta.iter().zip(x).map(|(b, v)| b * v).sum(),
            Self::Nonlinear { c1, c2, c3 } => c1 * x[0] * x[1] + c2 * x[2].sin() + c3 * x[0] * x[0],
        }
    }

    fn min_dim(&self) -> usize {
        match self {
            Self::Linear { beta } => beta.len(),
            Self::Nonlinear { .. } => 3,
        }
    }
}

/// Exponential censoring with rate `exp(intercept + coefficients·x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensorModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

impl CensorModel {
    pub fn rate(&self, x: &[f64]) -> f64 {
        (self.intercept + self.coefficients.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n: usize,
    pub dim: usize,
    pub predictor: PredictorKind,
    pub baseline_shape: f64,
    /// `None` leaves every subject uncensored.
    pub censoring: Option<CensorModel>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            dim: 3,
            predictor: PredictorKind::Nonlinear {
                c1: 0.6,
                c2: 0.8,
                c3: 0.4,
            },
            baseline_shape: 2.0,
            censoring: Some(CensorModel {
                intercept: DEFAULT_CENSOR_INTERCEPT,
                coefficients: vec![1.0, 0.0, 0.0],
            }),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.dim == 0 {
            return Err(Error::Config("synthetic n and dim must be positive".into()));
        }
        if self.dim < self.predictor.min_dim() {
            return Err(Error::Config(format!(
                "predictor needs {} features but dim is {}",
                self.predictor.min_dim(),
                self.dim
            )));
        }
        if !(self.baseline_shape > 0.0 && self.baseline_shape.is_finite()) {
            return Err(Error::Config(format!(
                "baseline shape must be positive, got {}",
                self.baseline_shape
            )));
        }
        if let Some(c) = &self.censoring {
            if c.coefficients.len() > self.dim || !c.intercept.is_finite() {
                return Err(Error::Config("censoring coefficients exceed dim".into()));
            }
        }
        Ok(())
    }

    /// `P(T ≤ C | X = x)` by quadrature over `u = Λ(T | x) ~ Exp(1)`.
    pub fn event_probability(&self, x: &[f64]) -> f64 {
        let Some(c) = &self.censoring else {
            return 1.0;
        };
        let rate = c.rate(x);
        let g = self.predictor.eval(x);
        let k = self.baseline_shape;
        integrate(
            |u| (-rate * (u * (-g).exp()).powf(1.0 / k) - u).exp(),
            0.0,
            50.0,
            1e-8,
        )
        .clamp(0.0, 1.0)
    }

    pub fn feature_names(&self) -> Vec<String> {
        (1..=self.dim).map(|j| format!("x{j}")).collect()
    }
}

fn draw_covariates<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<SurvivalDataset> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, 0x5e7);
    let subjects = (0..cfg.n)
        .map(|_| {
            let x = draw_covariates(cfg.dim, &mut rng);
            let u: f64 = 1.0 - rng.random::<f64>();
            let t = (-u.ln() * (-cfg.predictor.eval(&x)).exp()).powf(1.0 / cfg.baseline_shape);
            let c = match &cfg.censoring {
                Some(m) => -(1.0 - rng.random::<f64>()).ln() / m.rate(&x),
                None => f64::INFINITY,
            };
            if t <= c {
                Subject::new(x, t, true, Some(t))
            } else {
                Subject::new(x, c, false, Some(t))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    SurvivalDataset::new(subjects, cfg.feature_names())
}

/// The true `w(x) = P(Δ=1) / P(Δ=1 | X=x)` of a synthetic configuration.
#[derive(Debug, Clone)]
pub struct OracleWeight {
    config: SynthConfig,
    marginal: f64,
    input_normalization: Option<Normalization>,
}

impl OracleWeight {
    /// `P(Δ=1)` is estimated once by averaging the quadrature over 20000
    /// covariate draws.
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(0x0c1e, 0x0c1e);
        let draws = 20_000;
        let marginal = (0..draws)
            .map(|_| cfg.event_probability(&draw_covariates(cfg.dim, &mut rng)))
            .sum::<f64>()
            / draws as f64;
        Ok(Self {
            config: cfg.clone(),
            marginal,
            input_normalization: None,
        })
    }

    /// Evaluate on standardized inputs by inverting `norm` first.
    pub fn with_input_normalization(mut self, norm: Option<Normalization>) -> Self {
        self.input_normalization = norm;
        self
    }

    pub fn marginal_event_rate(&self) -> f64 {
        self.marginal
    }
}

impl WeightFunction for OracleWeight {
    fn weight(&self, x: &[f64]) -> f64 {
        let p = match &self.input_normalization {
            Some(n) => self.config.event_probability(&n.invert(x)),
            None => self.config.event_probability(x),
        };
        self.marginal / p.max(f64::MIN_POSITIVE)
    }
}

/// Expected censoring fraction `1 − E[P(Δ=1 | X)]` over `draws` covariates.
pub fn censoring_fraction(cfg: &SynthConfig, draws: usize) -> f64 {
    let mut rng = rng_for(0xf4ac, 0);
    1.0 - (0..draws)
        .map(|_| cfg.event_probability(&draw_covariates(cfg.dim, &mut rng)))
        .sum::<f64>()
        / draws as f64
}

/// Bisects the censoring intercept until the expected censoring fraction is
/// `target` (to 1e-4).
pub fn calibrate_censor_intercept(cfg: &SynthConfig, target: f64) -> Result<f64> {
    let Some(base) = &cfg.censoring else {
        return Err(Error::Config("configuration has no censoring model".into()));
    };
    if !(0.0 < target && target < 1.0) {
        return Err(Error::InvalidArgument(format!("target fraction {target} not in (0, 1)")));
    }
    let with = |b: f64| SynthConfig {
        censoring: Some(CensorModel {
            intercept: b,
            coefficients: base.coefficients.clone(),
        }),
        ..cfg.clone()
    };
    let (mut lo, mut hi) = (-20.0, 20.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if censoring_fraction(&with(mid), 4000) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-4 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Class-conditional means of one feature and their gap in units of the
/// feature's overall standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShiftReport {
    pub mean_uncensored: f64,
    pub mean_censored: f64,
    /// `(mean_censored − mean_uncensored) / sd`.
    pub standardized_gap: f64,
}

pub fn covariate_shift_report(ds: &SurvivalDataset, feature: usize) -> Result<ShiftReport> {
    if feature >= ds.dim() {
        return Err(Error::InvalidArgument(format!(
            "feature {feature} out of range for dim {}",
            ds.dim()
        )));
    }
    let class_mean = |event: bool| {
        let v: Vec<f64> = ds
            .subjects()
            .iter()
            .filter(|s| s.event == event)
            .map(|s| s.covariates[feature])
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let (Some(mu1), Some(mu0)) = (class_mean(true), class_mean(false)) else {
        return Err(Error::InsufficientData(
            "covariate shift needs both censored and uncensored subjects".into(),
        ));
    };
    let n = ds.len() as f64;
    let mean = ds.subjects().iter().map(|s| s.covariates[feature]).sum::<f64>() / n;
    let sd = (ds
        .subjects()
        .iter()
        .map(|s| (s.covariates[feature] - mean).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(ShiftReport {
        mean_uncensored: mu1,
        mean_censored: mu0,
        standardized_gap: (mu0 - mu1) / sd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::weight_at;

    fn exp1_config(n: usize) -> SynthConfig {
        SynthConfig {
            n,
            dim: 1,
            predictor: PredictorKind::Linear { beta: vec![0.0] },
            baseline_shape: 1.0,
            censoring: None,
            seed: 5,
        }
    }

    #[test]
    fn exponential_mean() {
        let ds = generate(&exp1_config(50_000)).unwrap();
        let mean = ds.subjects().iter().map(|s| s.true_time.unwrap()).sum::<f64>() / 50_000.0;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
        assert!(ds.subjects().iter().all(|s| s.event));
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig {
            n: 300,
            ..SynthConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn cumulative_hazard_is_unit_exponential() {
        let cfg = SynthConfig {
            n: 10_000,
            seed: 11,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let mut u: Vec<f64> = ds
            .subjects()
            .iter()
            .map(|s| s.true_time.unwrap().powf(cfg.baseline_shape) * cfg.predictor.eval(&s.covariates).exp())
            .collect();
        u.sort_by(f64::total_cmp);
        let n = u.len() as f64;
        let ks = u
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let f = 1.0 - (-v).exp();
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 1.628 / n.sqrt(), "KS = {ks}");
    }

    #[test]
    fn censoring_relations_hold() {
        let ds = generate(&SynthConfig::default()).unwrap();
        for s in ds.subjects() {
            let t = s.true_time.unwrap();
            if s.event {
                assert_eq!(t, s.observed_time);
            } else {
                assert!(t > s.observed_time);
            }
        }
    }

    #[test]
    fn default_censoring_fraction_near_target() {
        let cfg = SynthConfig {
            n: 10_000,
            seed: 3,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let frac = ds.subjects().iter().filter(|s| !s.event).count() as f64 / 10_000.0;
        assert!((frac - 0.3).abs() < 0.03, "{frac}");
        let b = calibrate_censor_intercept(&cfg, 0.3).unwrap();
        assert!((b - DEFAULT_CENSOR_INTERCEPT).abs() < 0.05, "{b}");
    }

    #[test]
    fn event_probability_closed_form() {
        // k = 1, g = 0, constant rate λ: P(T ≤ C) = 1 / (1 + λ)
        let cfg = SynthConfig {
            censoring: Some(CensorModel {
                intercept: 0.5f64.ln(),
                coefficients: vec![],
            }),
            ..exp1_config(1)
        };
        assert!((cfg.event_probability(&[0.3]) - 1.0 / 1.5).abs() < 1e-7);
        // and against simulation for the default configuration
        let cfg = SynthConfig::default();
        let x = [0.7, -0.4, 1.1];
        let mut rng = rng_for(1, 1);
        let g = cfg.predictor.eval(&x);
        let rate = cfg.censoring.as_ref().unwrap().rate(&x);
        let m = 200_000;
        let hits = (0..m)
            .filter(|_| {
                let t = (-(1.0 - rng.random::<f64>()).ln() * (-g).exp()).sqrt();
                let c = -(1.0 - rng.random::<f64>()).ln() / rate;
                t <= c
            })
            .count() as f64
            / m as f64;
        assert!((cfg.event_probability(&x) - hits).abs() < 0.005);
    }

    #[test]
    fn oracle_weight_averages_one_over_uncensored() {
        let cfg = SynthConfig {
            n: 20_000,
            seed: 21,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let oracle = OracleWeight::new(&cfg).unwrap();
        let w: Vec<f64> = ds
            .subjects()
            .iter()
            .filter(|s| s.event)
            .map(|s| oracle.weight(&s.covariates))
            .collect();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn oracle_weight_inverts_normalization() {
        let cfg = SynthConfig::default();
        let oracle = OracleWeight::new(&cfg).unwrap();
        let norm = Normalization {
            mean: vec![1.0, -1.0, 0.5],
            scale: vec![2.0, 0.5, 1.0],
        };
        let x = [0.3, 0.2, -0.1];
        let z = norm.apply(&x);
        let on_z = oracle.clone().with_input_normalization(Some(norm));
        assert!((on_z.weight(&z) - oracle.weight(&x)).abs() < 1e-12);
    }

    #[test]
    fn independent_censoring_has_no_shift() {
        let cfg = SynthConfig {
            n: 20_000,
            censoring: Some(CensorModel {
                intercept: -1.0,
                coefficients: vec![0.0, 0.0, 0.0],
            }),
            predictor: PredictorKind::Linear { beta: vec![0.0, 0.0, 0.5] },
            seed: 8,
            ..SynthConfig::default()
        };
        let r = covariate_shift_report(&generate(&cfg).unwrap(), 0).unwrap();
        assert!(r.standardized_gap.abs() < 0.05, "{r:?}");
        let oracle = OracleWeight::new(&cfg).unwrap();
        // constant censoring rate but g depends on x3, so only x3 moves w
        assert!((oracle.weight(&[2.0, 0.0, 0.0]) - oracle.weight(&[-2.0, 1.0, 0.0])).abs() < 1e-9);
    }

    #[test]
    fn censoring_that_rises_with_x1_shifts_censored_mean_up() {
        let cfg = SynthConfig {
            n: 5000,
            censoring: Some(CensorModel {
                intercept: -1.0,
                coefficients: vec![2.0],
            }),
            seed: 9,
            ..SynthConfig::default()
        };
        let r = covariate_shift_report(&generate(&cfg).unwrap(), 0).unwrap();
        assert!(r.mean_uncensored < r.mean_censored);
        assert!(r.standardized_gap > 0.0);
    }

    #[test]
    fn two_subject_shift_report() {
        let subjects = vec![
            Subject::new(vec![1.0], 1.0, true, None).unwrap(),
            Subject::new(vec![3.0], 1.0, false, None).unwrap(),
        ];
        let ds = SurvivalDataset::new(subjects, vec!["x".into()]).unwrap();
        let r = covariate_shift_report(&ds, 0).unwrap();
        assert_eq!((r.mean_uncensored, r.mean_censored, r.standardized_gap), (1.0, 3.0, 2.0));
        let single = SurvivalDataset::new(vec![ds.subject(0).clone()], vec!["x".into()]).unwrap();
        assert!(covariate_shift_report(&single, 0).is_err());
    }

    #[test]
    fn estimated_weights_track_the_oracle() {
        use crate::weights::{fit_weight_model, WeightOptions};
        let cfg = SynthConfig {
            n: 8000,
            predictor: PredictorKind::Linear { beta: vec![0.5, 0.0, 0.0] },
            seed: 4,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let m = fit_weight_model(&ds, &ds.all_indices(), &WeightOptions::default()).unwrap();
        let oracle = OracleWeight::new(&cfg).unwrap();
        for x in [[-1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]] {
            let ratio = weight_at(&m, &x) / oracle.weight(&x);
            assert!((ratio - 1.0).abs() < 0.2, "x={x:?} ratio={ratio}");
        }
    }
}
