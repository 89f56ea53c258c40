//! Dataset model, CSV ingestion, feature normalization and fold splitting.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::rng_for;

/// One individual: covariates, observed time `Y = min(T, C)`, event indicator
/// and (for synthetic data) the true survival time `T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub covariates: Vec<f64>,
    pub observed_time: f64,
    /// `true` when the survival time was observed (uncensored).
    pub event: bool,
    pub true_time: Option<f64>,
}

impl Subject {
    pub fn new(
        covariates: Vec<f64>,
        observed_time: f64,
        event: bool,
        true_time: Option<f64>,
    ) -> Result<Self> {
        if !observed_time.is_finite() || observed_time < 0.0 {
            return Err(Error::InvalidSubject(format!(
                "observed time must be finite and nonnegative, got {observed_time}"
            )));
        }
        if let Some(t) = true_time {
            if event && t != observed_time {
                return Err(Error::InvalidSubject(format!(
                    "uncensored subject has true time {t} != observed time {observed_time}"
                )));
            }
            if !event && t <= observed_time {
                return Err(Error::InvalidSubject(format!(
                    "censored subject has true time {t} <= observed time {observed_time}"
                )));
            }
        }
        Ok(Self {
            covariates,
            observed_time,
            event,
            true_time,
        })
    }
}

/// Per-feature affine standardization `(x - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    /// Estimates means and population standard deviations over `pool`.
    /// Zero-variance features keep scale 1.
    pub fn fit(ds: &SurvivalDataset, pool: &[usize]) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let d = ds.dim();
        let n = pool.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in pool {
            for (m, x) in mean.iter_mut().zip(&ds.subjects[i].covariates) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for &i in pool {
            for ((v, x), m) in var.iter_mut().zip(&ds.subjects[i].covariates).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let sd = (v / n).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalDataset {
    subjects: Vec<Subject>,
    feature_names: Vec<String>,
    normalization: Option<Normalization>,
}

impl SurvivalDataset {
    pub fn new(subjects: Vec<Subject>, feature_names: Vec<String>) -> Result<Self> {
        let d = feature_names.len();
        if let Some((i, s)) = subjects
            .iter()
            .enumerate()
            .find(|(_, s)| s.covariates.len() != d)
        {
            return Err(Error::InvalidSubject(format!(
                "subject {i} has {} covariates, expected {d}",
                s.covariates.len()
            )));
        }
        Ok(Self {
            subjects,
            feature_names,
            normalization: None,
        })
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn subject(&self, i: usize) -> &Subject {
        &self.subjects[i]
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    pub fn max_observed_time(&self) -> f64 {
        self.subjects
            .iter()
            .map(|s| s.observed_time)
            .fold(0.0, f64::max)
    }

    /// Applies `norm` to every subject's covariates and records it.
    pub fn with_normalization(&self, norm: Normalization) -> Result<Self> {
        if norm.mean.len() != self.dim() || norm.scale.len() != self.dim() {
            return Err(Error::InvalidArgument(
                "normalization dimension does not match the dataset".into(),
            ));
        }
        if norm.scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument(
                "normalization scales must be positive".into(),
            ));
        }
        let subjects = self
            .subjects
            .iter()
            .map(|s| Subject {
                covariates: norm.apply(&s.covariates),
                ..s.clone()
            })
            .collect();
        Ok(Self {
            subjects,
            feature_names: self.feature_names.clone(),
            normalization: Some(norm),
        })
    }

    /// Undoes the stored normalization, if any.
    pub fn denormalized(&self) -> Self {
        match &self.normalization {
            None => self.clone(),
            Some(norm) => Self {
                subjects: self
                    .subjects
                    .iter()
                    .map(|s| Subject {
                        covariates: norm.invert(&s.covariates),
                        ..s.clone()
                    })
                    .collect(),
                feature_names: self.feature_names.clone(),
                normalization: None,
            },
        }
    }
}

/// Standardizes every feature to mean 0 and population standard deviation 1
/// over the whole dataset, storing the parameters for reuse.
pub fn normalize_features(ds: &SurvivalDataset) -> Result<SurvivalDataset> {
    let norm = Normalization::fit(ds, &ds.all_indices())?;
    ds.with_normalization(norm)
}

/// Column mapping for [`load_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub time_col: String,
    pub event_col: String,
    pub features: Vec<String>,
    #[serde(default)]
    pub true_time_col: Option<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            time_col: "time".into(),
            event_col: "event".into(),
            features: Vec::new(),
            true_time_col: None,
        }
    }
}

fn parse_event(raw: &str) -> Option<bool> {
    match raw.trim() {
        "true" | "TRUE" | "True" => Some(true),
        "false" | "FALSE" | "False" => Some(false),
        other => match other.parse::<f64>().ok()? {
            1.0 => Some(true),
            0.0 => Some(false),
            _ => None,
        },
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<SurvivalDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

/// Reads a dataset from any CSV source; rows are numbered from 1 after the header.
pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<SurvivalDataset> {
    if schema.features.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one feature column is required".into(),
        ));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let time_idx = col(&schema.time_col)?;
    let event_idx = col(&schema.event_col)?;
    let feature_idx = schema
        .features
        .iter()
        .map(|f| col(f))
        .collect::<Result<Vec<_>>>()?;
    let true_idx = schema.true_time_col.as_deref().map(col).transpose()?;

    let mut subjects = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let row = r + 1;
        let record = record?;
        let field = |idx: usize| record.get(idx).unwrap_or("");
        let number = |idx: usize, name: &str| -> Result<f64> {
            let raw = field(idx);
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    row,
                    column: name.to_string(),
                    message: format!("expected a finite number, got {raw:?}"),
                })
        };
        let covariates = feature_idx
            .iter()
            .zip(&schema.features)
            .map(|(&i, name)| number(i, name))
            .collect::<Result<Vec<_>>>()?;
        let time = number(time_idx, &schema.time_col)?;
        if time < 0.0 {
            return Err(Error::Parse {
                row,
                column: schema.time_col.clone(),
                message: format!("negative time {time}"),
            });
        }
        let event = parse_event(field(event_idx)).ok_or_else(|| Error::Parse {
            row,
            column: schema.event_col.clone(),
            message: format!("event must be 0 or 1, got {:?}", field(event_idx)),
        })?;
        let true_time = match (true_idx, schema.true_time_col.as_deref()) {
            (Some(i), Some(name)) if !field(i).is_empty() => Some(number(i, name)?),
            _ => None,
        };
        let subject = Subject::new(covariates, time, event, true_time).map_err(|e| {
            Error::Parse {
                row,
                column: schema
                    .true_time_col
                    .clone()
                    .unwrap_or_else(|| schema.time_col.clone()),
                message: e.to_string(),
            }
        })?;
        subjects.push(subject);
    }
    SurvivalDataset::new(subjects, schema.features.clone())
}

/// Writes the dataset as `features..., time, event[, true_time]`.
pub fn write_csv<W: std::io::Write>(ds: &SurvivalDataset, writer: W) -> Result<()> {
    let with_truth = ds.subjects.iter().any(|s| s.true_time.is_some());
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ds.feature_names.clone();
    header.push("time".into());
    header.push("event".into());
    if with_truth {
        header.push("true_time".into());
    }
    wtr.write_record(&header)?;
    for s in &ds.subjects {
        let mut rec: Vec<String> = s.covariates.iter().map(|v| v.to_string()).collect();
        rec.push(s.observed_time.to_string());
        rec.push(if s.event { "1" } else { "0" }.into());
        if with_truth {
            rec.push(s.true_time.map(|t| t.to_string()).unwrap_or_default());
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub cal1: f64,
    pub cal2: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, cal1: f64, cal2: f64, test: f64) -> Self {
        Self {
            train,
            cal1,
            cal2,
            test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.cal1, self.cal2, self.test];
        if parts.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(Error::InvalidArgument(
                "split fractions must be nonnegative".into(),
            ));
        }
        if self.train <= 0.0 {
            return Err(Error::InvalidArgument(
                "training fraction must be positive".into(),
            ));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self::new(0.8, 0.05, 0.05, 0.1)
    }
}

/// Disjoint index sets covering `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub cal1: Vec<usize>,
    pub cal2: Vec<usize>,
    pub test: Vec<usize>,
}

/// Random partition by uniform shuffling. Non-training folds get the rounded
/// fraction of `n`; the remainder goes to training.
pub fn split_dataset(n: usize, fractions: SplitFractions, seed: u64) -> Result<FoldSplit> {
    fractions.validate()?;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut sizes = [fractions.cal1, fractions.cal2, fractions.test]
        .map(|f| (f * n as f64).round() as usize);
    while sizes.iter().sum::<usize>() >= n {
        let largest = (0..3).max_by_key(|&i| sizes[i]).unwrap_or(0);
        sizes[largest] -= 1;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, 0x5917));
    let mut rest = order.as_slice();
    let mut take = |k: usize| {
        let (head, tail) = rest.split_at(k);
        rest = tail;
        let mut v = head.to_vec();
        v.sort_unstable();
        v
    };
    let cal1 = take(sizes[0]);
    let cal2 = take(sizes[1]);
    let test = take(sizes[2]);
    let train = take(n - sizes.iter().sum::<usize>());
    Ok(FoldSplit {
        train,
        cal1,
        cal2,
        test,
    })
}

/// Indices `k` in `pool` still at risk at `t-`, i.e. with `observed_time >= t`.
pub fn risk_set(ds: &SurvivalDataset, pool: &[usize], t: f64) -> Vec<usize> {
    pool.iter()
        .copied()
        .filter(|&k| ds.subjects[k].observed_time >= t)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema() -> CsvSchema {
        CsvSchema {
            features: vec!["x1".into()],
            ..CsvSchema::default()
        }
    }

    fn toy(times: &[f64]) -> SurvivalDataset {
        let subjects = times
            .iter()
            .map(|&t| Subject::new(vec![t], t, true, None).unwrap())
            .collect();
        SurvivalDataset::new(subjects, vec!["x1".into()]).unwrap()
    }

    #[test]
    fn reads_rows_in_file_order() {
        let csv = "x1,time,event\n0.5,1.0,1\n1.5,2.0,0\n-0.5,0.7,1\n";
        let ds = read_csv(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.subject(0).covariates, vec![0.5]);
        assert_eq!(ds.subject(1).observed_time, 2.0);
        assert!(!ds.subject(1).event);
        assert_eq!(ds.subject(2).covariates, vec![-0.5]);
        assert!(ds.subjects().iter().all(|s| s.true_time.is_none()));
    }

    #[test]
    fn header_only_is_empty_dataset() {
        let ds = read_csv("x1,time,event\n".as_bytes(), &schema()).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn negative_time_names_row_and_column() {
        let err = read_csv("x1,time,event\n0.1,-1,1\n".as_bytes(), &schema()).unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 1);
                assert_eq!(column, "time");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn bad_feature_and_event_are_rejected() {
        let err = read_csv("x1,time,event\nabc,1,1\n".as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, Error::Parse { ref column, .. } if column == "x1"));
        let err = read_csv("x1,time,event\n1,1,1\n1,1,2\n".as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, ref column, .. } if column == "event"));
    }

    #[test]
    fn true_time_column_is_optional() {
        let s = CsvSchema {
            true_time_col: Some("tt".into()),
            ..schema()
        };
        let ds = read_csv("x1,time,event,tt\n1,2,0,3\n1,2,1,2\n".as_bytes(), &s).unwrap();
        assert_eq!(ds.subject(0).true_time, Some(3.0));
        let err = read_csv("x1,time,event,tt\n1,2,0,1\n".as_bytes(), &s).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 1, .. }));
    }

    #[test]
    fn csv_write_read_round_trip() {
        let ds = toy(&[1.0, 2.5, 0.25]);
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &schema()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn normalization_examples() {
        let ds = toy(&[1.0, 2.0, 3.0]);
        let n = normalize_features(&ds).unwrap();
        let norm = n.normalization().unwrap();
        assert_eq!(norm.mean, vec![2.0]);
        // population sd of (1,2,3) is sqrt(2/3)
        assert!((norm.scale[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let z: Vec<f64> = n.subjects().iter().map(|s| s.covariates[0]).collect();
        assert!((z[0] + z[2]).abs() < 1e-15 && z[1] == 0.0);
        assert_eq!(norm.apply(&[2.0]), vec![0.0]);

        let subjects = (0..3)
            .map(|i| Subject::new(vec![5.0], i as f64, true, None).unwrap())
            .collect();
        let c = SurvivalDataset::new(subjects, vec!["c".into()]).unwrap();
        let n = normalize_features(&c).unwrap();
        assert_eq!(n.normalization().unwrap().scale, vec![1.0]);
        assert!(n.subjects().iter().all(|s| s.covariates == vec![0.0]));
    }

    #[test]
    fn normalizing_empty_dataset_fails() {
        let ds = SurvivalDataset::new(vec![], vec!["x".into()]).unwrap();
        assert!(matches!(normalize_features(&ds), Err(Error::EmptyDataset)));
    }

    #[test]
    fn split_examples() {
        let f = SplitFractions::new(0.8, 0.0, 0.1, 0.1);
        let s = split_dataset(10, f, 7).unwrap();
        assert_eq!(
            (s.train.len(), s.cal1.len(), s.cal2.len(), s.test.len()),
            (8, 0, 1, 1)
        );
        assert_eq!(s, split_dataset(10, f, 7).unwrap());
        assert!(split_dataset(10, SplitFractions::new(0.5, 0.5, 0.5, 0.0), 7).is_err());
        assert!(split_dataset(10, SplitFractions::new(0.0, 0.5, 0.5, 0.0), 7).is_err());
    }

    #[test]
    fn split_is_a_partition_for_many_seeds() {
        let f = SplitFractions::new(0.7, 0.1, 0.1, 0.1);
        for seed in 0..100 {
            let n = 37 + seed as usize;
            let s = split_dataset(n, f, seed).unwrap();
            let mut all: Vec<usize> = [&s.train, &s.cal1, &s.cal2, &s.test]
                .into_iter()
                .flatten()
                .copied()
                .collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            assert!(!s.train.is_empty());
        }
    }

    #[test]
    fn risk_set_examples() {
        let ds = toy(&[1.0, 2.0, 3.0]);
        let pool = ds.all_indices();
        assert_eq!(risk_set(&ds, &pool, 2.0), vec![1, 2]);
        assert_eq!(risk_set(&ds, &pool, 0.0), pool);
        assert!(risk_set(&ds, &pool, 3.5).is_empty());
    }

    proptest! {
        #[test]
        fn risk_sets_shrink_with_time(
            times in prop::collection::vec(0.0f64..10.0, 1..30),
            t1 in 0.0f64..10.0,
            dt in 0.0f64..5.0,
        ) {
            let ds = toy(&times);
            let pool = ds.all_indices();
            let early = risk_set(&ds, &pool, t1);
            let late = risk_set(&ds, &pool, t1 + dt);
            prop_assert!(late.iter().all(|k| early.contains(k)));
        }

        #[test]
        fn normalization_round_trips(
            rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 2..20),
        ) {
            let subjects = rows
                .iter()
                .enumerate()
                .map(|(i, x)| Subject::new(x.clone(), i as f64, true, None).unwrap())
                .collect();
            let ds = SurvivalDataset::new(subjects, vec!["a".into(), "b".into(), "c".into()]).unwrap();
            let back = normalize_features(&ds).unwrap().denormalized();
            for (a, b) in ds.subjects().iter().zip(back.subjects()) {
                for (x, y) in a.covariates.iter().zip(&b.covariates) {
                    prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
                }
            }
        }
    }
}
