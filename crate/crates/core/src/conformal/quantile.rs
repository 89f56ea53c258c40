use crate::error::{Error, Result};
use crate::weights::NormalizedWeights;

/// Slack when comparing accumulated probabilities against a level, so sums
/// like ten masses of 0.1 still reach 1.
const CDF_SLACK: f64 = 1e-12;

/// `Σ p_i δ_{V_i} + p_∞ δ_{+∞}`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedScoreDistribution {
    atoms: Vec<(f64, f64)>,
    infinity_mass: f64,
}

impl WeightedScoreDistribution {
    pub fn new(atoms: Vec<(f64, f64)>, infinity_mass: f64) -> Result<Self> {
        let total: f64 = atoms.iter().map(|a| a.1).sum::<f64>() + infinity_mass;
        let valid = atoms.iter().all(|&(v, p)| !v.is_nan() && p >= 0.0)
            && (0.0..=1.0).contains(&infinity_mass)
            && (total - 1.0).abs() <= 1e-12;
        if !valid {
            return Err(Error::InvalidArgument(format!(
                "score distribution must have nonnegative masses summing to 1 (got {total})"
            )));
        }
        Ok(Self {
            atoms,
            infinity_mass,
        })
    }

    pub fn from_scores(scores: &[f64], weights: &NormalizedWeights) -> Result<Self> {
        if scores.len() != weights.p.len() {
            return Err(Error::InvalidArgument(format!(
                "{} scores but {} weights",
                scores.len(),
                weights.p.len()
            )));
        }
        Self::new(
            scores.iter().copied().zip(weights.p.iter().copied()).collect(),
            weights.p_inf,
        )
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn infinity_mass(&self) -> f64 {
        self.infinity_mass
    }

    pub fn quantile(&self, level: f64) -> f64 {
        weighted_quantile(self, level)
    }
}

/// Smallest atom score whose cumulative probability reaches `level`
/// (ties merged); `+inf` when the finite atoms carry less than `level`.
pub fn weighted_quantile(dist: &WeightedScoreDistribution, level: f64) -> f64 {
    let mut atoms = dist.atoms.clone();
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut cum = 0.0;
    let mut i = 0;
    while i < atoms.len() {
        let v = atoms[i].0;
        while i < atoms.len() && atoms[i].0 == v {
            cum += atoms[i].1;
            i += 1;
        }
        if cum >= level - CDF_SLACK {
            return v;
        }
    }
    f64::INFINITY
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::normalize;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quarter_dist() -> WeightedScoreDistribution {
        WeightedScoreDistribution::new(vec![(1.0, 0.25), (2.0, 0.25), (3.0, 0.25)], 0.25).unwrap()
    }

    #[test]
    fn examples() {
        assert_eq!(quarter_dist().quantile(0.5), 2.0);
        assert_eq!(quarter_dist().quantile(0.9), f64::INFINITY);
        assert_eq!(quarter_dist().quantile(0.75), 3.0);
    }

    #[test]
    fn rejects_bad_masses() {
        assert!(WeightedScoreDistribution::new(vec![(1.0, 0.5)], 0.4).is_err());
        assert!(WeightedScoreDistribution::new(vec![(1.0, -0.1)], 1.1).is_err());
    }

    #[test]
    fn ties_are_merged() {
        let d = WeightedScoreDistribution::new(vec![(1.0, 0.2), (1.0, 0.2), (5.0, 0.4)], 0.2).unwrap();
        assert_eq!(d.quantile(0.4), 1.0);
        assert_eq!(d.quantile(0.41), 5.0);
    }

    /// k-th order statistic with k = ⌈(1−α)(n+1)⌉, in exact integer arithmetic
    /// (α given in percent).
    fn order_statistic(sorted: &[f64], alpha_pct: usize) -> f64 {
        let n = sorted.len();
        let k = ((100 - alpha_pct) * (n + 1)).div_ceil(100);
        if k > n {
            f64::INFINITY
        } else {
            sorted[k - 1]
        }
    }

    #[test]
    fn equal_weights_match_order_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for n in [5usize, 19, 99] {
            for alpha_pct in [10usize, 5] {
                for _ in 0..25 {
                    let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
                    let nw = normalize(&vec![1.0; n], 1.0).unwrap();
                    let dist = WeightedScoreDistribution::from_scores(&scores, &nw).unwrap();
                    let mut sorted = scores.clone();
                    sorted.sort_by(f64::total_cmp);
                    let level = 1.0 - alpha_pct as f64 / 100.0;
                    assert_eq!(dist.quantile(level), order_statistic(&sorted, alpha_pct), "n={n} α={alpha_pct}%");
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn monotone_in_level(
            scores in prop::collection::vec(-10.0f64..10.0, 1..30),
            seed in any::<u64>(),
            l1 in 0.001f64..0.999,
            l2 in 0.001f64..0.999,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f64> = scores.iter().map(|_| rng.random_range(0.1..5.0)).collect();
            let nw = normalize(&w, rng.random_range(0.1..5.0)).unwrap();
            let d = WeightedScoreDistribution::from_scores(&scores, &nw).unwrap();
            let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
            prop_assert!(d.quantile(lo) <= d.quantile(hi));
        }

        #[test]
        fn invariant_to_weight_scale(
            scores in prop::collection::vec(-10.0f64..10.0, 1..30),
            seed in any::<u64>(),
            c in 1e-3f64..1e3,
            level in 0.01f64..0.99,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f64> = scores.iter().map(|_| rng.random_range(0.1..5.0)).collect();
            let wt = rng.random_range(0.1..5.0);
            let a = normalize(&w, wt).unwrap();
            let scaled: Vec<f64> = w.iter().map(|v| v * c).collect();
            let b = normalize(&scaled, wt * c).unwrap();
            let qa = WeightedScoreDistribution::from_scores(&scores, &a).unwrap().quantile(level);
            let qb = WeightedScoreDistribution::from_scores(&scores, &b).unwrap().quantile(level);
            prop_assert_eq!(qa, qb);
        }
    }
}
