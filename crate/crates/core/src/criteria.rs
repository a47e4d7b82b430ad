//! Filter importance criteria.
//!
//! Norm criteria score a filter by the ℓp-norm of its weights. Distance
//! criteria score a filter by its average distance to every filter of the
//! same layer (itself included, at distance zero), so a small score marks a
//! filter that others can stand in for. Either way the lowest scores are
//! pruned first.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{MfpError, Result};
use crate::filters::{pruned_count_for_rate, FilterBank};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CriterionId {
    /// ℓp-norm of each filter.
    NormP(f64),
    /// Average Minkowski-p distance to the layer's filters.
    MinkowskiAveD(f64),
    /// Average cosine distance (1 − cosine similarity) to the layer's filters.
    CosineAveD,
}

impl CriterionId {
    /// l1, l2, minkowski1, minkowski2, cosine.
    pub fn default_set() -> Vec<CriterionId> {
        vec![
            CriterionId::NormP(1.0),
            CriterionId::NormP(2.0),
            CriterionId::MinkowskiAveD(1.0),
            CriterionId::MinkowskiAveD(2.0),
            CriterionId::CosineAveD,
        ]
    }

    pub fn is_distance(&self) -> bool {
        !matches!(self, CriterionId::NormP(_))
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            CriterionId::NormP(p) | CriterionId::MinkowskiAveD(p) => check_p(p),
            CriterionId::CosineAveD => Ok(()),
        }
    }

    /// Scores every filter of `bank`, tagging the result with `layer`.
    pub fn score(&self, layer: usize, bank: &FilterBank) -> Result<ScoreVector> {
        let (scores, degenerate_pairs) = match *self {
            CriterionId::NormP(p) => (lp_norm_scores(bank, p)?, 0),
            _ => average_distance_scores(bank, *self)?,
        };
        Ok(ScoreVector {
            layer,
            scores,
            degenerate_pairs,
        })
    }
}

fn fmt_p(p: f64) -> String {
    if p.fract() == 0.0 && p.abs() < 1e15 {
        format!("{}", p as i64)
    } else {
        format!("{p}")
    }
}

impl fmt::Display for CriterionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            CriterionId::NormP(p) => write!(f, "l{}", fmt_p(p)),
            CriterionId::MinkowskiAveD(p) => write!(f, "minkowski{}", fmt_p(p)),
            CriterionId::CosineAveD => f.write_str("cosine"),
        }
    }
}

impl FromStr for CriterionId {
    type Err = MfpError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let parse_p = |rest: &str| -> Result<f64> {
            let p: f64 = rest
                .parse()
                .map_err(|_| MfpError::InvalidArgument(format!("bad exponent in criterion {s:?}")))?;
            check_p(p)?;
            Ok(p)
        };
        let id = if s == "cosine" {
            CriterionId::CosineAveD
        } else if let Some(rest) = s.strip_prefix("minkowski") {
            CriterionId::MinkowskiAveD(parse_p(rest)?)
        } else if let Some(rest) = s.strip_prefix('l') {
            CriterionId::NormP(parse_p(rest)?)
        } else {
            return Err(MfpError::InvalidArgument(format!(
                "unknown criterion {s:?} (expected l<p>, minkowski<p> or cosine)"
            )));
        };
        Ok(id)
    }
}

impl Serialize for CriterionId {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CriterionId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-filter scores of one layer; lower means "prune first".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub layer: usize,
    pub scores: Vec<f64>,
    /// Pairs whose cosine distance fell back to 1 because a filter was all zeros.
    pub degenerate_pairs: usize,
}

impl ScoreVector {
    pub fn select(&self, prune_rate: f64) -> Result<Vec<usize>> {
        select_filters(&self.scores, prune_rate)
    }
}

fn check_p(p: f64) -> Result<()> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(MfpError::InvalidArgument(format!(
            "norm exponent must be >= 1, got {p}"
        )));
    }
    Ok(())
}

#[inline]
fn pow_sum(diffs: impl Iterator<Item = f64>, p: f64) -> f64 {
    if p == 1.0 {
        diffs.map(f64::abs).sum()
    } else if p == 2.0 {
        diffs.map(|d| d * d).sum::<f64>().sqrt()
    } else {
        diffs.map(|d| d.abs().powf(p)).sum::<f64>().powf(1.0 / p)
    }
}

/// `(Σ |w|^p)^(1/p)` for each filter.
pub fn lp_norm_scores(bank: &FilterBank, p: f64) -> Result<Vec<f64>> {
    check_p(p)?;
    Ok((0..bank.out_channels())
        .map(|j| pow_sum(bank.filter(j).iter().copied(), p))
        .collect())
}

pub fn minkowski_distance(x: &[f64], y: &[f64], p: f64) -> Result<f64> {
    check_p(p)?;
    if x.len() != y.len() {
        return Err(MfpError::shape("minkowski_distance", &[x.len()], &[y.len()]));
    }
    Ok(pow_sum(x.iter().zip(y).map(|(a, b)| a - b), p))
}

/// Cosine distance with its degeneracy flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineDistance {
    pub value: f64,
    /// Set when either vector has zero norm; `value` is then 1.
    pub degenerate: bool,
}

/// `1 − x·y / (‖x‖ ‖y‖)`, in `[0, 2]`. A zero-norm operand yields 1 and is flagged.
pub fn cosine_distance(x: &[f64], y: &[f64]) -> Result<CosineDistance> {
    if x.len() != y.len() {
        return Err(MfpError::shape("cosine_distance", &[x.len()], &[y.len()]));
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    Ok(cosine_from_parts(dot, nx, ny))
}

#[inline]
fn cosine_from_parts(dot: f64, nx: f64, ny: f64) -> CosineDistance {
    if nx == 0.0 || ny == 0.0 {
        return CosineDistance {
            value: 1.0,
            degenerate: true,
        };
    }
    let sim = (dot / (nx * ny)).clamp(-1.0, 1.0);
    CosineDistance {
        value: 1.0 - sim,
        degenerate: false,
    }
}

/// Average distance of each flattened filter to all `N` filters of the
/// layer, self-distance counted as zero, divided by `N`. Returns the scores
/// and the number of unordered pairs that hit the zero-norm cosine fallback.
pub fn average_distance_scores(bank: &FilterBank, metric: CriterionId) -> Result<(Vec<f64>, usize)> {
    let n = bank.out_channels();
    let mut sums = vec![0.0; n];
    let mut degenerate = 0;
    match metric {
        CriterionId::NormP(_) => {
            return Err(MfpError::InvalidArgument(format!(
                "{metric} is not a distance criterion"
            )));
        }
        CriterionId::MinkowskiAveD(p) => {
            check_p(p)?;
            for j in 0..n {
                for k in j + 1..n {
                    let d = pow_sum(bank.filter(j).iter().zip(bank.filter(k)).map(|(a, b)| a - b), p);
                    sums[j] += d;
                    sums[k] += d;
                }
            }
        }
        CriterionId::CosineAveD => {
            let norms: Vec<f64> = (0..n)
                .map(|j| bank.filter(j).iter().map(|a| a * a).sum::<f64>().sqrt())
                .collect();
            for j in 0..n {
                for k in j + 1..n {
                    let dot: f64 = bank.filter(j).iter().zip(bank.filter(k)).map(|(a, b)| a * b).sum();
                    let d = cosine_from_parts(dot, norms[j], norms[k]);
                    degenerate += usize::from(d.degenerate);
                    sums[j] += d.value;
                    sums[k] += d.value;
                }
            }
        }
    }
    let inv = 1.0 / n as f64;
    Ok((sums.into_iter().map(|s| s * inv).collect(), degenerate))
}

/// Indices of the `floor(rate * N)` smallest scores, ties broken toward the
/// lower index, returned in ascending index order.
pub fn select_filters(scores: &[f64], prune_rate: f64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&prune_rate) {
        return Err(MfpError::InvalidArgument(format!(
            "prune rate must lie in [0, 1), got {prune_rate}"
        )));
    }
    if let Some(j) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MfpError::InvalidArgument(format!("score {j} is not finite")));
    }
    let count = pruned_count_for_rate(scores.len(), prune_rate);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut chosen = order[..count].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn bank_from_rows(rows: &[&[f64]]) -> FilterBank {
        let g = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        FilterBank::new(Tensor::new(vec![rows.len(), g, 1, 1], data).unwrap()).unwrap()
    }

    fn abc() -> FilterBank {
        bank_from_rows(&[&[1.0, 1.0, 1.0], &[1.1, 1.0, 1.0], &[0.5, 0.3, 0.2]])
    }

    /// Every ordered pair, self included, straight from the definition.
    fn brute_force_aved(bank: &FilterBank, metric: CriterionId) -> Vec<f64> {
        let n = bank.out_channels();
        (0..n)
            .map(|j| {
                let total: f64 = (0..n)
                    .map(|k| {
                        if j == k {
                            return 0.0;
                        }
                        match metric {
                            CriterionId::MinkowskiAveD(p) => {
                                minkowski_distance(bank.filter(j), bank.filter(k), p).unwrap()
                            }
                            CriterionId::CosineAveD => cosine_distance(bank.filter(j), bank.filter(k)).unwrap().value,
                            CriterionId::NormP(_) => unreachable!(),
                        }
                    })
                    .sum();
                total / n as f64
            })
            .collect()
    }

    #[test]
    fn intro_example_l1_scores() {
        let s = lp_norm_scores(&abc(), 1.0).unwrap();
        let expected = [3.0, 3.1, 1.0];
        for (a, e) in s.iter().zip(expected) {
            assert!((a - e).abs() < 1e-12);
        }
        assert_eq!(select_filters(&s, 1.0 / 3.0).unwrap(), vec![2]);
    }

    #[test]
    fn intro_example_minkowski1_aved() {
        let (s, _) = average_distance_scores(&abc(), CriterionId::MinkowskiAveD(1.0)).unwrap();
        let expected = [2.1 / 3.0, 2.2 / 3.0, 4.1 / 3.0];
        for (a, e) in s.iter().zip(expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
        assert_eq!(select_filters(&s, 1.0 / 3.0).unwrap(), vec![0]);
    }

    #[test]
    fn norm_examples() {
        assert_eq!(lp_norm_scores(&bank_from_rows(&[&[0.0, 0.0]]), 2.0).unwrap(), vec![0.0]);
        assert_eq!(lp_norm_scores(&bank_from_rows(&[&[3.0, 4.0]]), 2.0).unwrap(), vec![5.0]);
        assert!(lp_norm_scores(&abc(), 0.5).is_err());
    }

    #[test]
    fn minkowski_examples() {
        let a = [1.0, 1.0, 1.0];
        assert_eq!(minkowski_distance(&a, &a, 1.0).unwrap(), 0.0);
        assert!((minkowski_distance(&a, &[1.1, 1.0, 1.0], 1.0).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(minkowski_distance(&[0.0, 0.0], &[3.0, 4.0], 2.0).unwrap(), 5.0);
        assert!((minkowski_distance(&[0.0, 0.0], &[3.0, 4.0], 3.0).unwrap() - 91f64.cbrt()).abs() < 1e-12);
        assert!(minkowski_distance(&a, &[1.0], 1.0).is_err());
    }

    #[test]
    fn cosine_examples() {
        let x = [0.3, -1.2, 2.0];
        assert!(cosine_distance(&x, &x).unwrap().value.abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((cosine_distance(&x, &neg).unwrap().value - 2.0).abs() < 1e-12);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap().value, 1.0);
        let z = cosine_distance(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(
            z,
            CosineDistance {
                value: 1.0,
                degenerate: true
            }
        );
    }

    #[test]
    fn identical_filters_have_zero_aved() {
        let bank = bank_from_rows(&[&[0.2, -0.7], &[0.2, -0.7], &[0.2, -0.7]]);
        for m in [
            CriterionId::MinkowskiAveD(1.0),
            CriterionId::MinkowskiAveD(2.0),
            CriterionId::CosineAveD,
        ] {
            let (s, _) = average_distance_scores(&bank, m).unwrap();
            assert!(s.iter().all(|v| v.abs() < 1e-12), "{m}: {s:?}");
        }
    }

    #[test]
    fn zero_filter_cosine_pairs_are_counted() {
        let bank = bank_from_rows(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 2.0]]);
        let sv = CriterionId::CosineAveD.score(3, &bank).unwrap();
        assert_eq!(sv.layer, 3);
        assert_eq!(sv.degenerate_pairs, 2);
        assert!((sv.scores[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn norm_is_not_a_distance_metric() {
        assert!(average_distance_scores(&abc(), CriterionId::NormP(1.0)).is_err());
    }

    #[test]
    fn select_examples() {
        assert!(select_filters(&[3.0, 1.0, 2.0], 0.0).unwrap().is_empty());
        assert_eq!(select_filters(&[1.0, 1.0, 1.0, 0.5], 0.5).unwrap(), vec![0, 3]);
        assert!(select_filters(&[1.0], 1.0).is_err());
        assert!(select_filters(&[1.0], -0.1).is_err());
    }

    #[test]
    fn criterion_names_round_trip() {
        for c in CriterionId::default_set() {
            assert_eq!(c.to_string().parse::<CriterionId>().unwrap(), c);
        }
        assert_eq!("l1".parse::<CriterionId>().unwrap(), CriterionId::NormP(1.0));
        assert_eq!(
            "minkowski2".parse::<CriterionId>().unwrap(),
            CriterionId::MinkowskiAveD(2.0)
        );
        assert_eq!("l1.5".parse::<CriterionId>().unwrap(), CriterionId::NormP(1.5));
        assert!("l0.5".parse::<CriterionId>().is_err());
        assert!("fpgm".parse::<CriterionId>().is_err());
        let json = serde_json::to_string(&CriterionId::CosineAveD).unwrap();
        assert_eq!(json, "\"cosine\"");
    }

    fn random_bank(n: usize, g: usize, seed: u64) -> FilterBank {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        FilterBank::new(Tensor::from_fn(&[n, g, 1, 1], |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn aved_matches_brute_force() {
        for seed in 0..20 {
            let bank = random_bank(2 + (seed as usize % 9), 1 + (seed as usize * 7) % 40, seed);
            for m in [
                CriterionId::MinkowskiAveD(1.0),
                CriterionId::MinkowskiAveD(2.0),
                CriterionId::MinkowskiAveD(3.0),
                CriterionId::CosineAveD,
            ] {
                let (fast, _) = average_distance_scores(&bank, m).unwrap();
                for (a, b) in fast.iter().zip(brute_force_aved(&bank, m)) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }

    fn permuted(bank: &FilterBank, perm: &[usize]) -> FilterBank {
        let rows: Vec<&[f64]> = perm.iter().map(|&j| bank.filter(j)).collect();
        let g = bank.filter_len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        FilterBank::new(Tensor::new(vec![perm.len(), g, 1, 1], data).unwrap()).unwrap()
    }

    proptest! {
        #[test]
        fn scores_are_permutation_equivariant(seed in 0u64..1000, n in 2usize..10, g in 1usize..20, rot in 0usize..10) {
            let bank = random_bank(n, g, seed);
            let perm: Vec<usize> = (0..n).map(|j| (j + rot) % n).collect();
            let pb = permuted(&bank, &perm);
            for c in CriterionId::default_set() {
                let s = c.score(0, &bank).unwrap().scores;
                let ps = c.score(0, &pb).unwrap().scores;
                for (j, &src) in perm.iter().enumerate() {
                    prop_assert!((ps[j] - s[src]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn norm_scores_scale_and_selection_is_invariant(seed in 0u64..1000, scale in 0.01f64..100.0, rate in 0.0f64..0.99) {
            let bank = random_bank(8, 6, seed);
            let mut scaled = bank.clone();
            scaled.weights_mut().data_mut().iter_mut().for_each(|v| *v *= scale);
            for p in [1.0, 2.0] {
                let s = lp_norm_scores(&bank, p).unwrap();
                let ss = lp_norm_scores(&scaled, p).unwrap();
                for (a, b) in s.iter().zip(&ss) {
                    prop_assert!((a * scale - b).abs() <= 1e-9 * b.abs().max(1.0));
                }
                prop_assert_eq!(select_filters(&s, rate).unwrap(), select_filters(&ss, rate).unwrap());
            }
        }

        #[test]
        fn cosine_aved_ignores_per_filter_rescaling(seed in 0u64..1000, scales in proptest::collection::vec(0.1f64..10.0, 6)) {
            let bank = random_bank(6, 5, seed);
            let mut rescaled = bank.clone();
            for (j, s) in scales.iter().enumerate() {
                rescaled.filter_mut(j).iter_mut().for_each(|v| *v *= s);
            }
            let (a, _) = average_distance_scores(&bank, CriterionId::CosineAveD).unwrap();
            let (b, _) = average_distance_scores(&rescaled, CriterionId::CosineAveD).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn selection_is_sorted_and_sized(scores in proptest::collection::vec(-5.0f64..5.0, 1..40), rate in 0.0f64..0.999) {
            let sel = select_filters(&scores, rate).unwrap();
            prop_assert_eq!(sel.len(), pruned_count_for_rate(scores.len(), rate));
            prop_assert!(sel.windows(2).all(|w| w[0] < w[1]));
            let worst_kept = (0..scores.len()).filter(|j| !sel.contains(j)).map(|j| scores[j]).fold(f64::INFINITY, f64::min);
            prop_assert!(sel.iter().all(|&j| scores[j] <= worst_kept));
        }
    }

    #[test]
    fn minkowski_aved_is_not_rescaling_invariant() {
        let bank = random_bank(4, 3, 11);
        let mut rescaled = bank.clone();
        rescaled.filter_mut(0).iter_mut().for_each(|v| *v *= 5.0);
        let (a, _) = average_distance_scores(&bank, CriterionId::MinkowskiAveD(2.0)).unwrap();
        let (b, _) = average_distance_scores(&rescaled, CriterionId::MinkowskiAveD(2.0)).unwrap();
        assert!((a[0] - b[0]).abs() > 1e-3);
    }
}
