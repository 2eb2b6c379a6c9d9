//! Group-level epistemic uncertainty, the Uncertainty Fairness Metric (UFM)
//! and the aggregation weight derived from it.

use crate::error::{Error, Result};

pub const DEFAULT_UFM_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupUncertainty {
    pub group: usize,
    /// Mean per-sample `alpha_0` over the group's samples.
    pub total_evidence: f64,
    pub uncertainty: f64,
    pub sample_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FairnessSignal {
    pub ufm: f64,
    pub mean_uncertainty: f64,
    pub uncertainty_variance: f64,
    pub weight: f64,
}

impl FairnessSignal {
    /// Summarises the uncertainties of the groups present in `groups`.
    pub fn from_groups(groups: &[GroupUncertainty], epsilon: f64) -> Result<Self> {
        let us: Vec<f64> = groups.iter().map(|g| g.uncertainty).collect();
        if us.is_empty() {
            return Err(Error::Empty("no groups with samples".into()));
        }
        let ufm_value = ufm(&us, epsilon)?;
        Ok(Self {
            ufm: ufm_value,
            mean_uncertainty: mean(&us),
            uncertainty_variance: uncertainty_variance(&us)?,
            weight: aggregation_weight(ufm_value)?,
        })
    }
}

/// Per-group mean evidence from `(alpha_0, group)` pairs.
///
/// Groups with no samples are omitted from the result.
pub fn group_uncertainties(
    per_sample: &[(f64, usize)],
    num_groups: usize,
) -> Result<Vec<GroupUncertainty>> {
    if per_sample.is_empty() {
        return Err(Error::Empty("per-sample evidence list".into()));
    }
    if num_groups == 0 {
        return Err(Error::Domain("number of groups must be >= 1".into()));
    }
    let mut sums = vec![0.0; num_groups];
    let mut counts = vec![0usize; num_groups];
    for &(a0, g) in per_sample {
        if g >= num_groups {
            return Err(Error::Domain(format!(
                "group {g} out of range for {num_groups} groups"
            )));
        }
        if !(a0 > 0.0) || !a0.is_finite() {
            return Err(Error::Numeric(format!("total evidence {a0} for group {g}")));
        }
        sums[g] += a0;
        counts[g] += 1;
    }
    Ok((0..num_groups)
        .filter(|&g| counts[g] > 0)
        .map(|g| {
            let total_evidence = sums[g] / counts[g] as f64;
            GroupUncertainty {
                group: g,
                total_evidence,
                uncertainty: 1.0 / total_evidence,
                sample_count: counts[g],
            }
        })
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population variance of the group uncertainties.
pub fn uncertainty_variance(us: &[f64]) -> Result<f64> {
    if us.is_empty() {
        return Err(Error::Empty("uncertainty list".into()));
    }
    // shifting by the first element makes a constant input exactly zero
    let shifted: Vec<f64> = us.iter().map(|u| u - us[0]).collect();
    let m = mean(&shifted);
    Ok(shifted.iter().map(|d| (d - m).powi(2)).sum::<f64>() / us.len() as f64)
}

/// `(max u - min u) / (mean u + epsilon)`.
pub fn ufm(us: &[f64], epsilon: f64) -> Result<f64> {
    if us.is_empty() {
        return Err(Error::Empty("uncertainty list".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Domain("epsilon must be > 0".into()));
    }
    if us.iter().any(|&u| !(u > 0.0) || !u.is_finite()) {
        return Err(Error::Domain("uncertainties must be finite and > 0".into()));
    }
    let max = us.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = us.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((max - min) / (mean(us) + epsilon))
}

/// `1 / (1 + ufm)`.
pub fn aggregation_weight(ufm_value: f64) -> Result<f64> {
    if !(ufm_value >= 0.0) {
        return Err(Error::Domain(format!("UFM must be >= 0, got {ufm_value}")));
    }
    Ok(1.0 / (1.0 + ufm_value))
}

/// Largest pairwise gap between group positive-prediction rates.
pub fn bias_gap(rates: &[f64]) -> Result<f64> {
    if rates.len() < 2 {
        return Err(Error::Domain("bias gap needs at least two groups".into()));
    }
    let max = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = rates.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn group_means() {
        let g = group_uncertainties(&[(4.0, 0), (4.0, 0), (2.0, 1)], 2).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].total_evidence, 4.0);
        assert_eq!(g[1].total_evidence, 2.0);
        assert_eq!(g[0].uncertainty, 0.25);
        assert_eq!(g[1].uncertainty, 0.5);
        assert_eq!(g[0].sample_count, 2);

        let single = group_uncertainties(&[(3.0, 0), (5.0, 0)], 1).unwrap();
        assert_eq!(single.len(), 1);

        let same = group_uncertainties(&[(3.0, 0), (3.0, 1), (3.0, 2)], 3).unwrap();
        assert!(same.iter().all(|g| g.uncertainty == same[0].uncertainty));
    }

    #[test]
    fn absent_groups_are_skipped() {
        let g = group_uncertainties(&[(4.0, 0), (2.0, 2)], 4).unwrap();
        assert_eq!(g.iter().map(|g| g.group).collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn group_errors() {
        assert!(matches!(group_uncertainties(&[], 2), Err(Error::Empty(_))));
        assert!(group_uncertainties(&[(1.0, 3)], 2).is_err());
    }

    #[test]
    fn variance_examples() {
        assert_eq!(uncertainty_variance(&[0.25, 0.25]).unwrap(), 0.0);
        assert!((uncertainty_variance(&[0.5, 0.25]).unwrap() - 0.015625).abs() < 1e-15);
        assert_eq!(
            uncertainty_variance(&[0.1, 0.3, 0.2]).unwrap(),
            uncertainty_variance(&[0.3, 0.2, 0.1]).unwrap()
        );
    }

    #[test]
    fn ufm_examples() {
        assert_eq!(ufm(&[0.3, 0.3, 0.3], 1e-6).unwrap(), 0.0);
        let v = ufm(&[0.5, 0.25], 1e-6).unwrap();
        assert!((v - 0.25 / 0.375001).abs() < 1e-12);
        assert!((v - 0.666665).abs() < 1e-6);
        assert_eq!(ufm(&[0.4], 1e-6).unwrap(), 0.0);
        assert!(ufm(&[0.4], 0.0).is_err());
        assert!(ufm(&[], 1e-6).is_err());
    }

    #[test]
    fn weight_examples() {
        assert_eq!(aggregation_weight(0.0).unwrap(), 1.0);
        assert_eq!(aggregation_weight(1.0).unwrap(), 0.5);
        assert_eq!(aggregation_weight(3.0).unwrap(), 0.25);
        assert!(aggregation_weight(-0.1).is_err());
    }

    #[test]
    fn bias_gap_examples() {
        assert_eq!(bias_gap(&[0.5, 0.5]).unwrap(), 0.0);
        assert!((bias_gap(&[0.8, 0.6]).unwrap() - 0.2).abs() < 1e-15);
        assert!((bias_gap(&[0.9, 0.5, 0.7]).unwrap() - 0.4).abs() < 1e-15);
        assert!(bias_gap(&[0.3]).is_err());
    }

    #[test]
    fn signal_from_groups() {
        let g = group_uncertainties(&[(4.0, 0), (2.0, 1)], 2).unwrap();
        let s = FairnessSignal::from_groups(&g, DEFAULT_UFM_EPSILON).unwrap();
        assert!((s.mean_uncertainty - 0.375).abs() < 1e-15);
        assert_eq!(s.weight, 1.0 / (1.0 + s.ufm));
        assert!((s.uncertainty_variance - 0.015625).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn ufm_within_bound(us in prop::collection::vec(1e-4f64..1.0, 2..=10)) {
            let v = ufm(&us, DEFAULT_UFM_EPSILON).unwrap();
            prop_assert!(v >= 0.0);
            prop_assert!(v < us.len() as f64);
        }

        #[test]
        fn ufm_scale_invariant(us in prop::collection::vec(0.05f64..1.0, 2..=10), c in 0.1f64..10.0) {
            let scaled: Vec<f64> = us.iter().map(|u| u * c).collect();
            let a = ufm(&us, 1e-12).unwrap();
            let b = ufm(&scaled, 1e-12).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn weight_strictly_decreasing(a in 0.0f64..100.0, d in 1e-6f64..10.0) {
            prop_assert!(aggregation_weight(a).unwrap() > aggregation_weight(a + d).unwrap());
        }
    }
}
