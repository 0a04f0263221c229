use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::run::ReplicationRecord;
use crate::balancers::{Estimand, Method};
use crate::estimators::Estimator;
use crate::learners::LearnerKind;
use crate::scenario::{Confounding, Rarity};

/// Identifies one summary row.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub scenario_n: usize,
    pub rarity: Rarity,
    pub confounding: Confounding,
    pub estimator: Estimator,
    pub method: Method,
    pub learner: Option<LearnerKind>,
    pub estimand: Estimand,
}

impl CellKey {
    pub fn of(r: &ReplicationRecord) -> Self {
        CellKey {
            scenario_n: r.n,
            rarity: r.rarity,
            confounding: r.confounding,
            estimator: r.estimator,
            method: r.method,
            learner: r.learner,
            estimand: r.estimand,
        }
    }
}

/// Moments over the valid estimates of one cell. `var` uses the `m - 1`
/// denominator and `spread_rmse = sqrt(var)`; `rmse_truth` is the root mean
/// squared deviation from the truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub bias: f64,
    pub mae: f64,
    pub spread_rmse: f64,
    pub var: f64,
    pub rmse_truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub key: CellKey,
    pub records: usize,
    pub valid: usize,
    /// Fraction of records with a finite estimate in [-1, 1].
    pub valid_pct: f64,
    pub moments: Option<Moments>,
    pub coverage: Option<f64>,
}

/// Moments of `values` around `truth`; `None` when empty. The variance of a
/// single value is reported as 0.
pub fn moments(values: &[f64], truth: f64) -> Option<Moments> {
    let m = values.len();
    if m == 0 {
        return None;
    }
    let mf = m as f64;
    let mean = values.iter().sum::<f64>() / mf;
    let mae = values.iter().map(|v| (v - truth).abs()).sum::<f64>() / mf;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let var = if m > 1 { ss / (mf - 1.0) } else { 0.0 };
    let mse = values.iter().map(|v| (v - truth) * (v - truth)).sum::<f64>() / mf;
    Some(Moments {
        bias: mean - truth,
        mae,
        spread_rmse: var.sqrt(),
        var,
        rmse_truth: mse.sqrt(),
    })
}

/// Fraction of valid records carrying an interval that contains `truth`,
/// together with the number of valid records skipped for lacking one.
pub fn coverage_rate<'a, I>(records: I, truth: f64) -> (Option<f64>, usize)
where
    I: IntoIterator<Item = &'a ReplicationRecord>,
{
    let mut hits = 0usize;
    let mut with_ci = 0usize;
    let mut skipped = 0usize;
    for r in records.into_iter().filter(|r| r.valid) {
        match r.ci95 {
            Some((lo, hi)) => {
                with_ci += 1;
                if lo <= truth && truth <= hi {
                    hits += 1;
                }
            }
            None => skipped += 1,
        }
    }
    let rate = (with_ci > 0).then(|| hits as f64 / with_ci as f64);
    (rate, skipped)
}

/// One summary per cell, ordered by [`CellKey`].
pub fn summarize(records: &[ReplicationRecord], truth: f64) -> Vec<MetricsSummary> {
    let mut cells: BTreeMap<CellKey, Vec<&ReplicationRecord>> = BTreeMap::new();
    for r in records {
        cells.entry(CellKey::of(r)).or_default().push(r);
    }
    cells
        .into_iter()
        .map(|(key, recs)| {
            let values: Vec<f64> = recs.iter().filter(|r| r.valid).filter_map(|r| r.value).collect();
            let coverage = if key.estimator == Estimator::Ols {
                coverage_rate(recs.iter().copied(), truth).0
            } else {
                None
            };
            MetricsSummary {
                records: recs.len(),
                valid: values.len(),
                valid_pct: values.len() as f64 / recs.len() as f64,
                moments: moments(&values, truth),
                coverage,
                key,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::run::ReasonCode;

    fn record(value: f64, ci: Option<(f64, f64)>) -> ReplicationRecord {
        ReplicationRecord {
            scenario: "n250_common_low".into(),
            n: 250,
            rarity: Rarity::Common,
            confounding: Confounding::Low,
            replication: 0,
            method: Method::Eb,
            learner: None,
            estimator: if ci.is_some() { Estimator::Ols } else { Estimator::Wa },
            estimand: Estimand::Ate,
            value: Some(value),
            se: None,
            ci95: ci,
            valid: value.abs() <= 1.0,
            reason: (value.abs() > 1.0).then_some(ReasonCode::OutOfRange),
            solver_status: None,
            kkt_residual: None,
            wall_ms: 0.0,
        }
    }

    #[test]
    fn symmetric_pair() {
        let m = moments(&[0.1, -0.1], 0.0).unwrap();
        assert!(m.bias.abs() < 1e-15);
        assert!((m.mae - 0.1).abs() < 1e-15);
        assert!((m.var - 0.02).abs() < 1e-15);
        assert!((m.spread_rmse - 0.02f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn invalid_estimates_are_excluded() {
        let s = summarize(&[record(0.5, None), record(1.5, None)], 0.0);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].valid_pct, 0.5);
        assert_eq!(s[0].moments.unwrap().bias, 0.5);
        let none = summarize(&[record(2.0, None)], 0.0);
        assert_eq!(none[0].valid_pct, 0.0);
        assert!(none[0].moments.is_none());
    }

    #[test]
    fn coverage_examples() {
        let inside: Vec<_> = (0..4).map(|_| record(0.0, Some((-0.1, 0.1)))).collect();
        assert_eq!(coverage_rate(&inside, 0.0), (Some(1.0), 0));
        let outside: Vec<_> = (0..4).map(|_| record(0.3, Some((0.2, 0.4)))).collect();
        assert_eq!(coverage_rate(&outside, 0.0), (Some(0.0), 0));
        assert_eq!(coverage_rate(&[record(0.1, None)], 0.0), (None, 1));
        assert_eq!(summarize(&inside, 0.0)[0].coverage, Some(1.0));
    }
}
