use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{split_groups, BalanceWeights, Estimand, Method};
use crate::error::{Error, Result};
use crate::stats::quantile_linear;

/// Post-processing applied to raw inverse-probability weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IptwPostproc {
    /// Remove observations whose weight is strictly above the empirical 99th
    /// percentile; remaining weights are not rescaled.
    Trim99,
    /// Rescale each arm to sum to one.
    Hajek,
    None,
}

impl IptwPostproc {
    pub fn label(self) -> &'static str {
        match self {
            IptwPostproc::Trim99 => "trim99",
            IptwPostproc::Hajek => "hajek",
            IptwPostproc::None => "none",
        }
    }
}

impl fmt::Display for IptwPostproc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for IptwPostproc {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "trim99" => Ok(IptwPostproc::Trim99),
            "hajek" => Ok(IptwPostproc::Hajek),
            "none" => Ok(IptwPostproc::None),
            other => Err(Error::Config(format!("unknown IPTW post-processing '{other}'"))),
        }
    }
}

/// Inverse probability of treatment weights from estimated propensities.
///
/// ATE: `(1/n) (T/e + (1-T)/(1-e))`. ATT: treated `1/N1`, controls
/// `e / ((1-e) N1)`.
pub fn iptw_weights(e_hat: &[f64], t: &[bool], estimand: Estimand, postproc: IptwPostproc) -> Result<BalanceWeights> {
    if e_hat.len() != t.len() {
        return Err(Error::shape(t.len(), e_hat.len()));
    }
    if let Some(bad) = e_hat.iter().find(|&&e| !(e > 0.0 && e < 1.0)) {
        return Err(Error::Domain(format!("propensity {bad} is outside (0, 1)")));
    }
    let (treated, _) = split_groups(t)?;
    let n = t.len() as f64;
    let n1 = treated.len() as f64;
    let mut values: Vec<f64> = e_hat
        .iter()
        .zip(t)
        .map(|(&e, &ti)| match (estimand, ti) {
            (Estimand::Ate, true) => 1.0 / (n * e),
            (Estimand::Ate, false) => 1.0 / (n * (1.0 - e)),
            (Estimand::Att, true) => 1.0 / n1,
            (Estimand::Att, false) => e / ((1.0 - e) * n1),
        })
        .collect();
    let mut kept = vec![true; values.len()];

    match postproc {
        IptwPostproc::None => {}
        IptwPostproc::Trim99 => {
            let cutoff = quantile_linear(&values, 0.99);
            for (w, k) in values.iter_mut().zip(kept.iter_mut()) {
                if *w > cutoff {
                    *w = 0.0;
                    *k = false;
                }
            }
        }
        IptwPostproc::Hajek => super::normalize_groups(&mut values, t),
    }
    Ok(BalanceWeights::new(values, kept, t, estimand, Method::Iptw))
}
