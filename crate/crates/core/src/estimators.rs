//! Treatment-effect estimators built on balancing weights: the weighted
//! average (WA), the augmented weighted average (AWA) and weighted least
//! squares on `[1, T]` (OLS) with an HC0 sandwich interval.
//!
//! Rows with `kept = false` (trimmed) take no part in any sum.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::balancers::{BalanceWeights, Estimand};
use crate::error::{Error, Result};
use crate::learners::LearnerKind;

const Z_95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "WA")]
    Wa,
    #[serde(rename = "AWA")]
    Awa,
    #[serde(rename = "OLS")]
    Ols,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [Estimator::Wa, Estimator::Awa, Estimator::Ols];

    pub fn label(self) -> &'static str {
        match self {
            Estimator::Wa => "WA",
            Estimator::Awa => "AWA",
            Estimator::Ols => "OLS",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "WA" => Ok(Estimator::Wa),
            "AWA" => Ok(Estimator::Awa),
            "OLS" => Ok(Estimator::Ols),
            other => Err(Error::Config(format!("unknown estimator '{other}'"))),
        }
    }
}

/// Predicted outcome probabilities under control and treatment.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseSurfaces {
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    pub source: LearnerKind,
}

impl ResponseSurfaces {
    pub fn new(mu0: Vec<f64>, mu1: Vec<f64>, source: LearnerKind) -> Result<Self> {
        if mu0.len() != mu1.len() {
            return Err(Error::shape(mu0.len(), mu1.len()));
        }
        if mu0.iter().chain(&mu1).any(|v| !v.is_finite()) {
            return Err(Error::Domain("response surfaces must be finite".into()));
        }
        Ok(ResponseSurfaces { mu0, mu1, source })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub value: f64,
    pub se: Option<f64>,
    pub ci95: Option<(f64, f64)>,
    pub estimand: Estimand,
    pub estimator: Estimator,
    /// `|value| <= 1`, the range of a difference of probabilities.
    pub valid: bool,
}

impl EffectEstimate {
    fn point(value: f64, estimand: Estimand, estimator: Estimator) -> Self {
        EffectEstimate {
            value,
            se: None,
            ci95: None,
            estimand,
            estimator,
            valid: is_valid(value),
        }
    }

    pub fn covers(&self, truth: f64) -> Option<bool> {
        self.ci95.map(|(lo, hi)| lo <= truth && truth <= hi)
    }
}

pub fn is_valid(value: f64) -> bool {
    value.is_finite() && value.abs() <= 1.0
}

fn check_lengths(y: &[f64], t: &[bool], w: &BalanceWeights) -> Result<()> {
    if t.len() != y.len() {
        return Err(Error::shape(y.len(), t.len()));
    }
    if w.len() != y.len() {
        return Err(Error::shape(y.len(), w.len()));
    }
    Ok(())
}

/// Kept treated and kept control counts; both must be positive.
fn kept_counts(t: &[bool], w: &BalanceWeights) -> Result<(usize, usize)> {
    let n1 = t.iter().zip(&w.kept).filter(|(&ti, &k)| ti && k).count();
    let n0 = t.iter().zip(&w.kept).filter(|(&ti, &k)| !ti && k).count();
    if n1 == 0 || n0 == 0 {
        return Err(Error::Estimation("a treatment arm has no kept observations".into()));
    }
    Ok((n1, n0))
}

/// ATE: `sum T W Y - sum (1-T) W Y`. ATT: `(1/N1) sum T Y - sum (1-T) W Y`.
pub fn weighted_average(y: &[f64], t: &[bool], w: &BalanceWeights) -> Result<EffectEstimate> {
    check_lengths(y, t, w)?;
    let (n1, _) = kept_counts(t, w)?;
    let mut treated = 0.0;
    let mut control = 0.0;
    for i in (0..y.len()).filter(|&i| w.kept[i]) {
        if t[i] {
            treated += match w.estimand {
                Estimand::Ate => w.values[i] * y[i],
                Estimand::Att => y[i] / n1 as f64,
            };
        } else {
            control += w.values[i] * y[i];
        }
    }
    Ok(EffectEstimate::point(treated - control, w.estimand, Estimator::Wa))
}

/// Weighted average of residuals plus a plug-in term from the surfaces.
///
/// ATE: `(1/n) sum (mu1 - mu0) + sum (2T - 1) W (Y - mu_T)`.
/// ATT: `(1/N1) sum T (Y - mu0) - sum (1-T) W (Y - mu0)`.
/// `n` and `N1` count kept rows only.
pub fn augmented_weighted_average(
    y: &[f64],
    t: &[bool],
    w: &BalanceWeights,
    surfaces: &ResponseSurfaces,
) -> Result<EffectEstimate> {
    check_lengths(y, t, w)?;
    if surfaces.mu0.len() != y.len() {
        return Err(Error::shape(y.len(), surfaces.mu0.len()));
    }
    let (n1, n0) = kept_counts(t, w)?;
    let kept = (0..y.len()).filter(|&i| w.kept[i]);
    let (mu0, mu1) = (&surfaces.mu0, &surfaces.mu1);
    let value = match w.estimand {
        Estimand::Ate => {
            let m = (n1 + n0) as f64;
            let mut plug_in = 0.0;
            let mut resid = 0.0;
            for i in kept {
                plug_in += (mu1[i] - mu0[i]) / m;
                resid += if t[i] {
                    w.values[i] * (y[i] - mu1[i])
                } else {
                    -w.values[i] * (y[i] - mu0[i])
                };
            }
            plug_in + resid
        }
        Estimand::Att => {
            let mut treated = 0.0;
            let mut control = 0.0;
            for i in kept {
                if t[i] {
                    treated += (y[i] - mu0[i]) / n1 as f64;
                } else {
                    control += w.values[i] * (y[i] - mu0[i]);
                }
            }
            treated - control
        }
    };
    Ok(EffectEstimate::point(value, w.estimand, Estimator::Awa))
}

/// Weighted means and the slope `sum W (T - Tbar)(Y - Ybar) / sum W (T - Tbar)^2`.
fn wls_fit(y: &[f64], t: &[bool], w: &BalanceWeights) -> Result<(f64, f64)> {
    let rows: Vec<usize> = (0..y.len()).filter(|&i| w.kept[i]).collect();
    let sw: f64 = rows.iter().map(|&i| w.values[i]).sum();
    if !(sw > 0.0) {
        return Err(Error::Estimation("kept weights sum to zero".into()));
    }
    let tv = |i: usize| if t[i] { 1.0 } else { 0.0 };
    let tbar = rows.iter().map(|&i| w.values[i] * tv(i)).sum::<f64>() / sw;
    let ybar = rows.iter().map(|&i| w.values[i] * y[i]).sum::<f64>() / sw;
    let mut num = 0.0;
    let mut den = 0.0;
    for &i in &rows {
        let dt = tv(i) - tbar;
        num += w.values[i] * dt * (y[i] - ybar);
        den += w.values[i] * dt * dt;
    }
    if !(den > 0.0) {
        return Err(Error::Estimation("weighted treatment variance is zero".into()));
    }
    let beta = num / den;
    Ok((ybar - beta * tbar, beta))
}

/// Weighted least squares slope on the treatment indicator with an HC0 interval.
pub fn weighted_ols(y: &[f64], t: &[bool], w: &BalanceWeights) -> Result<EffectEstimate> {
    check_lengths(y, t, w)?;
    kept_counts(t, w)?;
    let (_, beta) = wls_fit(y, t, w)?;
    let (se, ci95) = sandwich_variance(y, t, w)?;
    Ok(EffectEstimate {
        value: beta,
        se: Some(se),
        ci95: Some(ci95),
        estimand: w.estimand,
        estimator: Estimator::Ols,
        valid: is_valid(beta),
    })
}

/// HC0 sandwich `(Z'WZ)^-1 Z'W diag(r^2) W Z (Z'WZ)^-1` for `Z = [1, T]`,
/// treating the weights as fixed. Returns the slope's standard error and its
/// normal 95% interval.
pub fn sandwich_variance(y: &[f64], t: &[bool], w: &BalanceWeights) -> Result<(f64, (f64, f64))> {
    check_lengths(y, t, w)?;
    let (a, beta) = wls_fit(y, t, w)?;
    let mut bread = Matrix2::<f64>::zeros();
    let mut meat = Matrix2::<f64>::zeros();
    for i in (0..y.len()).filter(|&i| w.kept[i]) {
        let z = Vector2::new(1.0, if t[i] { 1.0 } else { 0.0 });
        let wi = w.values[i];
        let r = y[i] - a - beta * z[1];
        let zz = z * z.transpose();
        bread += zz * wi;
        meat += zz * (wi * wi * r * r);
    }
    let inv = bread
        .try_inverse()
        .ok_or_else(|| Error::Estimation("Z'WZ is singular".into()))?;
    let v = inv * meat * inv;
    let se = v[(1, 1)].max(0.0).sqrt();
    Ok((se, (beta - Z_95 * se, beta + Z_95 * se)))
}

/// Dispatches one estimator; AWA requires surfaces.
pub fn estimate(
    estimator: Estimator,
    y: &[f64],
    t: &[bool],
    w: &BalanceWeights,
    surfaces: Option<&ResponseSurfaces>,
) -> Result<EffectEstimate> {
    match estimator {
        Estimator::Wa => weighted_average(y, t, w),
        Estimator::Ols => weighted_ols(y, t, w),
        Estimator::Awa => {
            let s = surfaces.ok_or_else(|| Error::Config("AWA needs response surfaces".into()))?;
            augmented_weighted_average(y, t, w, s)
        }
    }
}
