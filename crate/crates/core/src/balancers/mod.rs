//! Balancing weights: IPTW, energy balancing, kernel optimal matching and
//! tailored-loss propensity scores, for the ATE and the ATT.

mod energy;
mod iptw;
mod kom;
mod tlf;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qp::QpStatus;

pub use energy::{energy_balance, energy_balance_with, energy_objective};
pub use iptw::{iptw_weights, IptwPostproc};
pub use kom::{gp_log_marginal_likelihood, kom_objective, kom_weights, KomOptions, LambdaChoice, KOM_LAMBDA_GRID};
pub use tlf::{
    score, select_hyperparameters, tlf_fit, tlf_gradient, tlf_objective, tlf_weights, TlfCache, TlfGrid, TlfHyper,
    TlfModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimand {
    #[serde(rename = "ATE")]
    Ate,
    #[serde(rename = "ATT")]
    Att,
}

impl Estimand {
    pub const ALL: [Estimand; 2] = [Estimand::Ate, Estimand::Att];

    pub fn label(self) -> &'static str {
        match self {
            Estimand::Ate => "ATE",
            Estimand::Att => "ATT",
        }
    }
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Estimand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ATE" => Ok(Estimand::Ate),
            "ATT" => Ok(Estimand::Att),
            other => Err(Error::Config(format!("unknown estimand '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Iptw,
    Eb,
    Kom,
    Tlf,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Iptw, Method::Eb, Method::Kom, Method::Tlf];

    pub fn label(self) -> &'static str {
        match self {
            Method::Iptw => "iptw",
            Method::Eb => "eb",
            Method::Kom => "kom",
            Method::Tlf => "tlf",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "iptw" => Ok(Method::Iptw),
            "eb" => Ok(Method::Eb),
            "kom" => Ok(Method::Kom),
            "tlf" => Ok(Method::Tlf),
            other => Err(Error::Config(format!("unknown balancing method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightDiagnostics {
    pub max_weight: f64,
    pub ess_treated: f64,
    pub ess_control: f64,
    pub solver_status: Option<QpStatus>,
    pub kkt_residual: Option<f64>,
    /// Free-form note, e.g. a regularization fallback.
    pub note: Option<String>,
}

/// Per-observation weights produced by one balancing method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceWeights {
    pub values: Vec<f64>,
    pub estimand: Estimand,
    pub method: Method,
    /// `false` marks observations removed by trimming.
    pub kept: Vec<bool>,
    pub diagnostics: WeightDiagnostics,
}

impl BalanceWeights {
    pub(crate) fn new(values: Vec<f64>, kept: Vec<bool>, t: &[bool], estimand: Estimand, method: Method) -> Self {
        let ess = |treated: bool| {
            let (s, s2) = values
                .iter()
                .zip(t)
                .zip(&kept)
                .filter(|((_, &ti), &k)| ti == treated && k)
                .fold((0.0, 0.0), |(s, s2), ((&w, _), _)| (s + w, s2 + w * w));
            if s2 > 0.0 {
                s * s / s2
            } else {
                0.0
            }
        };
        let diagnostics = WeightDiagnostics {
            max_weight: values.iter().copied().fold(0.0, f64::max),
            ess_treated: ess(true),
            ess_control: ess(false),
            ..Default::default()
        };
        BalanceWeights {
            values,
            estimand,
            method,
            kept,
            diagnostics,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Sum of kept weights in one arm.
    pub fn group_sum(&self, t: &[bool], treated: bool) -> f64 {
        self.values
            .iter()
            .zip(t)
            .zip(&self.kept)
            .filter(|((_, &ti), &k)| ti == treated && k)
            .map(|((w, _), _)| w)
            .sum()
    }

    /// True when a solver-backed method did not reach optimality.
    pub fn solver_failed(&self) -> bool {
        matches!(self.diagnostics.solver_status, Some(s) if s != QpStatus::Optimal)
    }

    /// Writes `index,method,estimand,weight,kept` rows (no header).
    pub fn write_csv_rows<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        for (i, (v, k)) in self.values.iter().zip(&self.kept).enumerate() {
            writeln!(w, "{i},{},{},{v},{}", self.method, self.estimand, u8::from(*k))?;
        }
        Ok(())
    }
}

/// Indices of treated and control observations; both must be non-empty.
pub(crate) fn split_groups(t: &[bool]) -> Result<(Vec<usize>, Vec<usize>)> {
    let treated: Vec<usize> = (0..t.len()).filter(|&i| t[i]).collect();
    let control: Vec<usize> = (0..t.len()).filter(|&i| !t[i]).collect();
    if treated.is_empty() || control.is_empty() {
        return Err(Error::Domain("balancing needs at least one treated and one control unit".into()));
    }
    Ok((treated, control))
}

/// Rescales each arm to sum to one.
pub(crate) fn normalize_groups(values: &mut [f64], t: &[bool]) {
    for arm in [true, false] {
        let s: f64 = values.iter().zip(t).filter(|(_, &ti)| ti == arm).map(|(w, _)| w).sum();
        if s > 0.0 {
            for (w, _) in values.iter_mut().zip(t).filter(|(_, &ti)| ti == arm) {
                *w /= s;
            }
        }
    }
}

pub(crate) fn uniform_group_weights(t: &[bool], n1: usize, n0: usize) -> Vec<f64> {
    t.iter()
        .map(|&ti| if ti { 1.0 / n1 as f64 } else { 1.0 / n0 as f64 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.label().parse::<Method>().unwrap(), m);
        }
        for e in Estimand::ALL {
            assert_eq!(e.label().parse::<Estimand>().unwrap(), e);
        }
        assert!("ipw".parse::<Method>().is_err());
    }

    #[test]
    fn effective_sample_size() {
        let t = [true, true, false, false];
        let w = BalanceWeights::new(vec![0.5, 0.5, 0.9, 0.1], vec![true; 4], &t, Estimand::Ate, Method::Eb);
        assert!((w.diagnostics.ess_treated - 2.0).abs() < 1e-12);
        assert!((w.diagnostics.ess_control - 1.0 / 0.82).abs() < 1e-12);
        assert_eq!(w.diagnostics.max_weight, 0.9);
    }

    #[test]
    fn weight_csv_rows() {
        let t = [true, false];
        let w = BalanceWeights::new(vec![1.0, 0.25], vec![true, false], &t, Estimand::Att, Method::Iptw);
        let mut buf = Vec::new();
        w.write_csv_rows(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "0,iptw,ATT,1,1\n1,iptw,ATT,0.25,0\n");
    }
}
