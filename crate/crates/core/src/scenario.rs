//! Simulation scenarios and the synthetic data-generating mechanism.
//!
//! A scenario fixes the sample size, how rare treatment is and how strongly
//! the four leading covariates confound treatment and outcome. Datasets carry
//! their potential outcomes and true nuisance functions so that oracle
//! learners and invariant checks can use them. Both potential outcomes share
//! one distribution, so the true ATE and ATT are zero in every scenario.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{expit, splitmix64};

/// Number of baseline covariates.
pub const N_COVARIATES: usize = 10;

/// Smallest sample size accepted outside the benchmark grid.
pub const MIN_N: usize = 20;

/// Sample sizes of the 36-scenario grid.
pub const GRID_SIZES: [usize; 4] = [250, 500, 1000, 2000];

const MAX_REJECTIONS: usize = 100;

/// Outcome coefficients.
pub const OUTCOME_COEFS: [f64; N_COVARIATES] =
    [0.3, -0.36, -0.73, -0.2, 0.0, 0.0, 0.0, 0.71, -0.19, 0.26];
/// Treatment coefficients.
pub const TREATMENT_COEFS: [f64; N_COVARIATES] =
    [0.8, -0.25, 0.6, -0.4, -0.8, -0.5, 0.7, 0.0, 0.0, 0.0];
/// Zero-based indices of the real-valued covariates (X2, X4, X7).
pub const CONTINUOUS_COLUMNS: [usize; 3] = [1, 3, 6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rarity {
    Common,
    Rare,
    VeryRare,
}

impl Rarity {
    pub const ALL: [Rarity; 3] = [Rarity::Common, Rarity::Rare, Rarity::VeryRare];

    /// Treatment-model intercept.
    pub fn b0(self) -> f64 {
        match self {
            Rarity::Common => -1.84,
            Rarity::Rare => -4.12,
            Rarity::VeryRare => -6.5,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Rarity::Common => "common",
            Rarity::Rare => "rare",
            Rarity::VeryRare => "very_rare",
        }
    }
}

impl fmt::Display for Rarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Rarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "common" => Ok(Rarity::Common),
            "rare" => Ok(Rarity::Rare),
            "very_rare" | "veryrare" => Ok(Rarity::VeryRare),
            other => Err(Error::Config(format!("unknown treatment rarity '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confounding {
    Low,
    Moderate,
    High,
}

impl Confounding {
    pub const ALL: [Confounding; 3] = [Confounding::Low, Confounding::Moderate, Confounding::High];

    /// Outcome-model intercept.
    pub fn a0(self) -> f64 {
        match self {
            Confounding::Low => -1.5,
            Confounding::Moderate => -2.22,
            Confounding::High => -4.1,
        }
    }

    /// Confounding gain.
    pub fn g(self) -> f64 {
        match self {
            Confounding::Low => 1.0,
            Confounding::Moderate => 2.25,
            Confounding::High => 5.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Confounding::Low => "low",
            Confounding::Moderate => "moderate",
            Confounding::High => "high",
        }
    }
}

impl fmt::Display for Confounding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Confounding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" => Ok(Confounding::Low),
            "moderate" => Ok(Confounding::Moderate),
            "high" => Ok(Confounding::High),
            other => Err(Error::Config(format!("unknown confounding level '{other}'"))),
        }
    }
}

/// One simulation cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub n: usize,
    pub rarity: Rarity,
    pub confounding: Confounding,
    pub a0: f64,
    pub b0: f64,
    pub g: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(rarity: Rarity, confounding: Confounding, n: usize, seed: u64) -> Result<Self> {
        if n < MIN_N {
            return Err(Error::Domain(format!("sample size {n} is below the minimum {MIN_N}")));
        }
        Ok(ScenarioSpec {
            n,
            rarity,
            confounding,
            a0: confounding.a0(),
            b0: rarity.b0(),
            g: confounding.g(),
            seed,
        })
    }

    /// Stable identifier, e.g. `n500_common_low`.
    pub fn id(&self) -> String {
        format!("n{}_{}_{}", self.n, self.rarity, self.confounding)
    }

    /// Key mixed into per-replication seeds; depends only on the cell, not on
    /// where the cell appears in a run configuration.
    pub fn stream_key(&self) -> u64 {
        let cell = (self.rarity as u64) * 3 + self.confounding as u64;
        splitmix64(splitmix64(self.n as u64) ^ cell.wrapping_mul(0xA24B_AED4_963E_E407))
    }

    /// The 36 scenarios of the benchmark grid, ordered by (n, rarity, confounding).
    pub fn grid(seed: u64) -> Vec<ScenarioSpec> {
        let mut out = Vec::with_capacity(36);
        for &n in &GRID_SIZES {
            for rarity in Rarity::ALL {
                for confounding in Confounding::ALL {
                    out.push(ScenarioSpec::new(rarity, confounding, n, seed).expect("grid sizes are valid"));
                }
            }
        }
        out
    }
}

/// Builds a scenario from textual labels.
pub fn build_scenario(rarity: &str, confounding: &str, n: usize, seed: u64) -> Result<ScenarioSpec> {
    ScenarioSpec::new(rarity.parse()?, confounding.parse()?, n, seed)
}

/// Seed for one replication of one scenario. Replications are independent of
/// execution order.
pub fn replication_seed(master_seed: u64, scenario_key: u64, replication: u64) -> u64 {
    splitmix64(splitmix64(master_seed ^ splitmix64(scenario_key)) ^ replication.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Latent Gaussian model and the coefficient vectors of the generator.
#[derive(Debug, Clone)]
pub struct CovariateModel {
    pub covariance: DMatrix<f64>,
    pub continuous_indices: [usize; 3],
    pub a: [f64; N_COVARIATES],
    pub b: [f64; N_COVARIATES],
    factor: DMatrix<f64>,
}

impl CovariateModel {
    /// The benchmark's covariance structure; the Cholesky factor is computed once.
    pub fn standard() -> &'static CovariateModel {
        static MODEL: OnceLock<CovariateModel> = OnceLock::new();
        MODEL.get_or_init(|| {
            let mut cov = DMatrix::<f64>::identity(N_COVARIATES, N_COVARIATES);
            for &(i, j, rho) in &[(0, 4, 0.2), (2, 7, 0.2), (1, 5, 0.9), (3, 8, 0.9)] {
                cov[(i, j)] = rho;
                cov[(j, i)] = rho;
            }
            CovariateModel::with_covariance(cov).expect("standard covariance is positive definite")
        })
    }

    /// Same coefficients, user-supplied covariance.
    pub fn with_covariance(covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.shape() != (N_COVARIATES, N_COVARIATES) {
            return Err(Error::shape("10x10 covariance", format!("{:?}", covariance.shape())));
        }
        let chol: Cholesky<f64, Dyn> = covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric("covariance matrix is not positive definite".into()))?;
        Ok(CovariateModel {
            factor: chol.l(),
            covariance,
            continuous_indices: [1, 3, 6],
            a: OUTCOME_COEFS,
            b: TREATMENT_COEFS,
        })
    }

    pub fn is_continuous(&self, column: usize) -> bool {
        self.continuous_indices.contains(&column)
    }

    /// Draws the latent Gaussian matrix (n x 10).
    pub fn sample_latent<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> DMatrix<f64> {
        let mut out = DMatrix::<f64>::zeros(n, N_COVARIATES);
        let mut z = [0.0f64; N_COVARIATES];
        for i in 0..n {
            for zk in z.iter_mut() {
                *zk = rng.sample(StandardNormal);
            }
            for r in 0..N_COVARIATES {
                let mut acc = 0.0;
                for k in 0..=r {
                    acc += self.factor[(r, k)] * z[k];
                }
                out[(i, r)] = acc;
            }
        }
        out
    }

    /// Turns latent draws into observed covariates: continuous columns pass
    /// through, the rest become 1{latent > 0}.
    pub fn dichotomize(&self, mut latent: DMatrix<f64>) -> DMatrix<f64> {
        for col in 0..N_COVARIATES {
            if self.is_continuous(col) {
                continue;
            }
            for v in latent.column_mut(col).iter_mut() {
                *v = if *v > 0.0 { 1.0 } else { 0.0 };
            }
        }
        latent
    }
}

/// Draws an n x 10 covariate matrix.
pub fn sample_covariates<R: Rng + ?Sized>(model: &CovariateModel, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::Domain("cannot sample zero rows".into()));
    }
    Ok(model.dichotomize(model.sample_latent(n, rng)))
}

fn check_row(x_row: &[f64]) -> Result<()> {
    if x_row.len() != N_COVARIATES {
        return Err(Error::shape(N_COVARIATES, x_row.len()));
    }
    Ok(())
}

fn linear_score(x_row: &[f64], coefs: &[f64; N_COVARIATES]) -> f64 {
    x_row.iter().zip(coefs).map(|(x, c)| x * c).sum()
}

/// True propensity e(x) = P(T = 1 | X = x).
pub fn true_propensity(spec: &ScenarioSpec, x_row: &[f64]) -> Result<f64> {
    check_row(x_row)?;
    Ok(propensity_unchecked(spec, x_row))
}

/// True response surface mu(x) = P(Y(t) = 1 | X = x), identical for both arms.
pub fn true_response(spec: &ScenarioSpec, x_row: &[f64]) -> Result<f64> {
    check_row(x_row)?;
    Ok(response_unchecked(spec, x_row))
}

pub(crate) fn propensity_unchecked(spec: &ScenarioSpec, x: &[f64]) -> f64 {
    let s = linear_score(x, &TREATMENT_COEFS) + 0.5 * x[0] * x[1] * x[1];
    expit(spec.b0 + spec.g * s)
}

pub(crate) fn response_unchecked(spec: &ScenarioSpec, x: &[f64]) -> f64 {
    let s = linear_score(x, &OUTCOME_COEFS) + 0.5 * x[2] * x[3] * x[3];
    expit(spec.a0 + spec.g * s)
}

/// One simulated sample together with its latent truths.
#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub x: DMatrix<f64>,
    pub t: Vec<bool>,
    pub y: Vec<f64>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub e_true: Vec<f64>,
    pub mu_true: Vec<f64>,
    pub n0: usize,
    pub n1: usize,
    /// Whole-dataset redraws caused by an empty arm.
    pub rejections: usize,
}

impl SimulatedDataset {
    pub fn n(&self) -> usize {
        self.t.len()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    /// Writes the dataset as CSV with header x1..x10,t,y,y0,y1,e_true,mu_true.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header: Vec<String> = (1..=N_COVARIATES)
            .map(|k| format!("x{k}"))
            .chain(["t", "y", "y0", "y1", "e_true", "mu_true"].iter().map(|s| s.to_string()))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.n() {
            let mut fields: Vec<String> = self.x.row(i).iter().map(|v| format!("{v}")).collect();
            fields.push(u8::from(self.t[i]).to_string());
            for v in [self.y[i], self.y0[i], self.y1[i], self.e_true[i], self.mu_true[i]] {
                fields.push(format!("{v}"));
            }
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

/// Generates a dataset, redrawing it whole when either arm comes out empty.
pub fn generate_dataset<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> Result<SimulatedDataset> {
    let model = CovariateModel::standard();
    let mut rejections = 0;
    loop {
        let mut data = draw_once(spec, model, rng)?;
        if data.n0 > 0 && data.n1 > 0 {
            data.rejections = rejections;
            if rejections > 0 {
                log::debug!("{}: {} empty-arm redraws", spec.id(), rejections);
            }
            return Ok(data);
        }
        rejections += 1;
        if rejections > MAX_REJECTIONS {
            return Err(Error::Generation { rejections });
        }
    }
}

fn draw_once<R: Rng + ?Sized>(spec: &ScenarioSpec, model: &CovariateModel, rng: &mut R) -> Result<SimulatedDataset> {
    let n = spec.n;
    let x = sample_covariates(model, n, rng)?;
    let mut t = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut y0 = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    let mut e_true = Vec::with_capacity(n);
    let mut mu_true = Vec::with_capacity(n);
    let mut row = [0.0f64; N_COVARIATES];
    for i in 0..n {
        for (k, v) in row.iter_mut().enumerate() {
            *v = x[(i, k)];
        }
        let e = propensity_unchecked(spec, &row);
        let mu = response_unchecked(spec, &row);
        let ti = rng.random::<f64>() < e;
        let y0i = f64::from(u8::from(rng.random::<f64>() < mu));
        let y1i = f64::from(u8::from(rng.random::<f64>() < mu));
        t.push(ti);
        y0.push(y0i);
        y1.push(y1i);
        y.push(if ti { y1i } else { y0i });
        e_true.push(e);
        mu_true.push(mu);
    }
    let n1 = t.iter().filter(|&&v| v).count();
    Ok(SimulatedDataset {
        x,
        t,
        y,
        y0,
        y1,
        e_true,
        mu_true,
        n0: n - n1,
        n1,
        rejections: 0,
    })
}

/// Difference of raw group means.
pub fn crude_estimate(t: &[bool], y: &[f64]) -> Result<f64> {
    if t.len() != y.len() {
        return Err(Error::shape(t.len(), y.len()));
    }
    let (mut s1, mut s0, mut n1, mut n0) = (0.0, 0.0, 0usize, 0usize);
    for (&ti, &yi) in t.iter().zip(y) {
        if ti {
            s1 += yi;
            n1 += 1;
        } else {
            s0 += yi;
            n0 += 1;
        }
    }
    if n1 == 0 || n0 == 0 {
        return Err(Error::Domain("crude estimate needs both arms".into()));
    }
    Ok(s1 / n1 as f64 - s0 / n0 as f64)
}
