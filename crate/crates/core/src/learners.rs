//! Nuisance learners: logistic regression fitted by IRLS, and oracle learners
//! that read the generator's true propensity and response surfaces.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scenario::{propensity_unchecked, response_unchecked, ScenarioSpec, N_COVARIATES};
use crate::stats::expit;

/// Predictions are clamped to [PROB_CLAMP, 1 - PROB_CLAMP].
pub const PROB_CLAMP: f64 = 1e-12;

const INITIAL_RIDGE: f64 = 1e-4;
const MAX_RIDGE: f64 = 1e6;
/// Coefficients beyond this magnitude are taken as a sign of separation.
const SEPARATION_BOUND: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Propensity,
    Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    WellSpecified,
    Misspecified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub target: Target,
    pub form: Form,
}

impl FeatureSpec {
    pub fn new(target: Target, form: Form) -> Self {
        FeatureSpec { target, form }
    }

    pub fn n_columns(&self) -> usize {
        match self.form {
            Form::WellSpecified => N_COVARIATES + 1,
            Form::Misspecified => N_COVARIATES,
        }
    }
}

/// Builds the design matrix for a feature specification. The well-specified
/// propensity design appends X1 * X2^2, the outcome design X3 * X4^2.
pub fn engineer_features(x: &DMatrix<f64>, spec: FeatureSpec) -> Result<DMatrix<f64>> {
    if x.ncols() != N_COVARIATES {
        return Err(Error::shape(format!("{N_COVARIATES} columns"), x.ncols()));
    }
    match spec.form {
        Form::Misspecified => Ok(x.clone()),
        Form::WellSpecified => {
            let (a, b) = match spec.target {
                Target::Propensity => (0, 1),
                Target::Outcome => (2, 3),
            };
            let n = x.nrows();
            let mut out = x.clone().resize_horizontally(N_COVARIATES + 1, 0.0);
            for i in 0..n {
                out[(i, N_COVARIATES)] = x[(i, a)] * x[(i, b)] * x[(i, b)];
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IrlsOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        IrlsOptions {
            max_iter: 100,
            tol: 1e-9,
        }
    }
}

/// A fitted logistic regression. Coefficients are stored intercept first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogisticModel {
    pub coefficients: Vec<f64>,
    pub feature_spec: Option<FeatureSpec>,
    pub converged: bool,
    pub ridge_used: f64,
    pub iterations: usize,
    /// Penalized log-likelihood after each accepted IRLS step of the final fit.
    pub loglik_trace: Vec<f64>,
}

impl LogisticModel {
    fn linear_predictor(&self, design_row: impl Iterator<Item = f64>) -> f64 {
        self.coefficients[0]
            + self.coefficients[1..]
                .iter()
                .zip(design_row)
                .map(|(b, x)| b * x)
                .sum::<f64>()
    }

    /// Probabilities for rows of an already-engineered design matrix.
    pub fn predict_design(&self, design: &DMatrix<f64>) -> Result<Vec<f64>> {
        if design.ncols() + 1 != self.coefficients.len() {
            return Err(Error::shape(self.coefficients.len() - 1, design.ncols()));
        }
        Ok((0..design.nrows())
            .map(|i| clamp_prob(expit(self.linear_predictor(design.row(i).iter().copied()))))
            .collect())
    }

    /// Probabilities for raw covariates; engineered features are added when the
    /// model carries a feature specification.
    pub fn predict_proba(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        match self.feature_spec {
            Some(spec) => self.predict_design(&engineer_features(x, spec)?),
            None => self.predict_design(x),
        }
    }

    /// Plain-text coefficient listing.
    pub fn coefficient_listing(&self) -> String {
        let mut s = format!(
            "converged={} ridge_used={:e} iterations={}\n",
            self.converged, self.ridge_used, self.iterations
        );
        for (j, b) in self.coefficients.iter().enumerate() {
            let name = if j == 0 { "intercept".to_string() } else { format!("beta{j}") };
            s.push_str(&format!("{name}\t{b:.10e}\n"));
        }
        s
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Maximum-likelihood logistic regression by iteratively reweighted least
/// squares. An intercept column is added internally. On separation or
/// non-convergence the fit is repeated with a ridge penalty on the slopes,
/// starting at 1e-4 and growing tenfold until a fit converges.
pub fn fit_logistic(design: &DMatrix<f64>, labels: &[f64], opts: IrlsOptions) -> Result<LogisticModel> {
    let n = design.nrows();
    if n == 0 {
        return Err(Error::Numeric("design matrix has no rows".into()));
    }
    if labels.len() != n {
        return Err(Error::shape(n, labels.len()));
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Domain("logistic labels must be 0 or 1".into()));
    }
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    if positives == 0 || positives == n {
        return Err(Error::Domain("logistic regression needs both classes".into()));
    }
    let z = design.clone().insert_column(0, 1.0);

    let mut ridge = 0.0;
    loop {
        match irls(&z, labels, ridge, opts) {
            Some(mut model) => {
                model.ridge_used = ridge;
                if ridge > 0.0 {
                    log::debug!("logistic fit needed ridge {ridge:e}");
                }
                return Ok(model);
            }
            None => {
                ridge = if ridge == 0.0 { INITIAL_RIDGE } else { ridge * 10.0 };
                if ridge > MAX_RIDGE {
                    return Err(Error::Numeric("logistic fit failed to converge at every ridge level".into()));
                }
            }
        }
    }
}

fn penalized_loglik(z: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, ridge: f64) -> f64 {
    let eta = z * beta;
    let mut ll = 0.0;
    for (e, &yi) in eta.iter().zip(y) {
        // log(1 + exp(e)) computed stably
        let softplus = if *e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
        ll += yi * e - softplus;
    }
    ll - 0.5 * ridge * beta.rows(1, beta.len() - 1).norm_squared()
}

fn irls(z: &DMatrix<f64>, y: &[f64], ridge: f64, opts: IrlsOptions) -> Option<LogisticModel> {
    let (n, p) = z.shape();
    let mut beta = DVector::<f64>::zeros(p);
    let ybar = y.iter().sum::<f64>() / n as f64;
    beta[0] = (ybar / (1.0 - ybar)).ln();
    let mut ll = penalized_loglik(z, y, &beta, ridge);
    let mut trace = vec![ll];

    for iter in 1..=opts.max_iter {
        let eta = z * &beta;
        let mut grad = DVector::<f64>::zeros(p);
        let mut hess = DMatrix::<f64>::zeros(p, p);
        for i in 0..n {
            let mu = expit(eta[i]);
            let w = mu * (1.0 - mu);
            let r = y[i] - mu;
            for a in 0..p {
                let za = z[(i, a)];
                grad[a] += za * r;
                let wza = w * za;
                for b in a..p {
                    hess[(a, b)] += wza * z[(i, b)];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        for j in 1..p {
            grad[j] -= ridge * beta[j];
            hess[(j, j)] += ridge;
        }
        if grad.amax() < 1e-10 {
            if ridge == 0.0 && separated(z, y, &beta) {
                return None;
            }
            return finish(beta, iter - 1, trace, ridge);
        }
        let step = hess.cholesky()?.solve(&grad);

        // Step halving keeps the objective non-decreasing.
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let candidate = &beta + &step * scale;
            let cand_ll = penalized_loglik(z, y, &candidate, ridge);
            if cand_ll.is_finite() && cand_ll >= ll {
                accepted = Some((candidate, cand_ll));
                break;
            }
            scale *= 0.5;
        }
        let (new_beta, new_ll) = accepted?;
        let delta = new_ll - ll;
        beta = new_beta;
        ll = new_ll;
        trace.push(ll);
        if ridge == 0.0 && beta.amax() > SEPARATION_BOUND {
            return None;
        }
        if delta <= opts.tol * (ll.abs() + 1.0) {
            let g = gradient(z, y, &beta, ridge);
            if g.amax() < 1e-6 {
                if ridge == 0.0 && separated(z, y, &beta) {
                    return None;
                }
                return finish(beta, iter, trace, ridge);
            }
        }
    }
    None
}

/// Every fitted probability within 1e-6 of its label.
fn separated(z: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>) -> bool {
    let eta = z * beta;
    eta.iter().zip(y).all(|(e, yi)| (yi - expit(*e)).abs() < 1e-6)
}

fn gradient(z: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, ridge: f64) -> DVector<f64> {
    let eta = z * beta;
    let resid = DVector::from_iterator(y.len(), eta.iter().zip(y).map(|(e, yi)| yi - expit(*e)));
    let mut g = z.tr_mul(&resid);
    for j in 1..g.len() {
        g[j] -= ridge * beta[j];
    }
    g
}

fn finish(beta: DVector<f64>, iterations: usize, trace: Vec<f64>, ridge: f64) -> Option<LogisticModel> {
    if ridge == 0.0 && beta.amax() > SEPARATION_BOUND {
        return None;
    }
    Some(LogisticModel {
        coefficients: beta.iter().copied().collect(),
        feature_spec: None,
        converged: true,
        ridge_used: ridge,
        iterations,
        loglik_trace: trace,
    })
}

/// Fits a logistic model on raw covariates with the given feature specification.
pub fn fit_with_features(x: &DMatrix<f64>, labels: &[f64], spec: FeatureSpec) -> Result<LogisticModel> {
    let design = engineer_features(x, spec)?;
    let mut model = fit_logistic(&design, labels, IrlsOptions::default())?;
    model.feature_spec = Some(spec);
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Oracle,
    LogisticWell,
    LogisticMis,
}

impl LearnerKind {
    pub const ALL: [LearnerKind; 3] = [LearnerKind::Oracle, LearnerKind::LogisticWell, LearnerKind::LogisticMis];

    pub fn label(self) -> &'static str {
        match self {
            LearnerKind::Oracle => "oracle",
            LearnerKind::LogisticWell => "logistic_well",
            LearnerKind::LogisticMis => "logistic_mis",
        }
    }

    fn form(self) -> Option<Form> {
        match self {
            LearnerKind::Oracle => None,
            LearnerKind::LogisticWell => Some(Form::WellSpecified),
            LearnerKind::LogisticMis => Some(Form::Misspecified),
        }
    }
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "oracle" => Ok(LearnerKind::Oracle),
            "logistic_well" | "well" => Ok(LearnerKind::LogisticWell),
            "logistic_mis" | "mis" => Ok(LearnerKind::LogisticMis),
            other => Err(Error::Config(format!("unknown learner '{other}'"))),
        }
    }
}

/// What a learner is built from.
pub enum LearnerSource<'a> {
    Scenario(&'a ScenarioSpec),
    Fitted(LogisticModel),
}

/// A nuisance model mapping a covariate row to a probability.
#[derive(Debug, Clone)]
pub enum Learner {
    Oracle { spec: ScenarioSpec, target: Target },
    Logistic(LogisticModel),
}

impl Learner {
    pub fn kind(&self) -> LearnerKind {
        match self {
            Learner::Oracle { .. } => LearnerKind::Oracle,
            Learner::Logistic(m) => match m.feature_spec.map(|f| f.form) {
                Some(Form::WellSpecified) => LearnerKind::LogisticWell,
                _ => LearnerKind::LogisticMis,
            },
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> Result<f64> {
        match self {
            Learner::Oracle { spec, target } => {
                if row.len() != N_COVARIATES {
                    return Err(Error::shape(N_COVARIATES, row.len()));
                }
                Ok(match target {
                    Target::Propensity => propensity_unchecked(spec, row),
                    Target::Outcome => response_unchecked(spec, row),
                })
            }
            Learner::Logistic(m) => {
                let x = DMatrix::from_row_slice(1, row.len(), row);
                Ok(m.predict_proba(&x)?[0])
            }
        }
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        match self {
            Learner::Oracle { .. } => {
                let mut row = vec![0.0; x.ncols()];
                (0..x.nrows())
                    .map(|i| {
                        for (k, v) in row.iter_mut().enumerate() {
                            *v = x[(i, k)];
                        }
                        self.predict_row(&row)
                    })
                    .collect()
            }
            Learner::Logistic(m) => m.predict_proba(x),
        }
    }
}

/// Wraps a scenario (oracle) or a fitted model as a learner.
pub fn make_learner(kind: LearnerKind, target: Target, source: LearnerSource<'_>) -> Result<Learner> {
    match (kind, source) {
        (LearnerKind::Oracle, LearnerSource::Scenario(spec)) => Ok(Learner::Oracle { spec: *spec, target }),
        (LearnerKind::Oracle, LearnerSource::Fitted(_)) => {
            Err(Error::Config("oracle learners are built from a scenario".into()))
        }
        (_, LearnerSource::Scenario(_)) => Err(Error::Config("logistic learners need a fitted model".into())),
        (_, LearnerSource::Fitted(model)) => Ok(Learner::Logistic(model)),
    }
}

/// Fits (or, for the oracle, wraps) a learner for one target on one sample.
pub fn fit_learner(
    kind: LearnerKind,
    target: Target,
    spec: &ScenarioSpec,
    x: &DMatrix<f64>,
    labels: &[f64],
) -> Result<Learner> {
    match kind.form() {
        None => make_learner(kind, target, LearnerSource::Scenario(spec)),
        Some(form) => {
            let model = fit_with_features(x, labels, FeatureSpec::new(target, form))?;
            make_learner(kind, target, LearnerSource::Fitted(model))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{build_scenario, generate_dataset};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn feature_engineering() {
        let mut x = DMatrix::<f64>::zeros(2, 10);
        x[(0, 0)] = 1.0;
        x[(0, 1)] = 2.0;
        x[(1, 2)] = 0.0;
        x[(1, 3)] = 5.0;
        let mis = engineer_features(&x, FeatureSpec::new(Target::Propensity, Form::Misspecified)).unwrap();
        assert_eq!(mis, x);
        let p = engineer_features(&x, FeatureSpec::new(Target::Propensity, Form::WellSpecified)).unwrap();
        assert_eq!(p.ncols(), 11);
        assert_eq!(p[(0, 10)], 4.0);
        let o = engineer_features(&x, FeatureSpec::new(Target::Outcome, Form::WellSpecified)).unwrap();
        assert_eq!(o[(1, 10)], 0.0);
        let bad = DMatrix::<f64>::zeros(2, 9);
        assert!(matches!(
            engineer_features(&bad, FeatureSpec::new(Target::Outcome, Form::Misspecified)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn intercept_only_fit_recovers_logit_of_mean() {
        let design = DMatrix::<f64>::zeros(10, 0);
        let labels = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let m = fit_logistic(&design, &labels, IrlsOptions::default()).unwrap();
        assert_eq!(m.coefficients.len(), 1);
        assert!((m.coefficients[0] - (0.3f64 / 0.7).ln()).abs() < 1e-9);
        assert_eq!(m.ridge_used, 0.0);
    }

    #[test]
    fn separation_triggers_ridge() {
        let design = DMatrix::from_column_slice(6, 1, &[-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]);
        let labels = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let m = fit_logistic(&design, &labels, IrlsOptions::default()).unwrap();
        assert!(m.converged);
        assert!(m.ridge_used > 0.0);
        let p = m.predict_design(&design).unwrap();
        assert!(p[5] > p[0]);
    }

    #[test]
    fn single_class_and_empty_design_are_errors() {
        let design = DMatrix::<f64>::zeros(3, 1);
        assert!(matches!(
            fit_logistic(&design, &[1.0, 1.0, 1.0], IrlsOptions::default()),
            Err(Error::Domain(_))
        ));
        let empty = DMatrix::<f64>::zeros(0, 1);
        assert!(matches!(fit_logistic(&empty, &[], IrlsOptions::default()), Err(Error::Numeric(_))));
    }

    #[test]
    fn mle_is_consistent_and_gradient_vanishes() {
        let truth = [-0.5, 1.0, -0.7, 0.3];
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut design = DMatrix::<f64>::zeros(n, 3);
        let mut labels = vec![0.0; n];
        for i in 0..n {
            let mut eta = truth[0];
            for j in 0..3 {
                let v: f64 = rng.sample(rand_distr::StandardNormal);
                design[(i, j)] = v;
                eta += truth[j + 1] * v;
            }
            labels[i] = f64::from(u8::from(rng.random::<f64>() < expit(eta)));
        }
        let m = fit_logistic(&design, &labels, IrlsOptions::default()).unwrap();
        assert_eq!(m.ridge_used, 0.0);
        for (b, t) in m.coefficients.iter().zip(truth) {
            assert!((b - t).abs() < 0.05, "{b} vs {t}");
        }
        for w in m.loglik_trace.windows(2) {
            assert!(w[1] >= w[0]);
        }
        let z = design.clone().insert_column(0, 1.0);
        let g = gradient(&z, &labels, &DVector::from_vec(m.coefficients.clone()), 0.0);
        assert!(g.amax() < 1e-6);
    }

    #[test]
    fn predictions_match_scalar_loop_and_are_monotone() {
        let model = LogisticModel {
            coefficients: vec![0.2, 1.5, -0.4],
            feature_spec: None,
            converged: true,
            ridge_used: 0.0,
            iterations: 0,
            loglik_trace: vec![],
        };
        let x = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 2.0, -4.0, 0.5]);
        let p = model.predict_design(&x).unwrap();
        assert!((p[0] - expit(0.2)).abs() < 1e-15);
        for i in 0..3 {
            let eta = 0.2 + 1.5 * x[(i, 0)] - 0.4 * x[(i, 1)];
            assert!((p[i] - 1.0 / (1.0 + (-eta).exp())).abs() < 1e-14);
        }
        let up = model.predict_design(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap()[0];
        let upper = model.predict_design(&DMatrix::from_row_slice(1, 2, &[2.0, 0.0])).unwrap()[0];
        assert!(upper > up);
        let extreme = model.predict_design(&DMatrix::from_row_slice(1, 2, &[1e4, 0.0])).unwrap()[0];
        assert!(extreme < 1.0);
        assert!(model.predict_design(&DMatrix::<f64>::zeros(1, 3)).is_err());
    }

    #[test]
    fn oracle_learners_are_exact() {
        let spec = build_scenario("rare", "high", 300, 9).unwrap();
        let d = generate_dataset(&spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let e = fit_learner(LearnerKind::Oracle, Target::Propensity, &spec, &d.x, &[]).unwrap();
        let mu = fit_learner(LearnerKind::Oracle, Target::Outcome, &spec, &d.x, &[]).unwrap();
        assert_eq!(e.predict(&d.x).unwrap(), d.e_true);
        assert_eq!(mu.predict(&d.x).unwrap(), d.mu_true);
        assert_eq!(e.kind(), LearnerKind::Oracle);
    }

    #[test]
    fn well_specified_beats_misspecified_in_sample() {
        let spec = build_scenario("common", "high", 2000, 3).unwrap();
        let d = generate_dataset(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let labels: Vec<f64> = d.t.iter().map(|&t| f64::from(u8::from(t))).collect();
        let mean_ll = |learner: &Learner| {
            let p = learner.predict(&d.x).unwrap();
            p.iter()
                .zip(&labels)
                .map(|(p, y)| y * p.ln() + (1.0 - y) * (1.0 - p).ln())
                .sum::<f64>()
                / labels.len() as f64
        };
        let well = fit_learner(LearnerKind::LogisticWell, Target::Propensity, &spec, &d.x, &labels).unwrap();
        let mis = fit_learner(LearnerKind::LogisticMis, Target::Propensity, &spec, &d.x, &labels).unwrap();
        assert_eq!(well.kind(), LearnerKind::LogisticWell);
        assert!(mean_ll(&well) > mean_ll(&mis));
    }

    #[test]
    fn coefficient_listing_is_plain_text() {
        let design = DMatrix::from_column_slice(4, 1, &[0.0, 1.0, 0.0, 1.0]);
        let m = fit_logistic(&design, &[0.0, 1.0, 1.0, 0.0], IrlsOptions::default()).unwrap();
        let s = m.coefficient_listing();
        assert!(s.contains("intercept"));
        assert!(s.lines().count() == 3);
    }
}
