//! Propensity scores fitted by maximizing a scoring rule tailored to the
//! estimand over a Laplacian-kernel RKHS.
//!
//! With `q = expit(f)` the scoring rules are, in log-odds form,
//!
//! ```text
//! ATE:  S(f, 1) =  f - 1 - exp(-f)     S(f, 0) = -f - 1 - exp(f)
//! ATT:  S(f, 1) = -1 - exp(-f)         S(f, 0) = -f
//! ```
//!
//! and the fitted function is `f = b + K alpha` with an unpenalized intercept.

use std::collections::HashMap;
use std::sync::Mutex;

use log::debug;
use nalgebra::{DMatrix, DVector};

use super::{normalize_groups, split_groups, BalanceWeights, Estimand, Method};
use crate::error::{Error, Result};
use crate::learners::PROB_CLAMP;
use crate::qp::{cross_gram, gram, GramMatrix, KernelSpec};
use crate::stats::{expit, logit};

const GRAD_TOL: f64 = 1e-6;
const MAX_ITER: usize = 5000;
const ARMIJO: f64 = 1e-4;

/// Scoring rule evaluated at a probability `q`.
pub fn score(q: f64, t: bool, estimand: Estimand) -> f64 {
    match (estimand, t) {
        (Estimand::Ate, true) => (q / (1.0 - q)).ln() - 1.0 / q,
        (Estimand::Ate, false) => ((1.0 - q) / q).ln() - 1.0 / (1.0 - q),
        (Estimand::Att, true) => -1.0 / q,
        (Estimand::Att, false) => ((1.0 - q) / q).ln(),
    }
}

/// Score, first and second derivative with respect to the log-odds.
#[inline]
fn score_logit(f: f64, t: bool, estimand: Estimand) -> (f64, f64, f64) {
    match (estimand, t) {
        (Estimand::Ate, true) => {
            let e = (-f).exp();
            (f - 1.0 - e, 1.0 + e, -e)
        }
        (Estimand::Ate, false) => {
            let e = f.exp();
            (-f - 1.0 - e, -1.0 - e, -e)
        }
        (Estimand::Att, true) => {
            let e = (-f).exp();
            (-1.0 - e, e, -e)
        }
        (Estimand::Att, false) => (-f, -1.0, 0.0),
    }
}

fn logits(k: &DMatrix<f64>, alpha: &DVector<f64>, intercept: f64) -> DVector<f64> {
    let mut f = k * alpha;
    f.add_scalar_mut(intercept);
    f
}

/// `(1/n) sum S(p_i, T_i) - lambda alpha'K alpha` at `p = expit(b + K alpha)`.
pub fn tlf_objective(
    k: &DMatrix<f64>,
    t: &[bool],
    estimand: Estimand,
    lambda: f64,
    alpha: &DVector<f64>,
    intercept: f64,
) -> f64 {
    let ka = k * alpha;
    let n = t.len() as f64;
    let fit: f64 = ka
        .iter()
        .zip(t)
        .map(|(v, &ti)| score_logit(v + intercept, ti, estimand).0)
        .sum::<f64>()
        / n;
    fit - lambda * alpha.dot(&ka)
}

/// Gradient of [`tlf_objective`] with respect to `(alpha, intercept)`.
pub fn tlf_gradient(
    k: &DMatrix<f64>,
    t: &[bool],
    estimand: Estimand,
    lambda: f64,
    alpha: &DVector<f64>,
    intercept: f64,
) -> (DVector<f64>, f64) {
    let f = logits(k, alpha, intercept);
    let n = t.len() as f64;
    let g = DVector::from_fn(t.len(), |i, _| score_logit(f[i], t[i], estimand).1 / n);
    let inner = &g - alpha * (2.0 * lambda);
    (k * inner, g.sum())
}

#[derive(Debug, Clone)]
pub struct TlfModel {
    pub alpha: DVector<f64>,
    pub intercept: f64,
    pub kernel: KernelSpec,
    pub lambda: f64,
    pub estimand: Estimand,
    pub gram: GramMatrix,
    pub train_x: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl TlfModel {
    /// Fitted log-odds at the training points.
    pub fn fitted_logits(&self) -> DVector<f64> {
        logits(&self.gram.values, &self.alpha, self.intercept)
    }

    pub fn fitted_proba(&self) -> Vec<f64> {
        self.fitted_logits().iter().map(|&f| clamp_prob(expit(f))).collect()
    }

    pub fn predict_logits(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        let kx = cross_gram(self.kernel, x, &self.train_x)?;
        Ok(logits(&kx, &self.alpha, self.intercept))
    }

    pub fn predict_proba(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        Ok(self.predict_logits(x)?.iter().map(|&f| clamp_prob(expit(f))).collect())
    }

    pub fn penalty(&self) -> f64 {
        self.alpha.dot(&(&self.gram.values * &self.alpha))
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Fits the penalized scoring-rule maximizer.
///
/// Each step solves the Newton system with the Gram matrix factored out of the
/// `alpha` rows, then backtracks until the Armijo condition holds. When that
/// system is singular or does not give an ascent direction the raw gradient is
/// used instead. Stops once the gradient infinity-norm drops below `1e-6`.
pub fn tlf_fit(x: &DMatrix<f64>, t: &[bool], estimand: Estimand, lambda: f64, gamma: f64) -> Result<TlfModel> {
    if x.nrows() != t.len() {
        return Err(Error::shape(t.len(), x.nrows()));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Domain(format!("TLF penalty must be nonnegative, got {lambda}")));
    }
    let (treated, _) = split_groups(t)?;
    let kernel = KernelSpec::laplacian(gamma);
    let gram = gram(kernel, x)?;
    let k = &gram.values;
    let n = t.len();

    let mut alpha = DVector::<f64>::zeros(n);
    let mut b = logit(treated.len() as f64 / n as f64);
    let mut value = tlf_objective(k, t, estimand, lambda, &alpha, b);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < MAX_ITER {
        let f = logits(k, &alpha, b);
        let mut g = DVector::<f64>::zeros(n);
        let mut d = DVector::<f64>::zeros(n);
        for i in 0..n {
            let (_, g1, g2) = score_logit(f[i], t[i], estimand);
            g[i] = g1 / n as f64;
            d[i] = g2 / n as f64;
        }
        let inner = &g - &alpha * (2.0 * lambda);
        let grad_a = k * &inner;
        let grad_b = g.sum();
        let gnorm = grad_a.amax().max(grad_b.abs());
        if gnorm < GRAD_TOL {
            converged = true;
            break;
        }
        iterations += 1;

        let (mut da, mut db) = newton_direction(k, &d, &inner, grad_b, lambda).unwrap_or_else(|| (grad_a.clone(), grad_b));
        let mut slope = grad_a.dot(&da) + grad_b * db;
        if !(slope > 0.0) || !slope.is_finite() {
            da = grad_a.clone();
            db = grad_b;
            slope = grad_a.norm_squared() + grad_b * grad_b;
        }

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand_a = &alpha + &da * step;
            let cand_b = b + db * step;
            let cand = tlf_objective(k, t, estimand, lambda, &cand_a, cand_b);
            if cand.is_finite() && cand >= value + ARMIJO * step * slope {
                alpha = cand_a;
                b = cand_b;
                value = cand;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // no representable improvement left
            break;
        }
    }
    if !value.is_finite() {
        return Err(Error::Numeric("TLF objective is not finite".into()));
    }
    if !converged {
        debug!("TLF fit stopped after {iterations} iterations without meeting the gradient tolerance");
    }
    Ok(TlfModel {
        alpha,
        intercept: b,
        kernel,
        lambda,
        estimand,
        gram,
        train_x: x.clone(),
        iterations,
        converged,
    })
}

/// Newton step `(da, db)` written with `K` cancelled from the `alpha` rows:
/// `(D K - 2 lambda I) da + D 1 db = -inner`, `1'D K da + 1'D 1 db = -grad_b`.
fn newton_direction(
    k: &DMatrix<f64>,
    d: &DVector<f64>,
    inner: &DVector<f64>,
    grad_b: f64,
    lambda: f64,
) -> Option<(DVector<f64>, f64)> {
    let n = d.len();
    let mut a = DMatrix::<f64>::zeros(n + 1, n + 1);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = d[i] * k[(i, j)];
        }
        a[(i, i)] -= 2.0 * lambda;
        a[(i, n)] = d[i];
    }
    let dk = k.tr_mul(d);
    for j in 0..n {
        a[(n, j)] = dk[j];
    }
    a[(n, n)] = d.sum();
    let mut rhs = DVector::<f64>::zeros(n + 1);
    for i in 0..n {
        rhs[i] = -inner[i];
    }
    rhs[n] = -grad_b;
    let sol = a.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((sol.rows(0, n).into_owned(), sol[n]))
}

/// Hyperparameter grid for cross-validated selection.
#[derive(Debug, Clone, PartialEq)]
pub struct TlfGrid {
    pub lambdas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub folds: usize,
}

impl Default for TlfGrid {
    fn default() -> Self {
        TlfGrid {
            lambdas: vec![1e-4, 1e-3, 1e-2, 1e-1],
            gammas: vec![0.1, 0.5, 1.0, 2.0],
            folds: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TlfHyper {
    Fixed { lambda: f64, gamma: f64 },
    Auto,
}

fn subset(x: &DMatrix<f64>, t: &[bool], idx: &[usize]) -> (DMatrix<f64>, Vec<bool>) {
    let xs = DMatrix::from_fn(idx.len(), x.ncols(), |r, c| x[(idx[r], c)]);
    (xs, idx.iter().map(|&i| t[i]).collect())
}

/// Picks `(lambda, gamma)` maximizing the mean held-out score over folds
/// assigned by `i mod folds`. Ties keep the earlier grid entry.
pub fn select_hyperparameters(x: &DMatrix<f64>, t: &[bool], estimand: Estimand, grid: &TlfGrid) -> Result<(f64, f64)> {
    split_groups(t)?;
    if grid.folds < 2 || grid.lambdas.is_empty() || grid.gammas.is_empty() {
        return Err(Error::Config("TLF grid needs at least two folds and one value per axis".into()));
    }
    let n = t.len();
    let mut best: Option<((f64, f64), f64)> = None;
    for &gamma in &grid.gammas {
        for &lambda in &grid.lambdas {
            let mut total = 0.0;
            let mut count = 0usize;
            for fold in 0..grid.folds {
                let train: Vec<usize> = (0..n).filter(|i| i % grid.folds != fold).collect();
                let test: Vec<usize> = (0..n).filter(|i| i % grid.folds == fold).collect();
                let (xtr, ttr) = subset(x, t, &train);
                let (xte, tte) = subset(x, t, &test);
                let held_out = tlf_fit(&xtr, &ttr, estimand, lambda, gamma)
                    .and_then(|m| m.predict_logits(&xte))
                    .map(|f| f.iter().zip(&tte).map(|(&fi, &ti)| score_logit(fi, ti, estimand).0).sum::<f64>());
                match held_out {
                    Ok(s) if s.is_finite() => {
                        total += s;
                        count += test.len();
                    }
                    _ => {
                        total = f64::NEG_INFINITY;
                        break;
                    }
                }
            }
            let cv = if count > 0 { total / count as f64 } else { f64::NEG_INFINITY };
            debug!("TLF CV lambda={lambda} gamma={gamma} score={cv}");
            if best.is_none_or(|(_, s)| cv > s) {
                best = Some(((lambda, gamma), cv));
            }
        }
    }
    match best {
        Some((pair, s)) if s.is_finite() => Ok(pair),
        _ => Err(Error::Estimation("TLF cross-validation failed for every grid point".into())),
    }
}

/// Write-once map from `(scenario id, estimand)` to selected `(lambda, gamma)`.
#[derive(Debug, Default)]
pub struct TlfCache {
    inner: Mutex<HashMap<(String, Estimand), (f64, f64)>>,
}

impl TlfCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, scenario: &str, estimand: Estimand) -> Option<(f64, f64)> {
        self.inner.lock().unwrap().get(&(scenario.to_string(), estimand)).copied()
    }

    /// Returns the cached pair, computing and storing it on first use. A value
    /// already present is never replaced.
    pub fn get_or_select<F>(&self, scenario: &str, estimand: Estimand, select: F) -> Result<(f64, f64)>
    where
        F: FnOnce() -> Result<(f64, f64)>,
    {
        if let Some(v) = self.get(scenario, estimand) {
            return Ok(v);
        }
        let v = select()?;
        let mut map = self.inner.lock().unwrap();
        Ok(*map.entry((scenario.to_string(), estimand)).or_insert(v))
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// IPTW-form weights from the TLF propensity, each arm normalized to one.
pub fn tlf_weights(
    x: &DMatrix<f64>,
    t: &[bool],
    estimand: Estimand,
    hyper: TlfHyper,
    grid: &TlfGrid,
) -> Result<BalanceWeights> {
    let (lambda, gamma) = match hyper {
        TlfHyper::Fixed { lambda, gamma } => (lambda, gamma),
        TlfHyper::Auto => select_hyperparameters(x, t, estimand, grid)?,
    };
    let model = tlf_fit(x, t, estimand, lambda, gamma)?;
    let p = model.fitted_proba();
    let mut values: Vec<f64> = p
        .iter()
        .zip(t)
        .map(|(&pi, &ti)| match (estimand, ti) {
            (Estimand::Ate, true) => 1.0 / pi,
            (Estimand::Ate, false) => 1.0 / (1.0 - pi),
            (Estimand::Att, true) => 1.0,
            (Estimand::Att, false) => pi / (1.0 - pi),
        })
        .collect();
    normalize_groups(&mut values, t);
    if estimand == Estimand::Att {
        // exact 1/N1 rather than a rounded quotient
        let n1 = t.iter().filter(|&&v| v).count() as f64;
        for (w, _) in values.iter_mut().zip(t).filter(|(_, &ti)| ti) {
            *w = 1.0 / n1;
        }
    }
    let mut weights = BalanceWeights::new(values, vec![true; t.len()], t, estimand, Method::Tlf);
    weights.diagnostics.note = Some(format!(
        "lambda={lambda} gamma={gamma} iterations={} converged={}",
        model.iterations, model.converged
    ));
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(n: usize, slope: f64, seed: u64) -> (DMatrix<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
        let t = (0..n)
            .map(|i| rng.random::<f64>() < expit(-0.5 + slope * x[(i, 0)]))
            .collect();
        (x, t)
    }

    #[test]
    fn score_examples() {
        assert_eq!(score(0.5, true, Estimand::Ate), -2.0);
        assert_eq!(score(0.5, false, Estimand::Att), 0.0);
        for &q in &[0.1, 0.4, 0.9] {
            for t in [true, false] {
                for e in Estimand::ALL {
                    assert!((score(q, t, e) - score_logit(logit(q), t, e).0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (x, t) = sample(20, 1.5, 7);
        let k = gram(KernelSpec::laplacian(0.8), &x).unwrap().values;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let alpha = DVector::from_fn(20, |_, _| rng.random_range(-0.5..0.5));
        let b = 0.3;
        let h = 1e-5;
        for estimand in Estimand::ALL {
            let (ga, gb) = tlf_gradient(&k, &t, estimand, 0.05, &alpha, b);
            for j in 0..20 {
                let mut up = alpha.clone();
                let mut down = alpha.clone();
                up[j] += h;
                down[j] -= h;
                let fd = (tlf_objective(&k, &t, estimand, 0.05, &up, b)
                    - tlf_objective(&k, &t, estimand, 0.05, &down, b))
                    / (2.0 * h);
                assert!((fd - ga[j]).abs() <= 1e-4 * ga[j].abs().max(1e-3), "{j}: {fd} vs {}", ga[j]);
            }
            let fd = (tlf_objective(&k, &t, estimand, 0.05, &alpha, b + h)
                - tlf_objective(&k, &t, estimand, 0.05, &alpha, b - h))
                / (2.0 * h);
            assert!((fd - gb).abs() <= 1e-4 * gb.abs().max(1e-3));
        }
    }

    #[test]
    fn fit_reaches_stationary_point() {
        let (x, t) = sample(60, 1.5, 9);
        for estimand in Estimand::ALL {
            let m = tlf_fit(&x, &t, estimand, 1e-2, 0.5).unwrap();
            assert!(m.converged);
            let (ga, gb) = tlf_gradient(&m.gram.values, &t, estimand, 1e-2, &m.alpha, m.intercept);
            assert!(ga.amax() < 1e-6 && gb.abs() < 1e-6);
            assert!(m.penalty() >= 0.0);
        }
    }

    #[test]
    fn constant_propensity_recovered_without_confounding() {
        let (x, t) = sample(1000, 0.0, 10);
        let rate = t.iter().filter(|&&v| v).count() as f64 / 1000.0;
        for estimand in Estimand::ALL {
            let m = tlf_fit(&x, &t, estimand, 1e-1, 1.0).unwrap();
            for p in m.fitted_proba() {
                assert!((p - rate).abs() <= 0.05, "{p} vs {rate}");
            }
        }
    }

    #[test]
    fn heavy_penalty_gives_intercept_only_hajek_weights() {
        let (x, t) = sample(50, 2.0, 11);
        let n1 = t.iter().filter(|&&v| v).count();
        for estimand in Estimand::ALL {
            let m = tlf_fit(&x, &t, estimand, 1e8, 1.0).unwrap();
            assert!(m.alpha.amax() < 1e-6);
            let w = tlf_weights(&x, &t, estimand, TlfHyper::Fixed { lambda: 1e8, gamma: 1.0 }, &TlfGrid::default())
                .unwrap();
            for (i, &ti) in t.iter().enumerate() {
                let expected = if ti { 1.0 / n1 as f64 } else { 1.0 / (50 - n1) as f64 };
                assert!((w.values[i] - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn weights_sum_to_one_per_arm() {
        let (x, t) = sample(80, 1.0, 12);
        for estimand in Estimand::ALL {
            let w = tlf_weights(&x, &t, estimand, TlfHyper::Fixed { lambda: 1e-3, gamma: 0.5 }, &TlfGrid::default())
                .unwrap();
            assert!((w.group_sum(&t, true) - 1.0).abs() < 1e-6);
            assert!((w.group_sum(&t, false) - 1.0).abs() < 1e-6);
            assert!(w.values.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn cross_validation_and_cache() {
        let (x, t) = sample(60, 1.0, 13);
        let grid = TlfGrid {
            lambdas: vec![1e-3, 1e-1],
            gammas: vec![0.5, 1.0],
            folds: 3,
        };
        let pick = select_hyperparameters(&x, &t, Estimand::Ate, &grid).unwrap();
        assert!(grid.lambdas.contains(&pick.0) && grid.gammas.contains(&pick.1));
        let cache = TlfCache::new();
        assert_eq!(cache.get_or_select("s", Estimand::Ate, || Ok(pick)).unwrap(), pick);
        assert_eq!(cache.get_or_select("s", Estimand::Ate, || Ok((9.0, 9.0))).unwrap(), pick);
        assert_eq!(cache.len(), 1);
    }
}
