//! Kernel optimal matching with a Gaussian kernel shared by both arms.

use log::warn;
use nalgebra::{DMatrix, DVector};

use super::{split_groups, uniform_group_weights, BalanceWeights, Estimand, Method};
use crate::error::{Error, Result};
use crate::qp::{gram, median_heuristic, solve_qp, EqualityBlock, KernelSpec, QuadraticProgram, SolverOptions};

/// Ridge values scanned by the marginal-likelihood rule.
pub const KOM_LAMBDA_GRID: [f64; 5] = [1e-3, 1e-2, 1e-1, 1e0, 1e1];

const FALLBACK_LAMBDA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub enum LambdaChoice {
    /// Per-arm maximizer of the Gaussian-process marginal likelihood.
    MarginalLikelihood(Vec<f64>),
    /// Same ridge for both arms.
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct KomOptions {
    pub lambda: LambdaChoice,
    /// Kernel bandwidth; the median heuristic is used when `None`.
    pub sigma: Option<f64>,
    pub solver: SolverOptions,
}

impl Default for KomOptions {
    fn default() -> Self {
        KomOptions {
            lambda: LambdaChoice::MarginalLikelihood(KOM_LAMBDA_GRID.to_vec()),
            sigma: None,
            solver: SolverOptions::default(),
        }
    }
}

/// Log marginal likelihood of `y` (centred internally) under a zero-mean
/// Gaussian process with covariance `s2 (K + lambda I)`, with `s2` profiled
/// out at its maximizer.
pub fn gp_log_marginal_likelihood(k: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<f64> {
    let m = y.len();
    if k.shape() != (m, m) {
        return Err(Error::shape(format!("{m}x{m}"), format!("{:?}", k.shape())));
    }
    if m == 0 || !(lambda > 0.0) {
        return Err(Error::Domain("marginal likelihood needs data and a positive ridge".into()));
    }
    let ybar = y.iter().sum::<f64>() / m as f64;
    let yc = DVector::from_iterator(m, y.iter().map(|v| v - ybar));
    let mut a = k.clone();
    for i in 0..m {
        a[(i, i)] += lambda;
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Numeric(format!("K + {lambda} I is not positive definite")))?;
    let quad = yc.dot(&chol.solve(&yc));
    if !(quad > 0.0) || !quad.is_finite() {
        return Err(Error::Numeric("degenerate outcome vector".into()));
    }
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let s2 = quad / m as f64;
    let mf = m as f64;
    Ok(-0.5 * mf * s2.ln() - 0.5 * log_det - 0.5 * mf * (1.0 + (2.0 * std::f64::consts::PI).ln()))
}

fn select_lambda(k: &DMatrix<f64>, idx: &[usize], y: &[f64], grid: &[f64]) -> Option<f64> {
    let sub = DMatrix::from_fn(idx.len(), idx.len(), |a, b| k[(idx[a], idx[b])]);
    let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let mut best: Option<(f64, f64)> = None;
    for &lambda in grid {
        if let Ok(ll) = gp_log_marginal_likelihood(&sub, &ys, lambda) {
            if best.is_none_or(|(_, b)| ll > b) {
                best = Some((lambda, ll));
            }
        }
    }
    best.map(|(l, _)| l)
}

/// Kernel optimal matching weights.
///
/// ATE: minimizes `W'(sum_t I_t (K + lambda_t I) I_t)W - (2/n) 1'K W` with each
/// arm summing to one. ATT: minimizes `W0'(K00 + lambda I)W0 - (2/N1) 1'K10 W0`
/// over control weights summing to one; treated weights are `1/N1`.
pub fn kom_weights(
    x: &DMatrix<f64>,
    t: &[bool],
    y: &[f64],
    estimand: Estimand,
    opts: &KomOptions,
) -> Result<BalanceWeights> {
    let n = t.len();
    if x.nrows() != n {
        return Err(Error::shape(n, x.nrows()));
    }
    if y.len() != n {
        return Err(Error::shape(n, y.len()));
    }
    let (treated, control) = split_groups(t)?;
    let (n1, n0) = (treated.len(), control.len());

    let sigma = match opts.sigma {
        Some(s) => s,
        None => match median_heuristic(x) {
            Ok(s) => s,
            Err(_) => {
                return Ok(BalanceWeights::new(
                    uniform_group_weights(t, n1, n0),
                    vec![true; n],
                    t,
                    estimand,
                    Method::Kom,
                ))
            }
        },
    };
    let k = gram(KernelSpec::gaussian(sigma), x)?.values;

    let mut fell_back = false;
    let mut pick = |idx: &[usize]| match &opts.lambda {
        LambdaChoice::Fixed(l) => *l,
        LambdaChoice::MarginalLikelihood(grid) => select_lambda(&k, idx, y, grid).unwrap_or_else(|| {
            fell_back = true;
            FALLBACK_LAMBDA
        }),
    };
    let lambda0 = pick(&control);
    let lambda1 = match estimand {
        Estimand::Ate => pick(&treated),
        Estimand::Att => lambda0,
    };
    if fell_back {
        warn!("KOM: marginal likelihood failed on every grid value, using lambda = {FALLBACK_LAMBDA}");
    }

    let mut values = uniform_group_weights(t, n1, n0);
    let sol = match estimand {
        Estimand::Ate => {
            let q = DMatrix::from_fn(n, n, |i, j| {
                if t[i] != t[j] {
                    0.0
                } else {
                    let ridge = if i == j { if t[i] { lambda1 } else { lambda0 } } else { 0.0 };
                    2.0 * (k[(i, j)] + ridge)
                }
            });
            let c = DVector::from_fn(n, |i, _| -2.0 * k.row(i).sum() / n as f64);
            let qp = QuadraticProgram::new(
                q,
                c,
                vec![EqualityBlock::new(treated.clone(), 1.0), EqualityBlock::new(control.clone(), 1.0)],
            )?;
            let sol = solve_qp(&qp, opts.solver);
            for i in 0..n {
                values[i] = sol.w[i].max(0.0);
            }
            sol
        }
        Estimand::Att => {
            let q = DMatrix::from_fn(n0, n0, |a, b| {
                2.0 * (k[(control[a], control[b])] + if a == b { lambda0 } else { 0.0 })
            });
            let c = DVector::from_fn(n0, |a, _| {
                -2.0 * treated.iter().map(|&j| k[(j, control[a])]).sum::<f64>() / n1 as f64
            });
            let qp = QuadraticProgram::new(q, c, vec![EqualityBlock::new((0..n0).collect(), 1.0)])?;
            let sol = solve_qp(&qp, opts.solver);
            for (a, &i) in control.iter().enumerate() {
                values[i] = sol.w[a].max(0.0);
            }
            sol
        }
    };

    let mut weights = BalanceWeights::new(values, vec![true; n], t, estimand, Method::Kom);
    weights.diagnostics.solver_status = Some(sol.status);
    weights.diagnostics.kkt_residual = Some(sol.kkt_residual);
    let mut note = format!("sigma={sigma:.6} lambda0={lambda0} lambda1={lambda1}");
    if fell_back {
        note.push_str(" lambda_fallback");
    }
    weights.diagnostics.note = Some(note);
    Ok(weights)
}

/// The KOM objective evaluated by direct summation, for checking solutions.
pub fn kom_objective(
    x: &DMatrix<f64>,
    t: &[bool],
    estimand: Estimand,
    sigma: f64,
    lambda: (f64, f64),
    weights: &[f64],
) -> f64 {
    let kern = KernelSpec::gaussian(sigma);
    let n = t.len();
    let row = |i: usize| -> Vec<f64> { x.row(i).iter().copied().collect() };
    let n1 = t.iter().filter(|&&v| v).count() as f64;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let kij = kern.eval(&row(i), &row(j));
            match estimand {
                Estimand::Ate => {
                    if t[i] == t[j] {
                        total += weights[i] * weights[j] * kij;
                    }
                    total -= 2.0 / n as f64 * kij * weights[j];
                }
                Estimand::Att => {
                    if !t[i] && !t[j] {
                        total += weights[i] * weights[j] * kij;
                    }
                    if t[i] && !t[j] {
                        total -= 2.0 / n1 * kij * weights[j];
                    }
                }
            }
        }
        let ridge = if t[i] { lambda.1 } else { lambda.0 };
        if estimand == Estimand::Ate || !t[i] {
            total += ridge * weights[i] * weights[i];
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(n: usize, shift: f64, seed: u64) -> (DMatrix<f64>, Vec<bool>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let x = DMatrix::from_fn(n, 2, |i, _| rng.random_range(-1.0..1.0) + if t[i] { shift } else { 0.0 });
        let y = (0..n).map(|i| x[(i, 0)] + 0.1 * rng.random_range(-1.0..1.0)).collect();
        (x, t, y)
    }

    #[test]
    fn single_control_gets_full_weight() {
        let (x, _, y) = sample(4, 0.0, 1);
        let t = [true, true, false, true];
        let w = kom_weights(&x, &t, &y, Estimand::Att, &KomOptions::default()).unwrap();
        assert!((w.values[2] - 1.0).abs() < 1e-8);
        for i in [0, 1, 3] {
            assert_eq!(w.values[i], 1.0 / 3.0);
        }
    }

    #[test]
    fn large_ridge_pushes_controls_to_uniform() {
        let (x, t, y) = sample(45, 0.0, 2);
        let n0 = t.iter().filter(|&&v| !v).count() as f64;
        let deviation = |lambda: f64| {
            let opts = KomOptions {
                lambda: LambdaChoice::Fixed(lambda),
                ..Default::default()
            };
            let w = kom_weights(&x, &t, &y, Estimand::Att, &opts).unwrap();
            assert!(!w.solver_failed());
            (0..t.len()).filter(|&i| !t[i]).map(|i| (w.values[i] - 1.0 / n0).abs()).fold(0.0, f64::max)
        };
        let (small, mid, large) = (deviation(0.1), deviation(10.0), deviation(1000.0));
        assert!(mid < small);
        assert!(large < mid);
        assert!(large < 1e-3);
    }

    #[test]
    fn solution_beats_uniform_and_satisfies_constraints() {
        let (x, t, y) = sample(40, 0.5, 3);
        let sigma = median_heuristic(&x).unwrap();
        for estimand in Estimand::ALL {
            let w = kom_weights(&x, &t, &y, estimand, &KomOptions::default()).unwrap();
            assert!(!w.solver_failed());
            assert!((w.group_sum(&t, true) - 1.0).abs() < 1e-6);
            assert!((w.group_sum(&t, false) - 1.0).abs() < 1e-6);
            let note = w.diagnostics.note.clone().unwrap();
            let lam: Vec<f64> = note
                .split_whitespace()
                .filter_map(|kv| kv.strip_prefix("lambda0=").or(kv.strip_prefix("lambda1=")))
                .map(|v| v.parse().unwrap())
                .collect();
            let uniform = uniform_group_weights(&t, 14, 26);
            assert!(
                kom_objective(&x, &t, estimand, sigma, (lam[0], lam[1]), &w.values)
                    <= kom_objective(&x, &t, estimand, sigma, (lam[0], lam[1]), &uniform) + 1e-12
            );
        }
    }

    #[test]
    fn marginal_likelihood_prefers_small_ridge_for_smooth_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::<f64>::from_fn(60, 1, |_, _| rng.random_range(-2.0..2.0));
        let y: Vec<f64> = (0..60).map(|i| x[(i, 0)].sin()).collect();
        let k = gram(KernelSpec::gaussian(1.0), &x).unwrap().values;
        let idx: Vec<usize> = (0..60).collect();
        assert_eq!(select_lambda(&k, &idx, &y, &KOM_LAMBDA_GRID), Some(1e-3));
        // constant outcome: every evaluation degenerates
        assert_eq!(select_lambda(&k, &idx, &[1.0; 60], &KOM_LAMBDA_GRID), None);
    }
}
