//! Energy balancing.
//!
//! The weighted energy distance between two discrete measures `a`, `b` on the
//! sample points is `2 a'Db - a'Da - b'Db` with `D` the Euclidean distance
//! matrix. Written that way the objective is not convex in the weights, so the
//! QP is assembled with the distance-covariance kernel
//! `k(x, y) = |x - m| + |y - m| - |x - y|`, which is positive semidefinite and
//! yields exactly the same energy distance for any pair of probability
//! vectors: `(a - b)' K (a - b)`.

use nalgebra::{DMatrix, DVector};

use super::{split_groups, uniform_group_weights, BalanceWeights, Estimand, Method};
use crate::error::{Error, Result};
use crate::qp::{distance_matrix, euclidean, solve_qp, EqualityBlock, QuadraticProgram, SolverOptions};

/// Energy-balancing weights normalized to sum to one in each arm.
pub fn energy_balance(x: &DMatrix<f64>, t: &[bool], estimand: Estimand) -> Result<BalanceWeights> {
    energy_balance_with(x, t, estimand, SolverOptions::default())
}

pub fn energy_balance_with(
    x: &DMatrix<f64>,
    t: &[bool],
    estimand: Estimand,
    opts: SolverOptions,
) -> Result<BalanceWeights> {
    if x.nrows() != t.len() {
        return Err(Error::shape(t.len(), x.nrows()));
    }
    let (treated, control) = split_groups(t)?;
    let n = t.len();
    let (n1, n0) = (treated.len(), control.len());

    let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).iter().copied().collect()).collect();
    if rows.iter().all(|r| r == &rows[0]) {
        // flat objective: uniform weights
        return Ok(BalanceWeights::new(
            uniform_group_weights(t, n1, n0),
            vec![true; n],
            t,
            estimand,
            Method::Eb,
        ));
    }
    let kernel = distance_kernel(&rows);

    let (qp, layout) = match estimand {
        Estimand::Ate => {
            // variables ordered as in the data; both arms sum to one
            let mut q = DMatrix::<f64>::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    q[(i, j)] = if t[i] == t[j] { 4.0 * kernel[(i, j)] } else { -2.0 * kernel[(i, j)] };
                }
            }
            let c = DVector::from_fn(n, |i, _| -2.0 * kernel.row(i).sum() / n as f64);
            let qp = QuadraticProgram::new(
                q,
                c,
                vec![EqualityBlock::new(treated.clone(), 1.0), EqualityBlock::new(control.clone(), 1.0)],
            )?;
            (qp, (0..n).collect::<Vec<_>>())
        }
        Estimand::Att => {
            let q = DMatrix::from_fn(n0, n0, |a, b| 2.0 * kernel[(control[a], control[b])]);
            let c = DVector::from_fn(n0, |a, _| {
                -2.0 * treated.iter().map(|&j| kernel[(control[a], j)]).sum::<f64>() / n1 as f64
            });
            let qp = QuadraticProgram::new(q, c, vec![EqualityBlock::new((0..n0).collect(), 1.0)])?;
            (qp, control.clone())
        }
    };

    let sol = solve_qp(&qp, opts);
    let mut values = match estimand {
        Estimand::Ate => vec![0.0; n],
        Estimand::Att => uniform_group_weights(t, n1, n0),
    };
    for (k, &i) in layout.iter().enumerate() {
        values[i] = sol.w[k].max(0.0);
    }
    super::normalize_groups(&mut values, t);
    let mut weights = BalanceWeights::new(values, vec![true; n], t, estimand, Method::Eb);
    weights.diagnostics.solver_status = Some(sol.status);
    weights.diagnostics.kkt_residual = Some(sol.kkt_residual);
    if sol.diagonal_shift > 0.0 {
        weights.diagnostics.note = Some(format!("diagonal shift {:e}", sol.diagonal_shift));
    }
    Ok(weights)
}

fn distance_kernel(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let d = rows[0].len();
    let mut center = vec![0.0; d];
    for r in rows {
        for (c, v) in center.iter_mut().zip(r) {
            *c += v / n as f64;
        }
    }
    let norms: Vec<f64> = rows.iter().map(|r| euclidean(r, &center)).collect();
    let mut k = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 2.0 * norms[i];
        for j in 0..i {
            let v = norms[i] + norms[j] - euclidean(&rows[i], &rows[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// The energy-balancing objective evaluated directly from pairwise distances,
/// for weights that sum to one in each arm (ATT ignores treated weights).
pub fn energy_objective(x: &DMatrix<f64>, t: &[bool], estimand: Estimand, weights: &[f64]) -> f64 {
    let d = distance_matrix(x).values;
    let n = t.len();
    let n1 = t.iter().filter(|&&v| v).count();
    let uniform = vec![1.0 / n as f64; n];
    let arm = |treated: bool| -> Vec<f64> {
        (0..n).map(|i| if t[i] == treated { weights[i] } else { 0.0 }).collect()
    };
    let energy = |a: &[f64], b: &[f64]| {
        let mut cross = 0.0;
        let mut aa = 0.0;
        let mut bb = 0.0;
        for i in 0..n {
            for j in 0..n {
                cross += a[i] * b[j] * d[(i, j)];
                aa += a[i] * a[j] * d[(i, j)];
                bb += b[i] * b[j] * d[(i, j)];
            }
        }
        2.0 * cross - aa - bb
    };
    match estimand {
        Estimand::Ate => {
            let (w0, w1) = (arm(false), arm(true));
            energy(&w0, &uniform) + energy(&w1, &uniform) + energy(&w0, &w1)
        }
        Estimand::Att => {
            let target: Vec<f64> = (0..n).map(|i| if t[i] { 1.0 / n1 as f64 } else { 0.0 }).collect();
            energy(&arm(false), &target)
        }
    }
}
