//! Convex quadratic programs over products of scaled simplices.
//!
//! Problems have the form
//!
//! ```text
//! minimize    0.5 w'Qw + c'w
//! subject to  w >= 0,  sum_{i in B} w_i = s_B  for each equality block B
//! ```
//!
//! with disjoint blocks. The solver runs over-relaxed ADMM on the splitting
//! `w = z`, where the `w`-step is a proximal quadratic solve against a cached
//! Cholesky factor of `Q + rho I` and the `z`-step projects onto the feasible
//! set (one simplex projection per block). Every few iterations the current
//! support is handed to an active-set polish that solves the equality-
//! constrained KKT system exactly; a polished point whose natural residual is
//! below tolerance ends the run.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EqualityBlock {
    pub indices: Vec<usize>,
    pub target: f64,
}

impl EqualityBlock {
    pub fn new(indices: Vec<usize>, target: f64) -> Self {
        EqualityBlock { indices, target }
    }
}

#[derive(Debug, Clone)]
pub struct QuadraticProgram {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub equalities: Vec<EqualityBlock>,
}

impl QuadraticProgram {
    /// Validates shapes, symmetry and block structure.
    pub fn new(q: DMatrix<f64>, c: DVector<f64>, equalities: Vec<EqualityBlock>) -> Result<Self> {
        let n = c.len();
        if q.shape() != (n, n) {
            return Err(Error::shape(format!("{n}x{n}"), format!("{:?}", q.shape())));
        }
        let scale = q.amax().max(1.0);
        for i in 0..n {
            for j in 0..i {
                if (q[(i, j)] - q[(j, i)]).abs() > 1e-9 * scale {
                    return Err(Error::Domain(format!("Q is not symmetric at ({i}, {j})")));
                }
            }
        }
        let mut seen = vec![false; n];
        for block in &equalities {
            if block.indices.is_empty() {
                return Err(Error::Domain("equality block with no indices".into()));
            }
            for &i in &block.indices {
                if i >= n {
                    return Err(Error::Domain(format!("equality index {i} out of range")));
                }
                if seen[i] {
                    return Err(Error::Domain(format!("index {i} appears in two equality blocks")));
                }
                seen[i] = true;
            }
        }
        Ok(QuadraticProgram { q, c, equalities })
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn objective(&self, w: &DVector<f64>) -> f64 {
        0.5 * w.dot(&(&self.q * w)) + self.c.dot(w)
    }

    pub fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.q * w + &self.c
    }

    fn block_of(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.dim()];
        for (b, block) in self.equalities.iter().enumerate() {
            for &i in &block.indices {
                out[i] = Some(b);
            }
        }
        out
    }

    /// Euclidean projection onto {w >= 0, block sums fixed}.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut w = v.map(|x| x.max(0.0));
        for block in &self.equalities {
            let vals: Vec<f64> = block.indices.iter().map(|&i| v[i]).collect();
            let proj = project_simplex(&vals, block.target);
            for (&i, p) in block.indices.iter().zip(proj) {
                w[i] = p;
            }
        }
        w
    }

    /// Infinity norm of `w - P(w - grad f(w))`; zero exactly at a KKT point.
    pub fn natural_residual(&self, w: &DVector<f64>) -> f64 {
        let g = self.gradient(w);
        (w - self.project(&(w - &g))).amax()
    }

    /// Largest violation of the equality constraints and of nonnegativity.
    pub fn feasibility_violation(&self, w: &DVector<f64>) -> f64 {
        let mut worst = w.iter().map(|&x| (-x).max(0.0)).fold(0.0, f64::max);
        for block in &self.equalities {
            let s: f64 = block.indices.iter().map(|&i| w[i]).sum();
            worst = worst.max((s - block.target).abs());
        }
        worst
    }

    /// Multipliers of the equality blocks that best explain the gradient at `w`
    /// (mean gradient over each block's support, ignoring entries below
    /// `1e-12` of the block target).
    pub fn estimate_multipliers(&self, w: &DVector<f64>) -> Vec<f64> {
        let g = self.gradient(w);
        self.equalities
            .iter()
            .map(|block| {
                let floor = 1e-12 * block.target.max(1.0);
                let support: Vec<f64> = block.indices.iter().filter(|&&i| w[i] > floor).map(|&i| g[i]).collect();
                if support.is_empty() {
                    block.indices.iter().map(|&i| g[i]).fold(f64::INFINITY, f64::min)
                } else {
                    support.iter().sum::<f64>() / support.len() as f64
                }
            })
            .collect()
    }

    /// max_i |w_i * max(0, -(g_i - lambda_{b(i)}))|.
    pub fn complementarity(&self, w: &DVector<f64>, multipliers: &[f64]) -> f64 {
        let g = self.gradient(w);
        let block_of = self.block_of();
        (0..self.dim())
            .map(|i| {
                let lambda = block_of[i].map_or(0.0, |b| multipliers[b]);
                (w[i] * (lambda - g[i]).max(0.0)).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Projection of `v` onto {x >= 0, sum x = target}.
pub fn project_simplex(v: &[f64], target: f64) -> Vec<f64> {
    if target <= 0.0 {
        return vec![0.0; v.len()];
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - target) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub w: DVector<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub status: QpStatus,
    /// Diagonal shift added to make Q positive semidefinite (0 when none was needed).
    pub diagonal_shift: f64,
    /// Objective of the incumbent feasible iterate at each check.
    pub objective_trace: Vec<f64>,
    pub multipliers: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-8,
            max_iter: 50_000,
        }
    }
}

const RELAXATION: f64 = 1.6;
const CHECK_EVERY: usize = 10;
const POLISH_EVERY: usize = 25;
const ADAPT_EVERY: usize = 50;
const MAX_REFACTORS: usize = 25;

/// Solves the program; malformed inputs were already rejected by
/// [`QuadraticProgram::new`], so failures come back as a status.
pub fn solve_qp(qp: &QuadraticProgram, opts: SolverOptions) -> QpSolution {
    let n = qp.dim();
    if qp.equalities.iter().any(|b| !(b.target >= 0.0) || !b.target.is_finite())
        || qp.q.iter().chain(qp.c.iter()).any(|v| !v.is_finite())
    {
        return QpSolution {
            w: DVector::zeros(n),
            objective: f64::NAN,
            kkt_residual: f64::INFINITY,
            iterations: 0,
            status: QpStatus::Infeasible,
            diagonal_shift: 0.0,
            objective_trace: vec![],
            multipliers: vec![f64::NAN; qp.equalities.len()],
        };
    }

    let (qp, shift) = psd_repair(qp);
    let qp = &qp;
    let block_of = qp.block_of();

    // Start from the uniform feasible point.
    let mut z = DVector::<f64>::zeros(n);
    for block in &qp.equalities {
        let v = block.target / block.indices.len() as f64;
        for &i in &block.indices {
            z[i] = v;
        }
    }
    let mut u = DVector::<f64>::zeros(n);
    let mut best_w = z.clone();
    let mut best_obj = qp.objective(&z);
    let mut trace = vec![best_obj];

    let mean_diag = (0..n).map(|i| qp.q[(i, i)].abs()).sum::<f64>() / n.max(1) as f64;
    let mut rho = mean_diag.max(1e-6);
    let mut factor = match factor_shifted(&qp.q, rho) {
        Some(f) => f,
        None => return fail(qp, best_w, best_obj, trace, shift, 0),
    };
    let mut refactors = 0;
    let mut last_support: Option<Vec<bool>> = None;

    for iter in 1..=opts.max_iter {
        let rhs = (&z - &u) * rho - &qp.c;
        let w = factor.solve(&rhs);
        let w_relaxed = &w * RELAXATION + &z * (1.0 - RELAXATION);
        let z_prev = z.clone();
        z = qp.project(&(&w_relaxed + &u));
        u += &w_relaxed - &z;

        if iter % CHECK_EVERY == 0 {
            let obj = qp.objective(&z);
            if obj < best_obj {
                best_obj = obj;
                best_w = z.clone();
            }
            trace.push(best_obj);
            if qp.natural_residual(&z) <= opts.tol {
                return finish(qp, z, iter, trace, shift, opts.tol);
            }
        }

        if iter % POLISH_EVERY == 0 {
            let support: Vec<bool> = z.iter().map(|&v| v > 0.0).collect();
            if last_support.as_ref() != Some(&support) {
                if let Some(polished) = polish(qp, &block_of, &support) {
                    let polished = qp.project(&polished);
                    if qp.natural_residual(&polished) <= opts.tol {
                        let obj = qp.objective(&polished);
                        trace.push(best_obj.min(obj));
                        return finish(qp, polished, iter, trace, shift, opts.tol);
                    }
                }
                last_support = Some(support);
            }
        }

        if iter % ADAPT_EVERY == 0 && refactors < MAX_REFACTORS {
            let prim = (&w - &z).amax() / w.amax().max(z.amax()).max(1e-30);
            let y = &u * rho;
            let dual = ((&z - &z_prev) * rho).amax()
                / y.amax().max((&qp.q * &w).amax()).max(qp.c.amax()).max(1e-30);
            if prim > 0.0 && dual > 0.0 {
                let ratio = (prim / dual).sqrt();
                if !(0.2..=5.0).contains(&ratio) {
                    let new_rho = (rho * ratio).clamp(1e-8, 1e8);
                    if let Some(f) = factor_shifted(&qp.q, new_rho) {
                        u *= rho / new_rho;
                        rho = new_rho;
                        factor = f;
                        refactors += 1;
                    }
                }
            }
        }
    }
    fail(qp, best_w, best_obj, trace, shift, opts.max_iter)
}

fn fail(
    qp: &QuadraticProgram,
    w: DVector<f64>,
    objective: f64,
    trace: Vec<f64>,
    shift: f64,
    iterations: usize,
) -> QpSolution {
    QpSolution {
        kkt_residual: qp.natural_residual(&w),
        multipliers: qp.estimate_multipliers(&w),
        w,
        objective,
        iterations,
        status: QpStatus::MaxIter,
        diagonal_shift: shift,
        objective_trace: trace,
    }
}

fn finish(
    qp: &QuadraticProgram,
    w: DVector<f64>,
    iterations: usize,
    trace: Vec<f64>,
    shift: f64,
    tol: f64,
) -> QpSolution {
    let kkt_residual = qp.natural_residual(&w);
    QpSolution {
        objective: qp.objective(&w),
        multipliers: qp.estimate_multipliers(&w),
        status: if kkt_residual <= tol { QpStatus::Optimal } else { QpStatus::MaxIter },
        kkt_residual,
        w,
        iterations,
        diagonal_shift: shift,
        objective_trace: trace,
    }
}

fn factor_shifted(q: &DMatrix<f64>, rho: f64) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let mut m = q.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += rho;
    }
    m.cholesky()
}

/// Returns Q itself when it is positive semidefinite up to round-off,
/// otherwise Q + shift*I with the smallest shift lifting the spectrum to 0.
fn psd_repair(qp: &QuadraticProgram) -> (QuadraticProgram, f64) {
    let n = qp.dim();
    let jitter = 1e-12 * qp.q.amax().max(1.0);
    if n == 0 || factor_shifted(&qp.q, jitter).is_some() {
        return (qp.clone(), 0.0);
    }
    let min_eig = SymmetricEigen::new(qp.q.clone()).eigenvalues.min();
    if min_eig >= 0.0 {
        return (qp.clone(), 0.0);
    }
    let shift = -min_eig;
    log::debug!("QP matrix indefinite; diagonal shift {shift:e}");
    let mut repaired = qp.clone();
    for i in 0..n {
        repaired.q[(i, i)] += shift;
    }
    (repaired, shift)
}

const POLISH_ROUNDS: usize = 30;

/// Active-set refinement starting from a support guess. Returns a point that
/// is stationary on its support, nonnegative and satisfies the reduced-cost
/// sign conditions, or `None` when the rounds run out.
fn polish(qp: &QuadraticProgram, block_of: &[Option<usize>], support: &[bool]) -> Option<DVector<f64>> {
    let n = qp.dim();
    let mut active: Vec<bool> = support.to_vec();
    let g_at_zero = &qp.c;
    for block in &qp.equalities {
        if block.target > 0.0 && !block.indices.iter().any(|&i| active[i]) {
            let best = block
                .indices
                .iter()
                .copied()
                .min_by(|&a, &b| g_at_zero[a].total_cmp(&g_at_zero[b]))?;
            active[best] = true;
        }
        if block.target == 0.0 {
            for &i in &block.indices {
                active[i] = false;
            }
        }
    }

    for _ in 0..POLISH_ROUNDS {
        let (w, lambda) = solve_on_support(qp, block_of, &active)?;
        let negatives: Vec<usize> = (0..n).filter(|&i| active[i] && w[i] < 0.0).collect();
        if !negatives.is_empty() {
            for &i in &negatives {
                active[i] = false;
            }
            // keep every positive-target block represented
            for block in &qp.equalities {
                if block.target > 0.0 && !block.indices.iter().any(|&i| active[i]) {
                    let keep = block
                        .indices
                        .iter()
                        .copied()
                        .max_by(|&a, &c| w[a].total_cmp(&w[c]))
                        .expect("non-empty block");
                    active[keep] = true;
                }
            }
            continue;
        }
        let g = qp.gradient(&w);
        let scale = g.amax().max(1.0);
        let mut violators = false;
        for i in 0..n {
            if active[i] {
                continue;
            }
            if let Some(b) = block_of[i] {
                if qp.equalities[b].target == 0.0 {
                    continue;
                }
            }
            let reduced = g[i] - block_of[i].map_or(0.0, |b| lambda[b]);
            if reduced < -1e-12 * scale {
                active[i] = true;
                violators = true;
            }
        }
        if !violators {
            return Some(w);
        }
    }
    None
}

/// Solves the equality-constrained QP restricted to the active set:
/// Q_SS w_S + c_S - E_S' lambda = 0, E_S w_S = s.
fn solve_on_support(
    qp: &QuadraticProgram,
    block_of: &[Option<usize>],
    active: &[bool],
) -> Option<(DVector<f64>, Vec<f64>)> {
    let idx: Vec<usize> = (0..qp.dim()).filter(|&i| active[i]).collect();
    let k = idx.len();
    let used_blocks: Vec<usize> = (0..qp.equalities.len())
        .filter(|&b| qp.equalities[b].target > 0.0)
        .collect();
    let m = used_blocks.len();
    let mut block_row = vec![usize::MAX; qp.equalities.len()];
    for (r, &b) in used_blocks.iter().enumerate() {
        block_row[b] = r;
    }
    let dim = k + m;
    let mut kkt = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    for (a, &i) in idx.iter().enumerate() {
        for (b, &j) in idx.iter().enumerate() {
            kkt[(a, b)] = qp.q[(i, j)];
        }
        rhs[a] = -qp.c[i];
        if let Some(blk) = block_of[i] {
            let r = block_row[blk];
            if r != usize::MAX {
                kkt[(a, k + r)] = -1.0;
                kkt[(k + r, a)] = 1.0;
            }
        }
    }
    for (r, &b) in used_blocks.iter().enumerate() {
        rhs[k + r] = qp.equalities[b].target;
    }

    let sol = match kkt.clone().lu().solve(&rhs) {
        Some(s) if s.iter().all(|v| v.is_finite()) => s,
        _ => regularized_solve(&kkt, &rhs, k)?,
    };
    let mut w = DVector::<f64>::zeros(qp.dim());
    for (a, &i) in idx.iter().enumerate() {
        w[i] = sol[a];
    }
    let mut lambda = vec![0.0; qp.equalities.len()];
    for (r, &b) in used_blocks.iter().enumerate() {
        lambda[b] = sol[k + r];
    }
    Some((w, lambda))
}

/// Quasi-definite regularization with iterative refinement against the
/// original system, for supports on which Q is singular.
fn regularized_solve(kkt: &DMatrix<f64>, rhs: &DVector<f64>, k: usize) -> Option<DVector<f64>> {
    let delta = 1e-10 * kkt.amax().max(1.0);
    let mut reg = kkt.clone();
    for i in 0..reg.nrows() {
        reg[(i, i)] += if i < k { delta } else { -delta };
    }
    let lu = reg.lu();
    let mut x = lu.solve(rhs)?;
    for _ in 0..10 {
        let r = rhs - kkt * &x;
        x += lu.solve(&r)?;
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psd(n: usize, rank: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, rank, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose()
    }

    #[test]
    fn simplex_projection_basics() {
        assert_eq!(project_simplex(&[0.2, 0.3, 0.5], 1.0), vec![0.2, 0.3, 0.5]);
        let p = project_simplex(&[2.0, 0.0], 1.0);
        assert_eq!(p, vec![1.0, 0.0]);
        let p = project_simplex(&[1.0, 1.0, 1.0], 3.0);
        assert_eq!(p, vec![1.0, 1.0, 1.0]);
        let p = project_simplex(&[-5.0, -5.0], 2.0);
        assert_eq!(p, vec![1.0, 1.0]);
    }

    #[test]
    fn already_feasible_target_is_returned() {
        let u = DVector::from_vec(vec![0.2, 0.3, 0.5]);
        let qp = QuadraticProgram::new(
            DMatrix::identity(3, 3),
            -u.clone(),
            vec![EqualityBlock::new(vec![0, 1, 2], 1.0)],
        )
        .unwrap();
        let sol = solve_qp(&qp, SolverOptions::default());
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.w - u).amax() < 1e-9);
    }

    #[test]
    fn symmetric_problem_gives_uniform_weights() {
        let qp = QuadraticProgram::new(
            DMatrix::identity(4, 4),
            DVector::zeros(4),
            vec![EqualityBlock::new(vec![0, 1, 2, 3], 1.0)],
        )
        .unwrap();
        let sol = solve_qp(&qp, SolverOptions::default());
        assert_eq!(sol.status, QpStatus::Optimal);
        for v in sol.w.iter() {
            assert!((v - 0.25).abs() < 1e-10);
        }
    }

    #[test]
    fn negative_target_is_infeasible_and_bad_blocks_rejected() {
        let qp = QuadraticProgram::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            vec![EqualityBlock::new(vec![0, 1], -1.0)],
        )
        .unwrap();
        assert_eq!(solve_qp(&qp, SolverOptions::default()).status, QpStatus::Infeasible);
        assert!(QuadraticProgram::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            vec![EqualityBlock::new(vec![0], 1.0), EqualityBlock::new(vec![0, 1], 1.0)],
        )
        .is_err());
        assert!(QuadraticProgram::new(DMatrix::identity(2, 2), DVector::zeros(2), vec![EqualityBlock::new(vec![], 1.0)]).is_err());
        let mut asym = DMatrix::identity(2, 2);
        asym[(0, 1)] = 0.5;
        assert!(QuadraticProgram::new(asym, DVector::zeros(2), vec![]).is_err());
    }

    #[test]
    fn matches_grid_search_on_three_variables() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let q = random_psd(3, 3, &mut rng);
            let c = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let qp = QuadraticProgram::new(q, c, vec![EqualityBlock::new(vec![0, 1, 2], 1.0)]).unwrap();
            let sol = solve_qp(&qp, SolverOptions::default());
            assert_eq!(sol.status, QpStatus::Optimal);
            // brute force over the simplex at resolution 1e-3
            let steps = 1000;
            let mut best = (f64::INFINITY, DVector::zeros(3));
            for a in 0..=steps {
                for b in 0..=(steps - a) {
                    let w = DVector::from_vec(vec![
                        a as f64 / steps as f64,
                        b as f64 / steps as f64,
                        (steps - a - b) as f64 / steps as f64,
                    ]);
                    let f = qp.objective(&w);
                    if f < best.0 {
                        best = (f, w);
                    }
                }
            }
            assert!(sol.objective <= best.0 + 1e-12);
            assert!((&sol.w - &best.1).amax() < 1e-3 + 1e-9, "{} vs {}", sol.w, best.1);
        }
    }

    #[test]
    fn indefinite_matrix_is_shifted() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        let qp = QuadraticProgram::new(q, DVector::zeros(2), vec![EqualityBlock::new(vec![0, 1], 1.0)]).unwrap();
        let sol = solve_qp(&qp, SolverOptions::default());
        assert!((sol.diagonal_shift - 0.5).abs() < 1e-12);
        assert_eq!(sol.status, QpStatus::Optimal);
    }

    #[test]
    fn free_variables_and_multiple_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_psd(7, 7, &mut rng);
        let c = DVector::from_fn(7, |_, _| rng.random_range(-2.0..2.0));
        let qp = QuadraticProgram::new(
            q,
            c,
            vec![EqualityBlock::new(vec![0, 2, 4], 1.0), EqualityBlock::new(vec![1, 3], 2.0)],
        )
        .unwrap();
        let sol = solve_qp(&qp, SolverOptions::default());
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(qp.feasibility_violation(&sol.w) < 1e-12);
        assert!(sol.kkt_residual <= 1e-8);
        let comp = qp.complementarity(&sol.w, &sol.multipliers);
        assert!(comp <= 1e-8, "complementarity {comp:e} w={} g={} mult={:?}", sol.w, qp.gradient(&sol.w), sol.multipliers);
    }

    #[test]
    fn incumbent_trace_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = random_psd(40, 5, &mut rng);
        let c = DVector::from_fn(40, |_, _| rng.random_range(-1.0..1.0));
        let qp = QuadraticProgram::new(q, c, vec![EqualityBlock::new((0..40).collect(), 1.0)]).unwrap();
        let sol = solve_qp(&qp, SolverOptions::default());
        for pair in sol.objective_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
    }
}
