//! Brute-force oracles shared by the integration tests. Nothing here calls
//! into the solver paths it is used to check.

#![allow(dead_code)]

use covbal::balancers::Estimand;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// All vectors of `len` non-negative multiples of `1/m` summing to one.
fn compositions(len: usize, m: usize) -> Vec<Vec<usize>> {
    if len == 1 {
        return vec![vec![m]];
    }
    let mut out = Vec::new();
    for first in 0..=m {
        for mut rest in compositions(len - 1, m - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Minimizes `f` over a product of scaled simplices. Each block is a set of
/// coordinates whose entries are non-negative and sum to the block target;
/// coordinates outside every block stay at zero.
///
/// A full grid with step `1/coarse` is searched first, then the incumbent is
/// refined by pattern search on ever finer lattices down to `1e-7`.
pub fn simplex_grid_min<F>(n: usize, blocks: &[(Vec<usize>, f64)], coarse: usize, f: F) -> (Vec<f64>, f64)
where
    F: Fn(&[f64]) -> f64,
{
    let per_block: Vec<Vec<Vec<usize>>> = blocks.iter().map(|(idx, _)| compositions(idx.len(), coarse)).collect();
    let mut best = vec![0.0; n];
    let mut best_f = f64::INFINITY;
    let mut counter = vec![0usize; blocks.len()];
    let mut w = vec![0.0; n];
    'outer: loop {
        for (b, (idx, target)) in blocks.iter().enumerate() {
            for (k, &i) in idx.iter().enumerate() {
                w[i] = target * per_block[b][counter[b]][k] as f64 / coarse as f64;
            }
        }
        let v = f(&w);
        if v < best_f {
            best_f = v;
            best.copy_from_slice(&w);
        }
        for b in 0..blocks.len() {
            counter[b] += 1;
            if counter[b] < per_block[b].len() {
                continue 'outer;
            }
            counter[b] = 0;
        }
        break;
    }

    // Pattern search over the free coordinates (all but the last of each block).
    let free: Vec<(usize, usize)> = blocks
        .iter()
        .enumerate()
        .flat_map(|(b, (idx, _))| idx[..idx.len() - 1].iter().map(move |&i| (b, i)))
        .collect();
    let radius: i64 = 3;
    let side = (2 * radius + 1) as usize;
    let total = side.pow(free.len() as u32);
    let mut h = 1.0 / coarse as f64 / 4.0;
    while h > 1e-7 {
        loop {
            let mut improved = false;
            let base = best.clone();
            for code in 0..total {
                let mut c = code;
                let mut cand = base.clone();
                for &(_, i) in &free {
                    let off = (c % side) as i64 - radius;
                    c /= side;
                    cand[i] += off as f64 * h;
                }
                let mut ok = true;
                for (idx, target) in blocks {
                    let last = *idx.last().expect("non-empty block");
                    let s: f64 = idx[..idx.len() - 1].iter().map(|&i| cand[i]).sum();
                    cand[last] = target - s;
                    if idx.iter().any(|&i| cand[i] < 0.0) {
                        ok = false;
                    }
                }
                if !ok {
                    continue;
                }
                let v = f(&cand);
                if v < best_f - 1e-15 {
                    best_f = v;
                    best = cand;
                    improved = true;
                }
            }
            if !improved {
                break;
            }
        }
        h /= 5.0;
    }
    (best, best_f)
}

fn rows(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
}

/// Weighted energy distance `2 E|A - B| - E|A - A'| - E|B - B'|` between two
/// weighted samples of the rows of `x`.
fn energy_between(x: &[Vec<f64>], a: &[f64], b: &[f64]) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = euclid(&x[i], &x[j]);
            s += d * (2.0 * a[i] * b[j] - a[i] * a[j] - b[i] * b[j]);
        }
    }
    s
}

/// Energy-balancing loss computed from pairwise distances. ATE: distance of
/// each weighted arm to the pooled sample plus the distance between arms.
/// ATT: distance of the weighted controls to the treated sample.
pub fn energy_reference(x: &DMatrix<f64>, t: &[bool], estimand: Estimand, w: &[f64]) -> f64 {
    let pts = rows(x);
    let n = t.len();
    let arm = |treated: bool| -> Vec<f64> { (0..n).map(|i| if t[i] == treated { w[i] } else { 0.0 }).collect() };
    let n1 = t.iter().filter(|&&v| v).count() as f64;
    match estimand {
        Estimand::Ate => {
            let u = vec![1.0 / n as f64; n];
            let (w0, w1) = (arm(false), arm(true));
            energy_between(&pts, &w0, &u) + energy_between(&pts, &w1, &u) + energy_between(&pts, &w0, &w1)
        }
        Estimand::Att => {
            let target: Vec<f64> = t.iter().map(|&ti| if ti { 1.0 / n1 } else { 0.0 }).collect();
            energy_between(&pts, &arm(false), &target)
        }
    }
}

/// Kernel optimal matching loss with a Gaussian kernel of bandwidth `sigma`
/// and ridge `lambda` on each weighted arm, up to an additive constant.
pub fn kom_reference(x: &DMatrix<f64>, t: &[bool], estimand: Estimand, sigma: f64, lambda: f64, w: &[f64]) -> f64 {
    let pts = rows(x);
    let n = t.len();
    let k = |i: usize, j: usize| {
        let d = euclid(&pts[i], &pts[j]);
        (-d * d / (2.0 * sigma * sigma)).exp()
    };
    let n1 = t.iter().filter(|&&v| v).count() as f64;
    let mut s = 0.0;
    let arms: &[bool] = match estimand {
        Estimand::Ate => &[false, true],
        Estimand::Att => &[false],
    };
    for &arm in arms {
        for i in (0..n).filter(|&i| t[i] == arm) {
            s += lambda * w[i] * w[i];
            for j in (0..n).filter(|&j| t[j] == arm) {
                s += w[i] * w[j] * k(i, j);
            }
            for j in 0..n {
                let target = match estimand {
                    Estimand::Ate => 1.0 / n as f64,
                    Estimand::Att => {
                        if t[j] {
                            1.0 / n1
                        } else {
                            0.0
                        }
                    }
                };
                s -= 2.0 * target * w[i] * k(i, j);
            }
        }
    }
    s
}

/// Small random point cloud in the plane with the given assignment.
pub fn random_points<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0))
}

/// A random convex QP: `Q = A'A + eps I` with one or two equality blocks.
pub fn random_qp_parts<R: Rng>(rng: &mut R, n: usize) -> (DMatrix<f64>, DVector<f64>, Vec<(Vec<usize>, f64)>) {
    let a = DMatrix::from_fn(n + 2, n, |_, _| rng.random_range(-1.0..1.0));
    let mut q = a.transpose() * a;
    for i in 0..n {
        q[(i, i)] += 1e-3;
    }
    let c = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    let blocks = if n >= 4 && rng.random_bool(0.5) {
        let split = rng.random_range(1..n);
        vec![((0..split).collect(), 1.0), ((split..n).collect(), rng.random_range(0.5..2.0))]
    } else {
        vec![((0..n).collect(), 1.0)]
    };
    (q, c, blocks)
}
