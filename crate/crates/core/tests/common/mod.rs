//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use vibe_core::spectral::AffinityGraph;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix, ascending.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off < 1e-30 * a.norm_squared().max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let vals = order.iter().map(|&i| a[(i, i)]).collect();
    let vecs = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    (vals, vecs)
}

/// Generalized eigenpairs of `(D - W) psi = lambda D psi` through the
/// symmetric form, with D-orthonormal columns.
pub fn dense_generalized(graph: &AffinityGraph) -> (Vec<f64>, DMatrix<f64>) {
    let d = graph.degrees();
    let n = graph.n();
    let sym = DMatrix::from_fn(n, n, |i, j| {
        let l = if i == j { d[i] } else { 0.0 } - graph.weights()[(i, j)];
        l / (d[i] * d[j]).sqrt()
    });
    let (vals, u) = jacobi_eigen(&sym);
    let psi = DMatrix::from_fn(n, n, |i, k| u[(i, k)] / d[i].sqrt());
    (vals, psi)
}

/// Diffusion distance from powers of the random-walk matrix:
/// `sum_k (P^t_ik - P^t_jk)^2 / d_k`.
pub fn random_walk_distance(graph: &AffinityGraph, t: u32, i: usize, j: usize) -> f64 {
    let d = graph.degrees();
    let n = graph.n();
    let p = DMatrix::from_fn(n, n, |r, c| graph.weights()[(r, c)] / d[r]);
    let mut pt = DMatrix::<f64>::identity(n, n);
    for _ in 0..t {
        pt = &pt * &p;
    }
    (0..n).map(|k| (pt[(i, k)] - pt[(j, k)]).powi(2) / d[k]).sum::<f64>().sqrt()
}

/// Every permutation of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for v in 0..used.len() {
            if !used[v] {
                used[v] = true;
                prefix.push(v);
                rec(prefix, used, out);
                prefix.pop();
                used[v] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

pub fn perm_cost(cost: &DMatrix<f64>, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum()
}

/// Exhaustive minimum and the lexicographically first permutation reaching it
/// within `tol`.
pub fn brute_force_assignment(cost: &DMatrix<f64>, tol: f64) -> (Vec<usize>, f64) {
    let perms = permutations(cost.nrows());
    let best = perms.iter().map(|p| perm_cost(cost, p)).fold(f64::INFINITY, f64::min);
    let first = perms.into_iter().find(|p| perm_cost(cost, p) <= best + tol).unwrap();
    (first, best)
}

/// Kendall rank correlation without tie correction.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let prod = (a[i] - a[j]) * (b[i] - b[j]);
            s += if prod > 0.0 { 1.0 } else if prod < 0.0 { -1.0 } else { 0.0 };
        }
    }
    s / (n * (n - 1) / 2) as f64
}

/// Distance from `p` to the nearest row of `x`.
pub fn nearest_distance(x: &DMatrix<f64>, p: &DVector<f64>) -> f64 {
    x.row_iter()
        .map(|r| (r.transpose() - p).norm())
        .fold(f64::INFINITY, f64::min)
}

/// Median over points of the distance to their nearest other point.
pub fn median_spacing(x: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    let mut nn: Vec<f64> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (x.row(i) - x.row(j)).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    nn.sort_by(f64::total_cmp);
    nn[n / 2]
}

/// Column `k` of `a` equals column `k` of `b` up to a global sign.
pub fn column_sign_error(a: &DMatrix<f64>, b: &DMatrix<f64>, k: usize) -> f64 {
    let plus = (a.column(k) - b.column(k)).amax();
    let minus = (a.column(k) + b.column(k)).amax();
    plus.min(minus)
}
