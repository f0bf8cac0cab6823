//! Slow reference implementations used only to check the fast paths.
//!
//! Compiled for unit tests and behind the `oracles` feature for integration
//! suites. Nothing here shares code with the routines it verifies.

use crate::gbm::{BoostedModel, TreeNode};
use crate::lp::{LinearProgram, Relation};

/// Solves a dense linear system by Gaussian elimination with partial pivoting.
/// Returns `None` when the system is (numerically) singular.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-11 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f != 0.0 {
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    Some(x)
}

fn combinations(h: usize, k: usize, f: &mut dyn FnMut(&[usize])) {
    fn rec(start: usize, h: usize, k: usize, cur: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        for i in start..h {
            if h - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, h, k, cur, f);
            cur.pop();
        }
    }
    rec(0, h, k, &mut Vec::with_capacity(k), f);
}

/// Brute-force optimum of a bounded LP by enumerating every vertex: each
/// choice of `n` constraint or bound hyperplanes is solved as a square system
/// and kept if feasible. Returns `None` when no feasible vertex exists.
///
/// Only valid for problems whose feasible region is bounded (and therefore has
/// a vertex whenever it is non-empty).
pub fn lp_vertex_enumeration(lp: &LinearProgram) -> Option<(f64, Vec<f64>)> {
    let n = lp.num_vars();
    let mut planes: Vec<(Vec<f64>, f64)> = lp
        .constraints()
        .iter()
        .map(|c| (c.coeffs.clone(), c.rhs))
        .collect();
    for j in 0..n {
        let (lo, up) = lp.bounds(j);
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        if lo.is_finite() {
            planes.push((e.clone(), lo));
        }
        if let Some(u) = up {
            planes.push((e, u));
        }
    }
    let feasible = |x: &[f64]| -> bool {
        for c in lp.constraints() {
            let lhs: f64 = c.coeffs.iter().zip(x).map(|(a, v)| a * v).sum();
            let tol = 1e-9 * (1.0 + c.rhs.abs());
            let ok = match c.relation {
                Relation::Le => lhs <= c.rhs + tol,
                Relation::Ge => lhs >= c.rhs - tol,
                Relation::Eq => (lhs - c.rhs).abs() <= tol,
            };
            if !ok {
                return false;
            }
        }
        (0..n).all(|j| {
            let (lo, up) = lp.bounds(j);
            x[j] >= lo - 1e-9 * (1.0 + lo.abs()) && up.is_none_or(|u| x[j] <= u + 1e-9 * (1.0 + u.abs()))
        })
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    combinations(planes.len(), n, &mut |idx| {
        let a: Vec<Vec<f64>> = idx.iter().map(|&i| planes[i].0.clone()).collect();
        let b: Vec<f64> = idx.iter().map(|&i| planes[i].1).collect();
        if let Some(x) = solve_dense(a, b) {
            if feasible(&x) {
                let obj: f64 = lp.objective().iter().zip(&x).map(|(c, v)| c * v).sum();
                if best.as_ref().is_none_or(|(o, _)| obj < *o) {
                    best = Some((obj, x));
                }
            }
        }
    });
    best
}

/// `E[tree(x) | x_S]` under the training cover distribution: splits on a
/// feature in `S` follow `x`, other splits average both children by cover.
fn conditional_expectation(node: &TreeNode, x: &[f64], in_s: &dyn Fn(usize) -> bool) -> f64 {
    match node {
        TreeNode::Leaf { weight, .. } => *weight,
        TreeNode::Split {
            feature,
            threshold,
            cover,
            left,
            right,
        } => {
            if in_s(*feature) {
                let next = if x[*feature] < *threshold { left } else { right };
                conditional_expectation(next, x, in_s)
            } else {
                (left.cover() * conditional_expectation(left, x, in_s)
                    + right.cover() * conditional_expectation(right, x, in_s))
                    / cover
            }
        }
    }
}

/// Shapley values of the ensemble margin by enumerating all `2^d` coalitions.
pub fn brute_force_shapley(model: &BoostedModel, x: &[f64]) -> Vec<f64> {
    let d = model.feature_names.len();
    assert!(d <= 16, "enumeration is exponential in the feature count");
    let value = |mask: usize| -> f64 {
        let in_s = |f: usize| mask & (1 << f) != 0;
        model.base_score
            + model.learning_rate
                * model
                    .trees
                    .iter()
                    .map(|t| conditional_expectation(t, x, &in_s))
                    .sum::<f64>()
    };
    let values: Vec<f64> = (0..1usize << d).map(value).collect();
    let fact = |k: usize| (1..=k).map(|v| v as f64).product::<f64>();
    let mut phi = vec![0.0; d];
    for (j, p) in phi.iter_mut().enumerate() {
        for mask in 0..1usize << d {
            if mask & (1 << j) != 0 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let w = fact(s) * fact(d - s - 1) / fact(d);
            *p += w * (values[mask | (1 << j)] - values[mask]);
        }
    }
    phi
}

/// Central finite differences `(f(x + h e_i) − f(x − h e_i)) / 2h`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}
