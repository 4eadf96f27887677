//! Lawson–Hanson active-set solver for `min ||A x - b||₂ subject to x ≥ 0`.
//!
//! Sized for the dosing problem (4 species × up to a few dozen feeders), so the
//! inner least-squares solves go through a dense SVD of the passive columns.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct NnlsSolution {
    pub x: DVector<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
}

/// Solve the non-negative least-squares problem. Ties in the entering column are
/// broken by lowest index, so the result is deterministic.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> NnlsSolution {
    let (m, n) = a.shape();
    assert_eq!(m, b.len(), "row count of A must match b");
    let mut x = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];

    let norm_a = a.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let tol = 10.0 * f64::EPSILON * norm_a.max(1.0) * (m.max(n) as f64);
    let max_iter = 3 * n + 10;
    let mut iterations = 0;

    loop {
        let w = a.transpose() * (b - a * &x);
        let entering = (0..n)
            .filter(|&j| !passive[j])
            .fold(None::<(usize, f64)>, |best, j| match best {
                Some((_, bw)) if w[j] <= bw => best,
                _ => Some((j, w[j])),
            });
        let Some((j, wj)) = entering else { break };
        if wj <= tol || iterations >= max_iter {
            break;
        }
        passive[j] = true;

        loop {
            iterations += 1;
            let z = solve_passive(a, b, &passive);
            let blocked: Vec<usize> = (0..n).filter(|&i| passive[i] && z[i] <= tol).collect();
            if blocked.is_empty() {
                x = z;
                break;
            }
            let alpha = blocked
                .iter()
                .map(|&i| x[i] / (x[i] - z[i]))
                .fold(f64::INFINITY, f64::min);
            for i in 0..n {
                if passive[i] {
                    x[i] += alpha * (z[i] - x[i]);
                }
            }
            for i in 0..n {
                if passive[i] && x[i] <= tol {
                    passive[i] = false;
                    x[i] = 0.0;
                }
            }
            if iterations >= max_iter {
                break;
            }
        }
    }

    let residual_norm = (b - a * &x).norm();
    NnlsSolution { x, residual_norm, iterations }
}

/// Minimum-norm least-squares solution restricted to the passive columns.
pub(crate) fn solve_passive(a: &DMatrix<f64>, b: &DVector<f64>, passive: &[bool]) -> DVector<f64> {
    let cols: Vec<usize> = (0..passive.len()).filter(|&i| passive[i]).collect();
    let mut out = DVector::zeros(passive.len());
    if cols.is_empty() {
        return out;
    }
    let sub = a.select_columns(cols.iter());
    let svd = sub.svd(true, true);
    let eps = 1e-13 * svd.singular_values.max();
    let sol = svd.solve(b, eps).expect("svd computed with u and v");
    for (k, &c) in cols.iter().enumerate() {
        out[c] = sol[k];
    }
    out
}
