//! Lawson–Hanson active-set solver for `min ‖Ax − b‖₂ s.t. x ≥ 0`.

use nalgebra::{DMatrix, DVector};

/// Returns the non-negative least-squares solution.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let (m, n) = a.shape();
    assert_eq!(b.len(), m, "rhs length must match row count");
    let mut x = DVector::zeros(n);
    if n == 0 || m == 0 {
        return x;
    }
    let mut passive = vec![false; n];
    let tol = 10.0 * f64::EPSILON * a.abs().row_sum().max() * m.max(n) as f64;
    let max_iterations = 30 * n;
    let mut iterations = 0;

    loop {
        let w = a.tr_mul(&(b - a * &x));
        let candidate = (0..n).filter(|&j| !passive[j]).max_by(|&i, &j| w[i].total_cmp(&w[j])).filter(|&j| w[j] > tol);
        let Some(j) = candidate else { break };
        passive[j] = true;

        loop {
            iterations += 1;
            if iterations > max_iterations {
                return x;
            }
            let s = solve_passive(a, b, &passive);
            let blocking: Vec<usize> = (0..n).filter(|&i| passive[i] && s[i] <= 0.0).collect();
            if blocking.is_empty() {
                x = s;
                break;
            }
            let alpha = blocking.iter().map(|&i| x[i] / (x[i] - s[i])).fold(f64::INFINITY, f64::min);
            x += alpha * (&s - &x);
            for i in 0..n {
                if passive[i] && x[i] <= tol {
                    passive[i] = false;
                    x[i] = 0.0;
                }
            }
        }
    }
    x
}

/// Unconstrained least squares over the passive columns; zero elsewhere.
fn solve_passive(a: &DMatrix<f64>, b: &DVector<f64>, passive: &[bool]) -> DVector<f64> {
    let cols: Vec<usize> = (0..passive.len()).filter(|&j| passive[j]).collect();
    let sub = a.select_columns(&cols);
    let svd = sub.svd(true, true);
    let eps = f64::EPSILON * svd.singular_values.max() * a.nrows().max(cols.len()) as f64;
    let z = svd.solve(b, eps).expect("SVD computed with both U and V");
    let mut s = DVector::zeros(passive.len());
    for (k, &j) in cols.iter().enumerate() {
        s[j] = z[k];
    }
    s
}
