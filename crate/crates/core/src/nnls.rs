//! Non-negative least squares (Lawson-Hanson active set).
//!
//! Solves `min ||A x - b||_2` subject to `x >= 0` for the small, dense
//! systems produced by the calibration fits.

use nalgebra::{DMatrix, DVector};

const TOL: f64 = 1e-12;

/// `a` is row-major with `rows` rows. Returns the solution and the residual
/// vector `A x - b`.
pub fn nnls(a: &[Vec<f64>], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = a.len();
    let n = a.first().map_or(0, Vec::len);
    assert_eq!(m, b.len(), "row count mismatch");
    let am = DMatrix::from_fn(m, n, |i, j| a[i][j]);
    let bv = DVector::from_column_slice(b);

    let mut x = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];
    let max_outer = 3 * n + 10;

    for _ in 0..max_outer {
        let w = am.transpose() * (&bv - &am * &x);
        let candidate = (0..n)
            .filter(|&j| !passive[j] && w[j] > TOL)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = candidate else { break };
        passive[j] = true;

        loop {
            let z = solve_passive(&am, &bv, &passive);
            if (0..n).all(|k| !passive[k] || z[k] > TOL) {
                x = z;
                break;
            }
            // Step toward z until the first passive variable hits zero.
            let mut alpha = f64::INFINITY;
            for k in 0..n {
                if passive[k] && z[k] <= TOL {
                    let denom = x[k] - z[k];
                    if denom > 0.0 {
                        alpha = alpha.min(x[k] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            x = &x + (&z - &x) * alpha;
            for k in 0..n {
                if passive[k] && x[k] <= TOL {
                    passive[k] = false;
                    x[k] = 0.0;
                }
            }
        }
    }

    let resid = &am * &x - &bv;
    (x.iter().copied().collect(), resid.iter().copied().collect())
}

fn solve_passive(a: &DMatrix<f64>, b: &DVector<f64>, passive: &[bool]) -> DVector<f64> {
    let cols: Vec<usize> = (0..passive.len()).filter(|&j| passive[j]).collect();
    let sub = a.select_columns(&cols);
    let sol = sub
        .svd(true, true)
        .solve(b, 1e-14)
        .expect("svd computed with u and v");
    let mut z = DVector::zeros(passive.len());
    for (k, &j) in cols.iter().enumerate() {
        z[j] = sol[k];
    }
    z
}
