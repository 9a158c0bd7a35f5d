//! Dense linear algebra used by the estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// How a regularized system was solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    Cholesky,
    /// Cholesky failed; a pivoted least-squares solve was used instead.
    LeastSquares,
}

/// Solve `(g + lambda I) x = rhs` for symmetric positive semi-definite `g`.
pub fn solve_regularized(
    g: &DMatrix<f64>,
    lambda: f64,
    rhs: &DVector<f64>,
) -> Result<(DVector<f64>, SolveMethod)> {
    let n = g.nrows();
    let mut a = g.clone();
    for i in 0..n {
        a[(i, i)] += lambda;
    }
    if let Some(chol) = a.clone().cholesky() {
        let x = chol.solve(rhs);
        if x.iter().all(|v| v.is_finite()) {
            return Ok((x, SolveMethod::Cholesky));
        }
    }
    let svd = a.svd(true, true);
    let cond = condition_from_singular(&svd.singular_values);
    let eps = f64::EPSILON * n as f64 * svd.singular_values.max();
    let x = svd
        .solve(rhs, eps)
        .map_err(|e| Error::numeric(format!("least-squares solve failed ({e}); condition {cond:.3e}")))?;
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric(format!(
            "regularized system is ill-conditioned (condition {cond:.3e})"
        )));
    }
    Ok((x, SolveMethod::LeastSquares))
}

fn condition_from_singular(s: &DVector<f64>) -> f64 {
    let max = s.max();
    let min = s.min();
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Eigenpairs of a symmetric matrix sorted by descending eigenvalue.
///
/// Each eigenvector's sign is fixed so that its first non-negligible
/// component is positive.
pub fn sorted_symmetric_eigen(m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("eigendecomposition of a non-finite matrix"));
    }
    let n = m.nrows();
    let eig = SymmetricEigen::try_new(m.clone(), f64::EPSILON, 0)
        .ok_or_else(|| Error::numeric("symmetric eigensolver did not converge"))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(src).into_owned();
        if let Some(first) = v.iter().find(|c| c.abs() > 1e-12) {
            if *first < 0.0 {
                v.neg_mut();
            }
        }
        vectors.set_column(dst, &v);
    }
    Ok((values, vectors))
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess, refined by Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Integrate `f` over `[a, b]` with precomputed Gauss-Legendre rule.
pub fn integrate(rule: &(Vec<f64>, Vec<f64>), a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    rule.0
        .iter()
        .zip(&rule.1)
        .map(|(&t, &w)| w * f(mid + half * t))
        .sum::<f64>()
        * half
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        for n in [1usize, 2, 5, 32, 64] {
            let rule = gauss_legendre(n);
            let wsum: f64 = rule.1.iter().sum();
            assert_relative_eq!(wsum, 2.0, epsilon = 1e-13);
            // Exact up to degree 2n - 1.
            let deg = 2 * n - 1;
            let val = integrate(&rule, 0.0, 1.0, |x| x.powi(deg as i32));
            assert_relative_eq!(val, 1.0 / (deg as f64 + 1.0), epsilon = 1e-13);
        }
    }

    #[test]
    fn regularized_solve_residual() {
        let g = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0]);
        let rhs = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let (x, method) = solve_regularized(&g, 0.1, &rhs).unwrap();
        assert_eq!(method, SolveMethod::Cholesky);
        let mut a = g.clone();
        a += DMatrix::identity(3, 3) * 0.1;
        assert!((a * x - rhs).norm() < 1e-12);
    }

    #[test]
    fn indefinite_system_falls_back() {
        let g = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let rhs = DVector::from_vec(vec![1.0, 2.0]);
        let (x, method) = solve_regularized(&g, 0.5, &rhs).unwrap();
        assert_eq!(method, SolveMethod::LeastSquares);
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 1.0, 1.0, 0.5]);
        assert!((a * x - rhs).norm() < 1e-10);
    }

    #[test]
    fn eigen_sorted_and_signed() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]);
        let (vals, vecs) = sorted_symmetric_eigen(&m).unwrap();
        assert_eq!(vals, vec![3.0, 1.0]);
        assert_relative_eq!(vecs[(1, 0)], 1.0);
        assert_relative_eq!(vecs[(0, 1)], 1.0);
    }
}
