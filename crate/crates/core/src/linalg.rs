//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Smallest accepted squared Cholesky pivot, relative to the largest
/// diagonal entry of the input.
const PIVOT_RTOL: f64 = 1e-14;

/// Solves `a x = b` for symmetric positive-definite `a`. Returns `None` when
/// the factorisation fails or a pivot collapses relative to the diagonal.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let max_diag = a.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if a.nrows() == 0 {
        return Some(DVector::zeros(0));
    }
    if max_diag == 0.0 || !max_diag.is_finite() {
        return None;
    }
    let chol = a.clone().cholesky()?;
    let l = chol.l_dirty();
    let min_pivot = (0..a.nrows())
        .map(|i| l[(i, i)].powi(2))
        .fold(f64::INFINITY, f64::min);
    if !(min_pivot > PIVOT_RTOL * max_diag) {
        return None;
    }
    let x = chol.solve(b);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Eigen-decomposition of a symmetric matrix with eigenpairs sorted by
/// decreasing eigenvalue. Each eigenvector's largest-magnitude entry is made
/// positive so the output is reproducible.
pub fn sym_eigen_desc(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .total_cmp(&eig.eigenvalues[i])
            .then(i.cmp(&j))
    });
    let mut vecs = DMatrix::zeros(n, n);
    let mut vals = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(src).into_owned();
        let pivot = v.iter().copied().fold(
            0.0_f64,
            |best, x| if x.abs() > best.abs() { x } else { best },
        );
        if pivot < 0.0 {
            v.neg_mut();
        }
        vecs.set_column(dst, &v);
        vals.push(eig.eigenvalues[src]);
    }
    (vals, vecs)
}

/// Largest eigenvalue of a symmetric positive semi-definite matrix.
pub fn max_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(a.clone())
        .eigenvalues
        .iter()
        .fold(0.0_f64, |m, v| m.max(*v))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spd_solve_recovers_solution() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let x = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let b = &a * &x;
        let got = spd_solve(&a, &b).unwrap();
        assert!((got - x).norm() < 1e-12);
    }

    #[test]
    fn spd_solve_rejects_singular() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(spd_solve(&a, &DVector::from_vec(vec![1.0, 1.0])).is_none());
        assert!(spd_solve(&DMatrix::zeros(2, 2), &DVector::zeros(2)).is_none());
    }

    #[test]
    fn eigen_sorted_descending() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]);
        let (vals, vecs) = sym_eigen_desc(&a);
        assert_eq!(vals, vec![3.0, 1.0]);
        assert_eq!(vecs[(1, 0)], 1.0);
        assert!((max_eigenvalue(&a) - 3.0).abs() < 1e-14);
    }
}
