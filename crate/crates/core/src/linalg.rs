use nalgebra::{DMatrix, DVector};

use crate::error::{GcaError, Result};

/// Relative tolerance on `|R_jj| / max |R_ii|` below which a column counts as dependent.
const RANK_TOL: f64 = 1e-10;

/// Indices of columns that are (numerically) linear combinations of earlier ones.
pub fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let p = x.ncols();
    if p == 0 {
        return vec![];
    }
    // modified Gram-Schmidt on column-normalized copies so scale doesn't matter
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(p);
    let mut dependent = Vec::new();
    for j in 0..p {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        if norm == 0.0 {
            dependent.push(j);
            continue;
        }
        let mut v = col / norm;
        for q in &basis {
            let c = q.dot(&v);
            v -= q * c;
        }
        let rest = v.norm();
        if rest < 1e-8 {
            dependent.push(j);
        } else {
            basis.push(v / rest);
        }
    }
    dependent
}

pub fn check_full_rank(x: &DMatrix<f64>, names: Option<&[String]>) -> Result<()> {
    let dep = dependent_columns(x);
    if dep.is_empty() {
        return Ok(());
    }
    let label = match names {
        Some(names) => dep
            .iter()
            .map(|&j| names.get(j).cloned().unwrap_or_else(|| format!("column {j}")))
            .collect::<Vec<_>>()
            .join(", "),
        None => dep
            .iter()
            .map(|j| format!("column {j}"))
            .collect::<Vec<_>>()
            .join(", "),
    };
    Err(GcaError::RankDeficient(format!("dependent columns: {label}")))
}

/// Least squares through a Householder QR of `x`.
pub fn qr_solve(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let p = x.ncols();
    if x.nrows() < p {
        return Err(GcaError::RankDeficient(format!(
            "{} rows for {} columns",
            x.nrows(),
            p
        )));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let max_diag = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..p).any(|i| r[(i, i)].abs() <= RANK_TOL * max_diag) || max_diag == 0.0 {
        return Err(GcaError::RankDeficient("QR has a vanishing pivot".into()));
    }
    let qty = qr.q().transpose() * y;
    let upper = r.rows(0, p).into_owned();
    upper
        .solve_upper_triangular(&qty.rows(0, p).into_owned())
        .ok_or_else(|| GcaError::RankDeficient("triangular solve failed".into()))
}

/// Inverse of a symmetric positive-definite matrix plus its log-determinant.
pub fn spd_inverse_logdet(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| GcaError::SingularCovariance("Cholesky factorization failed".into()))?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok((chol.inverse(), logdet))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn detects_dependent_columns() {
        let x = DMatrix::from_row_slice(4, 3, &[1., 1., 2., 1., 2., 3., 1., 3., 4., 1., 4., 5.]);
        assert_eq!(dependent_columns(&x), vec![2]);
        let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let err = check_full_rank(&x, Some(&names)).unwrap_err();
        assert!(err.to_string().contains('c'));
    }

    #[test]
    fn qr_solve_recovers_exact_fit() {
        let x = DMatrix::from_row_slice(3, 2, &[1., 0., 1., 1., 1., 2.]);
        let y = DVector::from_vec(vec![1., 3., 5.]);
        let b = qr_solve(&x, &y).unwrap();
        assert_abs_diff_eq!(b[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b[1], 2.0, epsilon = 1e-12);
    }
}
