use nalgebra::DMatrix;

/// Replaces `m` with `(m + mᵀ) / 2`.
pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Inverse of a symmetric matrix together with its 2-norm condition number.
///
/// Returns `None` when the matrix is not positive definite or the condition
/// number exceeds `cond_cap`. The inverse is symmetrized exactly.
pub(crate) fn spd_inverse(m: &DMatrix<f64>, cond_cap: f64) -> Option<(DMatrix<f64>, f64)> {
    let cond = spd_condition(m)?;
    if !(cond <= cond_cap) {
        return None;
    }
    let mut inv = m.clone().cholesky()?.inverse();
    symmetrize(&mut inv);
    Some((inv, cond))
}

/// Condition number of a symmetric positive-definite matrix, `None` if any
/// eigenvalue is non-positive or not finite.
pub(crate) fn spd_condition(m: &DMatrix<f64>) -> Option<f64> {
    if m.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let eig = m.clone().symmetric_eigenvalues();
    let min = eig.min();
    let max = eig.max();
    if min <= 0.0 {
        return None;
    }
    Some(max / min)
}

/// Flat row-major d×d storage helpers used by the grid-backed fields.
pub(crate) fn matrix_from_flat(d: usize, flat: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, d, flat)
}

pub(crate) fn matrix_to_flat(m: &DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    let mut out = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            out.push(m[(i, j)]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_diagonal() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 0.5]);
        let (inv, cond) = spd_inverse(&m, 1e8).unwrap();
        assert!((inv[(0, 0)] - 0.25).abs() < 1e-15);
        assert!((inv[(1, 1)] - 2.0).abs() < 1e-15);
        assert!((cond - 8.0).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(spd_inverse(&m, 1e8).is_none());
    }

    #[test]
    fn condition_cap_applies() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-9]);
        assert!(spd_inverse(&m, 1e8).is_none());
        assert!(spd_inverse(&m, 1e10).is_some());
    }
}
