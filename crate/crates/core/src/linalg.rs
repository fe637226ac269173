//! Numerical rank.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use nalgebra::DMatrix;

/// Singular-value threshold for [`matrix_rank`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankTol {
    /// `max(rows, cols) * f64::EPSILON * largest singular value`.
    Auto,
    Absolute(f64),
}

pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    if !m.is_finite() {
        return Err(Error::Domain("matrix has non-finite entries".into()));
    }
    if m.rows() == 0 || m.cols() == 0 {
        return Ok(Vec::new());
    }
    let dm = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let mut sv: Vec<f64> = dm.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Number of singular values above the tolerance.
pub fn matrix_rank(m: &Matrix, tol: RankTol) -> Result<usize> {
    let sv = singular_values(m)?;
    let Some(&largest) = sv.first() else {
        return Ok(0);
    };
    let threshold = match tol {
        RankTol::Auto => m.rows().max(m.cols()) as f64 * f64::EPSILON * largest,
        RankTol::Absolute(t) => t,
    };
    Ok(sv.iter().filter(|&&s| s > threshold).count())
}
