//! Scalar statistics and similarity measures.

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

/// Unscaled cosine similarity.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let (uu, vv) = (dot(u, u), dot(v, v));
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::Domain("cosine of a zero-norm vector".into()));
    }
    // sqrt of the product keeps cos(u, u) exactly 1
    Ok((dot(u, v) / (uu * vv).sqrt()).clamp(-1.0, 1.0))
}

/// `log Σ exp(x)` with max-subtraction.
pub fn log_sum_exp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument("log_sum_exp of an empty list".into()));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("log_sum_exp input not finite".into()));
    }
    Ok(lse(xs))
}

/// Unchecked variant for internal hot loops; `xs` must be non-empty.
/// `-inf` entries contribute nothing.
pub(crate) fn lse(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Column-standardized batch.
#[derive(Debug, Clone)]
pub struct NormalizedBatch {
    pub values: Matrix,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Columns whose entries were all equal; their values are zero and their
    /// std is [`CONSTANT_COLUMN_EPS`].
    pub constant_columns: Vec<usize>,
}

impl NormalizedBatch {
    pub fn has_constant_columns(&self) -> bool {
        !self.constant_columns.is_empty()
    }
}

pub const CONSTANT_COLUMN_EPS: f64 = 1e-12;

/// Standardize each column: `(z - mean) / std` with the unbiased (N-1) std.
pub fn batch_normalize_columns(z: &Matrix) -> Result<NormalizedBatch> {
    let (n, d) = z.shape();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "column normalization needs at least 2 rows, got {n}"
        )));
    }
    let mut values = Matrix::zeros(n, d);
    let mut means = vec![0.0; d];
    let mut stds = vec![0.0; d];
    let mut constant_columns = Vec::new();
    for c in 0..d {
        let first = z[(0, c)];
        if (1..n).all(|i| z[(i, c)] == first) {
            means[c] = first;
            stds[c] = CONSTANT_COLUMN_EPS;
            constant_columns.push(c);
            continue;
        }
        let mean = (0..n).map(|i| z[(i, c)]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (z[(i, c)] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        for i in 0..n {
            values[(i, c)] = (z[(i, c)] - mean) / sd;
        }
        means[c] = mean;
        stds[c] = sd;
    }
    Ok(NormalizedBatch {
        values,
        means,
        stds,
        constant_columns,
    })
}

/// Backpropagate `grad` (w.r.t. normalized values) to the raw batch.
/// Constant columns pass no gradient.
pub(crate) fn batch_normalize_backward(norm: &NormalizedBatch, grad: &Matrix) -> Matrix {
    let (n, d) = grad.shape();
    let mut out = Matrix::zeros(n, d);
    let nm1 = (n - 1) as f64;
    for c in 0..d {
        if norm.constant_columns.binary_search(&c).is_ok() {
            continue;
        }
        let sd = norm.stds[c];
        let g_mean = (0..n).map(|i| grad[(i, c)]).sum::<f64>() / n as f64;
        let g_dot_z = (0..n).map(|i| grad[(i, c)] * norm.values[(i, c)]).sum::<f64>();
        for i in 0..n {
            out[(i, c)] = (grad[(i, c)] - g_mean - norm.values[(i, c)] * g_dot_z / nm1) / sd;
        }
    }
    out
}

/// 1-based ranks, ties receiving the average of the ranks they span.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = avg;
        }
        start = end;
    }
    ranks
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Domain(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::Domain("correlation needs at least 2 points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Domain("correlation of a constant input".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Domain(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Domain("spearman input not finite".into()));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn lse_cases() {
        assert_eq!(log_sum_exp(&[0.0]).unwrap(), 0.0);
        let a = 1.7;
        assert!((log_sum_exp(&[a, a]).unwrap() - (a + 2f64.ln())).abs() < 1e-15);
        let big = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!(log_sum_exp(&[]).is_err());
    }

    #[test]
    fn normalize_two_rows() {
        let z = Matrix::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let nb = batch_normalize_columns(&z).unwrap();
        assert!((nb.values[(0, 0)] + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((nb.values[(1, 0)] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((nb.stds[0] - 2f64.sqrt()).abs() < 1e-12);
        assert!(!nb.has_constant_columns());
    }

    #[test]
    fn normalize_fixed_point() {
        let z = Matrix::from_rows(&[vec![-1.0], vec![0.0], vec![1.0]]).unwrap();
        let nb = batch_normalize_columns(&z).unwrap();
        assert!(nb.values.max_abs_diff(&z) < 1e-12);
    }

    #[test]
    fn normalize_constant_column() {
        let z = Matrix::from_rows(&[vec![0.1, 1.0], vec![0.1, 2.0], vec![0.1, 4.0]]).unwrap();
        let nb = batch_normalize_columns(&z).unwrap();
        assert_eq!(nb.constant_columns, vec![0]);
        assert_eq!(nb.stds[0], CONSTANT_COLUMN_EPS);
        assert!(nb.values.column(0).iter().all(|&v| v == 0.0));
        assert!(batch_normalize_columns(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    }

    /// Brute force: rank by counting, then Pearson from raw sums.
    fn spearman_oracle(xs: &[f64], ys: &[f64]) -> f64 {
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|&x| {
                    let less = v.iter().filter(|&&y| y < x).count() as f64;
                    let equal = v.iter().filter(|&&y| y == x).count() as f64;
                    less + (equal + 1.0) / 2.0
                })
                .collect()
        };
        let (rx, ry) = (rank(xs), rank(ys));
        let n = xs.len() as f64;
        let (sx, sy) = (rx.iter().sum::<f64>(), ry.iter().sum::<f64>());
        let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| a * b).sum();
        let sxx: f64 = rx.iter().map(|a| a * a).sum();
        let syy: f64 = ry.iter().map(|a| a * a).sum();
        (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
    }

    #[test]
    fn spearman_tied_fixture() {
        let xs = [1.0, 2.0, 2.0, 4.0];
        let ys = [1.0, 3.0, 2.0, 4.0];
        // Frozen from spearman_oracle: 4.5 / sqrt(4.5 * 5).
        let expected = 0.948_683_298_050_513_8;
        assert!((spearman_oracle(&xs, &ys) - expected).abs() < 1e-15);
        assert!((spearman(&xs, &ys).unwrap() - expected).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn spearman_matches_oracle(v in prop::collection::vec((0u8..6, 0u8..6), 3..20)) {
            let xs: Vec<f64> = v.iter().map(|p| p.0 as f64).collect();
            let ys: Vec<f64> = v.iter().map(|p| p.1 as f64).collect();
            if let Ok(r) = spearman(&xs, &ys) {
                prop_assert!((r - spearman_oracle(&xs, &ys)).abs() < 1e-10);
            }
        }

        #[test]
        fn spearman_monotone_invariance(v in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..20)) {
            let xs: Vec<f64> = v.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = v.iter().map(|p| p.1).collect();
            let tx: Vec<f64> = xs.iter().map(|x| (x / 10.0).exp() * 3.0 + 1.0).collect();
            let ty: Vec<f64> = ys.iter().map(|y| y * y * y).collect();
            if let Ok(r) = spearman(&xs, &ys) {
                prop_assert!((r - spearman(&tx, &ty).unwrap()).abs() < 1e-12);
            }
        }

        #[test]
        fn lse_bounds(xs in prop::collection::vec(-500.0f64..500.0, 1..30)) {
            let v = log_sum_exp(&xs).unwrap();
            let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= max - 1e-12);
            prop_assert!(v <= max + (xs.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn normalized_columns_have_unit_scale(rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 2..12)) {
            let z = Matrix::from_rows(&rows).unwrap();
            let nb = batch_normalize_columns(&z).unwrap();
            let n = z.rows() as f64;
            for c in 0..3 {
                if nb.constant_columns.contains(&c) { continue; }
                let col = nb.values.column(c);
                prop_assert!((col.iter().sum::<f64>() / n).abs() < 1e-9);
                prop_assert!((col.iter().map(|v| v * v).sum::<f64>() - (n - 1.0)).abs() < 1e-6);
            }
        }
    }
}
