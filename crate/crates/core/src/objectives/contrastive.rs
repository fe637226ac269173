use super::{check_same_shape, LossConfig, LossReport};
use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};
use crate::stats::lse;

/// Unit-normalized rows plus the original norms.
pub(crate) fn normalize_rows(z: &Matrix, what: &str) -> Result<(Matrix, Vec<f64>)> {
    let mut out = z.clone();
    let mut norms = Vec::with_capacity(z.rows());
    for i in 0..z.rows() {
        let n = norm(z.row(i));
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Domain(format!("{what}: row {i} has zero norm")));
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Backpropagate through `a = z / ‖z‖` row by row.
pub(crate) fn normalize_rows_backward(unit: &Matrix, norms: &[f64], grad_unit: &Matrix) -> Matrix {
    let mut out = grad_unit.clone();
    for (i, &norm) in norms.iter().enumerate().take(unit.rows()) {
        let a = unit.row(i);
        let proj = dot(grad_unit.row(i), a);
        out.row_mut(i)
            .iter_mut()
            .zip(a)
            .for_each(|(g, &ai)| *g = (*g - proj * ai) / norm);
    }
    out
}

/// Generalized InfoNCE where positives and negatives come from separate
/// view tensors:
///
/// `mean_i -log( e^{s(p1_i,p2_i)} / (e^{s(p1_i,p2_i)} + m Σ_{j≠i} e^{s(n1_i,n2_j)}) )`
///
/// with `s = cos/τ`. Returns gradients for `[p1, p2, n1, n2]`.
pub(crate) fn split_contrastive(
    pos1: &Matrix,
    pos2: &Matrix,
    neg1: &Matrix,
    neg2: &Matrix,
    m: f64,
    tau: f64,
) -> Result<(f64, [Matrix; 4])> {
    check_same_shape("positive views", pos1, pos2)?;
    check_same_shape("negative views", neg1, neg2)?;
    check_same_shape("positive/negative views", pos1, neg1)?;
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    if !(m >= 0.0) {
        return Err(Error::InvalidArgument(format!("m must be >= 0, got {m}")));
    }
    let n = pos1.rows();
    let (a1, n_a1) = normalize_rows(pos1, "positive view 1")?;
    let (a2, n_a2) = normalize_rows(pos2, "positive view 2")?;
    let (b1, n_b1) = normalize_rows(neg1, "negative view 1")?;
    let (b2, n_b2) = normalize_rows(neg2, "negative view 2")?;

    let neg_sim = if m > 0.0 && n > 1 { Some(b1.matmul_t(&b2)) } else { None };
    let log_m = m.ln();
    let inv_n = 1.0 / n as f64;

    let mut g_a1 = Matrix::zeros(a1.rows(), a1.cols());
    let mut g_a2 = g_a1.clone();
    let mut g_b1 = g_a1.clone();
    let mut g_b2 = g_a1.clone();
    let mut total = 0.0;
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let pos = dot(a1.row(i), a2.row(i)) / tau;
        terms.clear();
        terms.push(pos);
        if let Some(sim) = &neg_sim {
            terms.extend((0..n).filter(|&j| j != i).map(|j| log_m + sim[(i, j)] / tau));
        }
        let log_den = lse(&terms);
        total += log_den - pos;

        // d loss_i / d pos = softmax weight of the positive minus one.
        let d_pos = ((pos - log_den).exp() - 1.0) * inv_n / tau;
        if d_pos != 0.0 {
            g_a1.row_mut(i).iter_mut().zip(a2.row(i)).for_each(|(g, v)| *g += d_pos * v);
            g_a2.row_mut(i).iter_mut().zip(a1.row(i)).for_each(|(g, v)| *g += d_pos * v);
        }
        if let Some(sim) = &neg_sim {
            for j in (0..n).filter(|&j| j != i) {
                let w = (log_m + sim[(i, j)] / tau - log_den).exp() * inv_n / tau;
                g_b1.row_mut(i).iter_mut().zip(b2.row(j)).for_each(|(g, v)| *g += w * v);
                g_b2.row_mut(j).iter_mut().zip(b1.row(i)).for_each(|(g, v)| *g += w * v);
            }
        }
    }
    Ok((
        total * inv_n,
        [
            normalize_rows_backward(&a1, &n_a1, &g_a1),
            normalize_rows_backward(&a2, &n_a2, &g_a2),
            normalize_rows_backward(&b1, &n_b1, &g_b1),
            normalize_rows_backward(&b2, &n_b2, &g_b2),
        ],
    ))
}

/// Standard in-batch InfoNCE on two dropout views, averaged over rows.
pub fn info_nce(z1: &Matrix, z2: &Matrix, cfg: &LossConfig) -> Result<LossReport> {
    let (value, [g1, g2, h1, h2]) = split_contrastive(z1, z2, z1, z2, 1.0, cfg.tau)?;
    let mut grad1 = g1;
    grad1.add_assign(&h1);
    let mut grad2 = g2;
    grad2.add_assign(&h2);
    Ok(LossReport {
        value,
        grads: vec![grad1, grad2],
        parts: vec![("info", value)],
    })
}

/// InfoNCE with separate tensors for the positive and negative roles
/// (noise-manipulation experiments). Inputs `(p1, p2, n1, n2)`.
pub fn info_nce_split(p1: &Matrix, p2: &Matrix, n1: &Matrix, n2: &Matrix, cfg: &LossConfig) -> Result<LossReport> {
    let (value, grads) = split_contrastive(p1, p2, n1, n2, 1.0, cfg.tau)?;
    Ok(LossReport {
        value,
        grads: grads.into(),
        parts: vec![("info", value)],
    })
}

/// InfoNCE whose negatives are deterministic (dropout-off) embeddings `z0`,
/// weighted by `cfg.m`. Inputs `(z1, z2, z0)`.
pub fn off_info_nce(z1: &Matrix, z2: &Matrix, z0: &Matrix, cfg: &LossConfig) -> Result<LossReport> {
    check_same_shape("off-dropout views", z1, z0)?;
    let (value, [g1, g2, h1, h2]) = split_contrastive(z1, z2, z0, z0, cfg.m, cfg.tau)?;
    let mut g0 = h1;
    g0.add_assign(&h2);
    Ok(LossReport {
        value,
        grads: vec![g1, g2, g0],
        parts: vec![("off_info", value)],
    })
}
