use super::{check_same_shape, LossConfig, LossReport};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::stats::{batch_normalize_backward, batch_normalize_columns, lse};

fn check(z1: &Matrix, z2: &Matrix, cfg: &LossConfig) -> Result<()> {
    check_same_shape("dcl", z1, z2)?;
    if z1.rows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "dimension-wise contrast needs N >= 2, got {}",
            z1.rows()
        )));
    }
    if !(cfg.tau_dcl > 0.0) {
        return Err(Error::InvalidArgument("tau_dcl must be > 0".into()));
    }
    Ok(())
}

/// D×D dimension similarities `Σ_i z̃¹_{i,c} z̃²_{i,d} / τ_DCL` on
/// batch-normalized columns.
pub fn dcl_similarity(z1: &Matrix, z2: &Matrix, cfg: &LossConfig) -> Result<Matrix> {
    check(z1, z2, cfg)?;
    let a = batch_normalize_columns(z1)?;
    let b = batch_normalize_columns(z2)?;
    let mut s = a.values.t_matmul(&b.values);
    s.scale(1.0 / cfg.tau_dcl);
    Ok(s)
}

/// Dimension-wise contrastive loss, summed over dimensions:
/// `Σ_c -log( e^{s(c,c)} / Σ_d e^{s(c,d)} )`. Gradients for `(z1, z2)` flow
/// through the batch statistics.
pub fn dcl(z1: &Matrix, z2: &Matrix, cfg: &LossConfig) -> Result<LossReport> {
    check(z1, z2, cfg)?;
    let a = batch_normalize_columns(z1)?;
    let b = batch_normalize_columns(z2)?;
    let inv_tau = 1.0 / cfg.tau_dcl;
    let mut s = a.values.t_matmul(&b.values);
    s.scale(inv_tau);
    let d = s.rows();

    let mut value = 0.0;
    let mut g = Matrix::zeros(d, d);
    for c in 0..d {
        let row = s.row(c);
        let log_den = lse(row);
        value += log_den - row[c];
        for (e, &v) in row.iter().enumerate() {
            g[(c, e)] = (v - log_den).exp() - if e == c { 1.0 } else { 0.0 };
        }
    }
    // S = Z̃1ᵀ Z̃2 / τ  ⇒  dZ̃1 = Z̃2 Gᵀ / τ, dZ̃2 = Z̃1 G / τ
    let mut g1 = b.values.matmul_t(&g);
    g1.scale(inv_tau);
    let mut g2 = a.values.matmul(&g);
    g2.scale(inv_tau);
    Ok(LossReport {
        value,
        grads: vec![batch_normalize_backward(&a, &g1), batch_normalize_backward(&b, &g2)],
        parts: vec![("dcl", value)],
    })
}
