use super::{check_same_shape, LossConfig, LossReport};
use crate::error::{Error, Result};
use crate::linalg::{matrix_rank, RankTol};
use crate::matrix::{gaussian_sample, Matrix};
use crate::rng::Rng;

/// D×D cross-correlation between the columns of two views, on raw
/// (uncentered) columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub values: Matrix,
    /// Rows of the batches it was computed from.
    pub batch_size: usize,
}

impl CorrelationMatrix {
    pub fn dim(&self) -> usize {
        self.values.rows()
    }

    pub fn rank(&self) -> Result<usize> {
        matrix_rank(&self.values, RankTol::Auto)
    }
}

struct ColumnUnit {
    unit: Matrix,
    norms: Vec<f64>,
}

fn normalize_columns(z: &Matrix, what: &str) -> Result<ColumnUnit> {
    let (n, d) = z.shape();
    let mut norms = vec![0.0; d];
    for i in 0..n {
        for (acc, v) in norms.iter_mut().zip(z.row(i)) {
            *acc += v * v;
        }
    }
    for (c, s) in norms.iter_mut().enumerate() {
        if *s == 0.0 {
            return Err(Error::Domain(format!("{what}: column {c} is all zeros")));
        }
        *s = s.sqrt();
    }
    let mut unit = z.clone();
    for i in 0..n {
        unit.row_mut(i).iter_mut().zip(&norms).for_each(|(v, s)| *v /= s);
    }
    Ok(ColumnUnit { unit, norms })
}

/// Backpropagate through `â_c = a_c / ‖a_c‖` column by column.
fn normalize_columns_backward(cu: &ColumnUnit, grad_unit: &Matrix) -> Matrix {
    let (n, d) = grad_unit.shape();
    let mut proj = vec![0.0; d];
    for i in 0..n {
        for ((p, g), u) in proj.iter_mut().zip(grad_unit.row(i)).zip(cu.unit.row(i)) {
            *p += g * u;
        }
    }
    Matrix::from_fn(n, d, |i, c| (grad_unit[(i, c)] - proj[c] * cu.unit[(i, c)]) / cu.norms[c])
}

pub fn cross_correlation(z1: &Matrix, z2: &Matrix) -> Result<CorrelationMatrix> {
    check_same_shape("cross-correlation", z1, z2)?;
    let a = normalize_columns(z1, "view 1")?;
    let b = normalize_columns(z2, "view 2")?;
    let mut values = a.unit.t_matmul(&b.unit);
    values.as_mut_slice().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(CorrelationMatrix {
        values,
        batch_size: z1.rows(),
    })
}

/// `Σ_c (1 - C_cc)² + λ_BT Σ_c Σ_{d≠c} C_cd²`, gradients for `(z1, z2)`.
pub fn barlow_twins(z1: &Matrix, z2: &Matrix, cfg: &LossConfig) -> Result<LossReport> {
    check_same_shape("barlow twins", z1, z2)?;
    let a = normalize_columns(z1, "view 1")?;
    let b = normalize_columns(z2, "view 2")?;
    let c = a.unit.t_matmul(&b.unit);
    let d = c.rows();
    let mut value = 0.0;
    let mut g = Matrix::zeros(d, d);
    for r in 0..d {
        for s in 0..d {
            let v = c[(r, s)];
            if r == s {
                value += (1.0 - v).powi(2);
                g[(r, s)] = -2.0 * (1.0 - v);
            } else {
                value += cfg.lambda_bt * v * v;
                g[(r, s)] = 2.0 * cfg.lambda_bt * v;
            }
        }
    }
    // C = Âᵀ B̂  ⇒  dÂ = B̂ Gᵀ, dB̂ = Â G
    let g_a = b.unit.matmul_t(&g);
    let g_b = a.unit.matmul(&g);
    Ok(LossReport {
        value,
        grads: vec![normalize_columns_backward(&a, &g_a), normalize_columns_backward(&b, &g_b)],
        parts: vec![("bt", value)],
    })
}

/// Two batches padded with standard-normal rows. Rows `real_rows..` are
/// artificial and never receive gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedPair {
    pub z1: Matrix,
    pub z2: Matrix,
    pub real_rows: usize,
}

impl PaddedPair {
    pub fn artificial_rows(&self) -> usize {
        self.z1.rows() - self.real_rows
    }

    /// Drop gradient rows that belong to artificial embeddings.
    pub fn real_grad(&self, grad: &Matrix) -> Matrix {
        grad.top_rows(self.real_rows)
    }
}

/// Append `m_rows` i.i.d. standard-normal rows to each batch, independently.
pub fn pad_artificial(z1: &Matrix, z2: &Matrix, m_rows: usize, rng: &mut Rng) -> Result<PaddedPair> {
    check_same_shape("padding", z1, z2)?;
    let d = z1.cols();
    let p1 = gaussian_sample(rng, m_rows, d, 0.0, 1.0)?;
    let p2 = gaussian_sample(rng, m_rows, d, 0.0, 1.0)?;
    Ok(PaddedPair {
        z1: z1.vstack(&p1),
        z2: z2.vstack(&p2),
        real_rows: z1.rows(),
    })
}

/// Barlow Twins on batches padded with `m_rows` artificial rows; gradients
/// are returned for the real rows only.
pub fn barlow_twins_padded(z1: &Matrix, z2: &Matrix, m_rows: usize, rng: &mut Rng, cfg: &LossConfig) -> Result<LossReport> {
    let padded = pad_artificial(z1, z2, m_rows, rng)?;
    let mut report = barlow_twins(&padded.z1, &padded.z2, cfg)?;
    report.grads = report.grads.iter().map(|g| padded.real_grad(g)).collect();
    Ok(report)
}
