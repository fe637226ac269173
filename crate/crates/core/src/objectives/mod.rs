//! Contrastive and decorrelation objectives with analytic gradients.
//!
//! Every objective returns a [`LossReport`]: the scalar loss and one gradient
//! matrix per input batch, in argument order.

mod contrastive;
mod correlation;
mod dcl;
mod gradcheck;

pub use contrastive::{info_nce, info_nce_split, off_info_nce};
pub use correlation::{barlow_twins, barlow_twins_padded, cross_correlation, pad_artificial, CorrelationMatrix, PaddedPair};
pub use dcl::{dcl, dcl_similarity};
pub use gradcheck::{audit_suite, finite_diff_audit, random_inputs, AuditOptions, AuditResult, Objective, SuiteEntry};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// InfoNCE temperature.
    pub tau: f64,
    /// Weight on the off-dropout negative sum.
    pub m: f64,
    pub tau_dcl: f64,
    /// Weight of the dimension-wise term in the combined objective.
    pub lambda_dcl: f64,
    /// Off-diagonal weight of the redundancy-reduction loss.
    pub lambda_bt: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            m: 0.9,
            tau_dcl: 5.0,
            lambda_dcl: 0.1,
            lambda_bt: 5e-3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Config(msg.to_string())) };
        check(self.tau > 0.0 && self.tau.is_finite(), "loss.tau must be > 0")?;
        check(self.tau_dcl > 0.0 && self.tau_dcl.is_finite(), "loss.tau_dcl must be > 0")?;
        check(self.m >= 0.0 && self.m.is_finite(), "loss.m must be >= 0")?;
        check(self.lambda_dcl >= 0.0 && self.lambda_dcl.is_finite(), "loss.lambda_dcl must be >= 0")?;
        check(self.lambda_bt >= 0.0 && self.lambda_bt.is_finite(), "loss.lambda_bt must be >= 0")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    /// Gradient per input batch, same shapes and order as the inputs.
    pub grads: Vec<Matrix>,
    /// Named constituent values for composite objectives.
    pub parts: Vec<(&'static str, f64)>,
}

impl LossReport {
    pub fn part(&self, name: &str) -> Option<f64> {
        self.parts.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
    }
}

/// Off-dropout InfoNCE plus `lambda_dcl` times DCL on the dropout views.
/// Inputs `(z1, z2, z0)`; gradients in the same order.
pub fn combined(z1: &Matrix, z2: &Matrix, z0: &Matrix, cfg: &LossConfig) -> Result<LossReport> {
    let off = off_info_nce(z1, z2, z0, cfg)?;
    let d = dcl(z1, z2, cfg)?;
    let mut grads = off.grads;
    for (g, dg) in grads.iter_mut().zip(&d.grads) {
        let mut scaled = dg.clone();
        scaled.scale(cfg.lambda_dcl);
        g.add_assign(&scaled);
    }
    Ok(LossReport {
        value: off.value + cfg.lambda_dcl * d.value,
        grads,
        parts: vec![("off_info", off.value), ("dcl", d.value)],
    })
}

pub(crate) fn check_same_shape(name: &str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidArgument(format!(
            "{name}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::InvalidArgument(format!("{name}: empty batch")));
    }
    Ok(())
}
