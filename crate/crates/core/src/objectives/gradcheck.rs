//! Central-difference audit of the analytic objective gradients.

use super::{barlow_twins, combined, dcl, info_nce, off_info_nce, LossConfig, LossReport};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    InfoNce,
    OffInfoNce,
    BarlowTwins,
    Dcl,
    Combined,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::InfoNce,
        Objective::OffInfoNce,
        Objective::BarlowTwins,
        Objective::Dcl,
        Objective::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::InfoNce => "info_nce",
            Objective::OffInfoNce => "off_info_nce",
            Objective::BarlowTwins => "barlow_twins",
            Objective::Dcl => "dcl",
            Objective::Combined => "combined",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == name)
    }

    /// Number of input batches.
    pub fn arity(self) -> usize {
        match self {
            Objective::OffInfoNce | Objective::Combined => 3,
            _ => 2,
        }
    }

    pub fn evaluate(self, inputs: &[Matrix], cfg: &LossConfig) -> Result<LossReport> {
        if inputs.len() != self.arity() {
            return Err(Error::InvalidArgument(format!(
                "{} takes {} inputs, got {}",
                self.name(),
                self.arity(),
                inputs.len()
            )));
        }
        match self {
            Objective::InfoNce => info_nce(&inputs[0], &inputs[1], cfg),
            Objective::OffInfoNce => off_info_nce(&inputs[0], &inputs[1], &inputs[2], cfg),
            Objective::BarlowTwins => barlow_twins(&inputs[0], &inputs[1], cfg),
            Objective::Dcl => dcl(&inputs[0], &inputs[1], cfg),
            Objective::Combined => combined(&inputs[0], &inputs[1], &inputs[2], cfg),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AuditOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor for the relative error; entries whose gradients are
    /// both smaller than this are compared in absolute terms.
    pub floor: f64,
    /// Test hook: negate the analytic gradient before comparing.
    pub inject_sign_flip: bool,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-3,
            inject_sign_flip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditResult {
    pub objective: Objective,
    pub max_rel_error: f64,
    /// `(input index, row, column)` of the worst entry.
    pub worst: (usize, usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare the analytic gradient of `objective` at `inputs` against central
/// differences on every input entry; returns the worst relative error
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn finite_diff_audit(objective: Objective, inputs: &[Matrix], cfg: &LossConfig, opts: AuditOptions) -> Result<AuditResult> {
    if !(opts.step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {}", opts.step)));
    }
    let report = objective.evaluate(inputs, cfg)?;
    let sign = if opts.inject_sign_flip { -1.0 } else { 1.0 };
    let mut result = AuditResult {
        objective,
        max_rel_error: 0.0,
        worst: (0, 0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for idx in 0..input.as_slice().len() {
            let orig = input.as_slice()[idx];
            probe[k].as_mut_slice()[idx] = orig + opts.step;
            let plus = objective.evaluate(&probe, cfg)?.value;
            probe[k].as_mut_slice()[idx] = orig - opts.step;
            let minus = objective.evaluate(&probe, cfg)?.value;
            probe[k].as_mut_slice()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let analytic = sign * report.grads[k].as_slice()[idx];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.floor);
            if err > result.max_rel_error || !err.is_finite() {
                result.max_rel_error = err;
                result.worst = (k, idx / input.cols(), idx % input.cols());
                result.analytic = analytic;
                result.numeric = numeric;
            }
        }
    }
    Ok(result)
}

/// Standard-normal inputs for `objective` drawn from `seed`.
pub fn random_inputs(objective: Objective, seed: u64, n: usize, d: usize) -> Result<Vec<Matrix>> {
    let index = Objective::ALL.iter().position(|&o| o == objective).unwrap_or(0);
    let mut rng = crate::rng::Rng::new(seed).split(index as u64);
    (0..objective.arity())
        .map(|_| crate::matrix::gaussian_sample(&mut rng, n, d, 0.0, 1.0))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub seed: u64,
    #[serde(flatten)]
    pub result: AuditResult,
}

/// Audit every objective on random `n`×`d` inputs for seeds `0..seeds`.
pub fn audit_suite(seeds: u64, n: usize, d: usize, cfg: &LossConfig, opts: AuditOptions) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for seed in 0..seeds {
        for objective in Objective::ALL {
            let inputs = random_inputs(objective, seed, n, d)?;
            let result = finite_diff_audit(objective, &inputs, cfg, opts)?;
            out.push(SuiteEntry { seed, result });
        }
    }
    Ok(out)
}
