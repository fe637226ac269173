//! Rank-bottleneck, dropout-variance and embedding-geometry measurements.

use crate::corpus::TokenSequence;
use crate::encoder::{forward, EncoderParams, ForwardMode};
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::objectives::{cross_correlation, pad_artificial};
use crate::rng::Rng;
use crate::stats::lse;
use serde::{Deserialize, Serialize};
use std::borrow::Borrow;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub n: usize,
    pub d: usize,
    pub observed_rank: usize,
    pub bound: usize,
    /// `(artificial rows, rank)` per requested padding.
    pub padded_ranks: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub single_draw_variance: f64,
    pub k: usize,
    pub mean_of_k_variance: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub alignment: f64,
    pub uniformity: f64,
}

/// Rank of the views' cross-correlation, and of padded variants.
pub fn rank_report(z1: &Matrix, z2: &Matrix, pad_list: &[usize], rng: &mut Rng) -> Result<RankReport> {
    let (n, d) = z1.shape();
    let observed_rank = cross_correlation(z1, z2)?.rank()?;
    let mut padded_ranks = Vec::with_capacity(pad_list.len());
    for &m in pad_list {
        let rank = if m == 0 {
            observed_rank
        } else {
            let p = pad_artificial(z1, z2, m, rng)?;
            cross_correlation(&p.z1, &p.z2)?.rank()?
        };
        padded_ranks.push((m, rank));
    }
    Ok(RankReport {
        n,
        d,
        observed_rank,
        bound: n.min(d),
        padded_ranks,
    })
}

/// Mean over coordinates of the unbiased variance across draws.
fn mean_coordinate_variance(draws: &[Matrix]) -> f64 {
    let count = draws.len() as f64;
    let len = draws[0].as_slice().len();
    let mut total = 0.0;
    for idx in 0..len {
        // shifted by the first draw so identical draws give exactly zero
        let origin = draws[0].as_slice()[idx];
        let mean = draws.iter().map(|m| m.as_slice()[idx] - origin).sum::<f64>() / count;
        total += draws
            .iter()
            .map(|m| (m.as_slice()[idx] - origin - mean).powi(2))
            .sum::<f64>()
            / (count - 1.0);
    }
    total / len as f64
}

/// Empirical per-coordinate variance of single dropout forwards versus
/// means of `k` forwards. With `deterministic`, both estimators use the
/// dropout-off forward instead (variance exactly zero).
///
/// Each draw runs on its own sub-stream of `rng`, so the result does not
/// depend on evaluation order.
pub fn variance_report<S: Borrow<TokenSequence>>(
    params: &EncoderParams,
    batch: &[S],
    k: usize,
    draws: usize,
    rng: &Rng,
    deterministic: bool,
) -> Result<VarianceReport> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    if draws < 100 {
        return Err(Error::InvalidArgument(format!("need at least 100 draws, got {draws}")));
    }
    let (single_mode, mean_mode) = if deterministic {
        (ForwardMode::Deterministic, ForwardMode::Deterministic)
    } else {
        (ForwardMode::Dropout, ForwardMode::MeanSampled { k })
    };
    let run = |mode: ForwardMode, stream_base: u64| -> Result<Vec<Matrix>> {
        (0..draws as u64)
            .map(|t| forward(params, batch, mode, &mut rng.split(stream_base + t)).map(|(z, _)| z))
            .collect()
    };
    let single = run(single_mode, 0)?;
    let means = run(mean_mode, draws as u64)?;
    let single_draw_variance = mean_coordinate_variance(&single);
    let mean_of_k_variance = mean_coordinate_variance(&means);
    let ratio = if single_draw_variance > 0.0 {
        mean_of_k_variance / single_draw_variance
    } else {
        0.0
    };
    Ok(VarianceReport {
        single_draw_variance,
        k,
        mean_of_k_variance,
        ratio,
    })
}

fn unit_rows(z: &Matrix, what: &str) -> Result<Matrix> {
    let mut out = z.clone();
    for i in 0..z.rows() {
        let n = dot(z.row(i), z.row(i)).sqrt();
        if n == 0.0 {
            return Err(Error::Domain(format!("{what}: row {i} has zero norm")));
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean squared distance between paired unit-normalized rows.
pub fn alignment(z1: &Matrix, z2: &Matrix) -> Result<f64> {
    if z1.shape() != z2.shape() || z1.rows() == 0 {
        return Err(Error::InvalidArgument(format!(
            "alignment needs equal non-empty shapes, got {:?} and {:?}",
            z1.shape(),
            z2.shape()
        )));
    }
    let a = unit_rows(z1, "alignment view 1")?;
    let b = unit_rows(z2, "alignment view 2")?;
    Ok((0..a.rows()).map(|i| sq_dist(a.row(i), b.row(i))).sum::<f64>() / a.rows() as f64)
}

/// `log mean_{i≠j} exp(-2 ‖ẑ_i - ẑ_j‖²)` on unit-normalized rows.
pub fn uniformity(z: &Matrix) -> Result<f64> {
    let n = z.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("uniformity needs N >= 2, got {n}")));
    }
    let u = unit_rows(z, "uniformity")?;
    let mut exps = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            exps.push(-2.0 * sq_dist(u.row(i), u.row(j)));
        }
    }
    // symmetric pairs: mean over ordered pairs equals mean over unordered ones
    Ok(lse(&exps) - (exps.len() as f64).ln())
}

pub fn geometry_report(z1: &Matrix, z2: &Matrix, all: &Matrix) -> Result<GeometryReport> {
    Ok(GeometryReport {
        alignment: alignment(z1, z2)?,
        uniformity: uniformity(all)?,
    })
}
