//! Ablation grids: one training run per cell, all cells on the same data and
//! seed.

use crate::config::Dataset;
use crate::error::{Error, Result};
use crate::trainer::{train, NoiseMode, TrainConfig, TrainObjective, TrainReport};
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridAxis {
    M,
    LambdaDcl,
    TauDcl,
    /// Positive/negative views with added or reduced noise.
    Noise,
}

impl GridAxis {
    pub fn name(self) -> &'static str {
        match self {
            GridAxis::M => "m",
            GridAxis::LambdaDcl => "lambda_dcl",
            GridAxis::TauDcl => "tau_dcl",
            GridAxis::Noise => "noise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::M, Self::LambdaDcl, Self::TauDcl, Self::Noise]
            .into_iter()
            .find(|a| a.name() == s)
    }

    pub fn default_values(self) -> Vec<CellValue> {
        let nums = |v: &[f64]| v.iter().map(|&x| CellValue::Number(x)).collect();
        match self {
            GridAxis::M => nums(&[0.5, 0.8, 0.9, 1.0, 1.1, 1.2]),
            GridAxis::LambdaDcl => nums(&[0.02, 0.05, 0.1, 0.2, 0.5, 1.0]),
            GridAxis::TauDcl => nums(&[1.0, 2.0, 5.0, 10.0, 20.0, 50.0]),
            GridAxis::Noise => NoiseCell::ALL.iter().map(|&c| CellValue::Noise(c)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseCell {
    Baseline,
    PosPlus,
    PosMinus,
    NegPlus,
    NegMinus,
}

impl NoiseCell {
    pub const ALL: [NoiseCell; 5] = [
        NoiseCell::Baseline,
        NoiseCell::PosPlus,
        NoiseCell::PosMinus,
        NoiseCell::NegPlus,
        NoiseCell::NegMinus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseCell::Baseline => "baseline",
            NoiseCell::PosPlus => "pos_plus",
            NoiseCell::PosMinus => "pos_minus",
            NoiseCell::NegPlus => "neg_plus",
            NoiseCell::NegMinus => "neg_minus",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CellValue {
    Number(f64),
    Noise(NoiseCell),
}

impl std::fmt::Display for CellValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CellValue::Number(x) => write!(f, "{x}"),
            CellValue::Noise(c) => f.write_str(c.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub axis: GridAxis,
    pub values: Vec<CellValue>,
}

impl AblationGrid {
    pub fn new(axis: GridAxis, values: Vec<CellValue>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config(format!("grid {}: no values", axis.name())));
        }
        for v in &values {
            let ok = matches!(
                (axis, v),
                (GridAxis::Noise, CellValue::Noise(_)) | (GridAxis::M | GridAxis::LambdaDcl | GridAxis::TauDcl, CellValue::Number(_))
            );
            if !ok {
                return Err(Error::Config(format!("grid {}: value {v} does not fit this axis", axis.name())));
            }
        }
        Ok(Self { axis, values })
    }

    pub fn default_for(axis: GridAxis) -> Self {
        Self { axis, values: axis.default_values() }
    }

    /// Parse a comma-separated value list for `axis`.
    pub fn parse_values(axis: GridAxis, text: &str) -> Result<Self> {
        let values = text
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| match axis {
                GridAxis::Noise => NoiseCell::parse(s)
                    .map(CellValue::Noise)
                    .ok_or_else(|| Error::Config(format!("grid noise: unknown cell {s:?}"))),
                _ => s
                    .parse()
                    .map(CellValue::Number)
                    .map_err(|_| Error::Config(format!("grid {}: {s:?} is not a number", axis.name()))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(axis, values)
    }

    /// Training configuration for one cell.
    pub fn cell_config(&self, base: &TrainConfig, value: CellValue) -> TrainConfig {
        let mut cfg = base.clone();
        match (self.axis, value) {
            (GridAxis::Noise, CellValue::Noise(cell)) => {
                // the noise rows are defined on plain InfoNCE
                cfg.objective = TrainObjective::InfoNce;
                cfg.pos_noise = NoiseMode::None;
                cfg.neg_noise = NoiseMode::None;
                let plus = NoiseMode::PlusNoise { variance: 0.1 };
                let minus = NoiseMode::MeanSampled { k: 10 };
                match cell {
                    NoiseCell::Baseline => {}
                    NoiseCell::PosPlus => cfg.pos_noise = plus,
                    NoiseCell::PosMinus => cfg.pos_noise = minus,
                    NoiseCell::NegPlus => cfg.neg_noise = plus,
                    NoiseCell::NegMinus => cfg.neg_noise = minus,
                }
            }
            (axis, CellValue::Number(x)) => {
                let uses = match axis {
                    GridAxis::M => matches!(cfg.objective, TrainObjective::OffInfo | TrainObjective::Combined),
                    GridAxis::LambdaDcl => !matches!(cfg.objective, TrainObjective::InfoNce | TrainObjective::OffInfo),
                    _ => matches!(cfg.objective, TrainObjective::DclOnly | TrainObjective::Combined),
                };
                if !uses {
                    cfg.objective = TrainObjective::Combined;
                    cfg.neg_noise = NoiseMode::None;
                }
                match axis {
                    GridAxis::M => cfg.loss.m = x,
                    GridAxis::LambdaDcl => cfg.loss.lambda_dcl = x,
                    _ => cfg.loss.tau_dcl = x,
                }
            }
            _ => unreachable!("validated in AblationGrid::new"),
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub value: CellValue,
    pub outcome: std::result::Result<TrainReport, String>,
}

pub const GRID_HEADER: &str = "value,best_dev_spearman,best_step,test_spearman,status";

/// Run every cell. Cells may run concurrently; each depends only on its own
/// configuration, so results match a serial run. A failed cell is recorded
/// and the others continue.
pub fn run_grid(base: &TrainConfig, grid: &AblationGrid, data: &Dataset) -> Vec<CellResult> {
    grid.values
        .par_iter()
        .map(|&value| {
            let cfg = grid.cell_config(base, value);
            let outcome = train(&cfg, &data.corpus, &data.dev, &data.test, None)
                .map(|o| o.report)
                .map_err(|e| e.to_string());
            CellResult { value, outcome }
        })
        .collect()
}

fn csv_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

pub fn write_grid_csv(path: &Path, cells: &[CellResult]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut write = || -> std::io::Result<()> {
        writeln!(f, "{GRID_HEADER}")?;
        for c in cells {
            match &c.outcome {
                Ok(r) => writeln!(f, "{},{},{},{},ok", c.value, r.best_dev_spearman, r.best_step, r.test_spearman)?,
                Err(msg) => writeln!(f, "{},,,,{}", c.value, csv_quote(&format!("error: {msg}")))?,
            }
        }
        f.flush()
    };
    write().map_err(|e| Error::io(path, e))
}
