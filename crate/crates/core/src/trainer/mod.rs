//! Optimization loop with periodic dev evaluation and best-checkpoint
//! retention.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, TensorMeta, MAGIC};

use crate::corpus::{epoch_batches, StsPair, TokenSequence};
use crate::diagnostics::{alignment, uniformity};
use crate::encoder::{backward, embed, forward, init_params, perturb, EncoderConfig, EncoderParams, ForwardCache, ForwardMode};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::objectives::{barlow_twins_padded, dcl, info_nce_split, off_info_nce, LossConfig};
use crate::rng::Rng;
use crate::stats::{cosine_similarity, spearman};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainObjective {
    /// In-batch InfoNCE on two dropout views.
    InfoNce,
    /// InfoNCE with dropout-off negatives weighted by `m`.
    OffInfo,
    /// InfoNCE plus `lambda_dcl` × DCL.
    DclOnly,
    /// InfoNCE plus `lambda_dcl` × Barlow Twins (optionally padded).
    Bt,
    /// Off-dropout InfoNCE plus `lambda_dcl` × DCL.
    Combined,
}

impl TrainObjective {
    pub fn name(self) -> &'static str {
        match self {
            TrainObjective::InfoNce => "info_nce",
            TrainObjective::OffInfo => "off_info",
            TrainObjective::DclOnly => "dcl_only",
            TrainObjective::Bt => "bt",
            TrainObjective::Combined => "combined",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::InfoNce, Self::OffInfo, Self::DclOnly, Self::Bt, Self::Combined]
            .into_iter()
            .find(|o| o.name() == s)
    }

    fn uses_off_dropout(self) -> bool {
        matches!(self, TrainObjective::OffInfo | TrainObjective::Combined)
    }
}

/// How the views of one contrastive role are produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NoiseMode {
    /// The plain dropout views.
    None,
    /// Dropout views plus Gaussian noise.
    PlusNoise { variance: f64 },
    /// Fresh mean-of-K dropout forwards.
    MeanSampled { k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: TrainObjective,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub eval_interval: usize,
    pub seed: u64,
    pub eval_pre_mlp: bool,
    pub pos_noise: NoiseMode,
    pub neg_noise: NoiseMode,
    /// Artificial rows added to each batch for the `bt` objective.
    pub bt_pad_rows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: TrainObjective::InfoNce,
            loss: LossConfig::default(),
            encoder: EncoderConfig::default(),
            lr: 3e-5,
            batch_size: 64,
            epochs: 1,
            eval_interval: 125,
            seed: 42,
            eval_pre_mlp: true,
            pos_noise: NoiseMode::None,
            neg_noise: NoiseMode::None,
            bt_pad_rows: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.encoder.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be >= 0, got {}", self.lr)));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("train.eval_interval must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be >= 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        for (role, mode) in [("noise.pos", self.pos_noise), ("noise.neg", self.neg_noise)] {
            match mode {
                NoiseMode::PlusNoise { variance } if !(variance >= 0.0) => {
                    return Err(Error::Config(format!("{role} variance must be >= 0")))
                }
                NoiseMode::MeanSampled { k: 0 } => return Err(Error::Config(format!("{role} K must be >= 1"))),
                _ => {}
            }
        }
        if self.objective.uses_off_dropout() && self.neg_noise != NoiseMode::None {
            return Err(Error::Config(format!(
                "noise.neg cannot be set with objective {}: its negatives are dropout-off embeddings",
                self.objective.name()
            )));
        }
        Ok(())
    }
}

/// One evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    /// Mean training loss since the previous evaluation.
    pub loss: f64,
    /// Mean contrastive (InfoNCE or off-dropout InfoNCE) component.
    pub loss_info: f64,
    /// Mean auxiliary (DCL or Barlow Twins) component, unweighted.
    pub loss_dcl: f64,
    pub dev_spearman: f64,
    pub alignment: f64,
    pub uniformity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub objective: TrainObjective,
    pub seed: u64,
    pub steps: u64,
    pub history: Vec<EvalRecord>,
    pub best_step: u64,
    pub best_dev_spearman: f64,
    /// Test Spearman of the best-dev parameters.
    pub test_spearman: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub best_params: EncoderParams,
}

pub const METRICS_HEADER: &str = "step,loss,loss_info,loss_dcl,dev_spearman,alignment,uniformity";

pub fn write_metrics_csv(path: &Path, history: &[EvalRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut write = || -> std::io::Result<()> {
        writeln!(f, "{METRICS_HEADER}")?;
        for r in history {
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                r.step, r.loss, r.loss_info, r.loss_dcl, r.dev_spearman, r.alignment, r.uniformity
            )?;
        }
        f.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Spearman correlation between cosine similarities of deterministic
/// embeddings and gold scores.
pub fn evaluate(params: &EncoderParams, pairs: &[StsPair], eval_pre_mlp: bool) -> Result<f64> {
    let cosines = pair_cosines(params, pairs, eval_pre_mlp)?;
    let gold: Vec<f64> = pairs.iter().map(|p| p.gold).collect();
    spearman(&cosines, &gold)
}

fn pair_embeddings(params: &EncoderParams, pairs: &[StsPair], pre_mlp: bool) -> Result<(Matrix, Matrix)> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one pair".into()));
    }
    let left: Vec<&TokenSequence> = pairs.iter().map(|p| &p.left).collect();
    let right: Vec<&TokenSequence> = pairs.iter().map(|p| &p.right).collect();
    Ok((embed(params, &left, pre_mlp)?, embed(params, &right, pre_mlp)?))
}

pub fn pair_cosines(params: &EncoderParams, pairs: &[StsPair], eval_pre_mlp: bool) -> Result<Vec<f64>> {
    let (l, r) = pair_embeddings(params, pairs, eval_pre_mlp)?;
    (0..l.rows()).map(|i| cosine_similarity(l.row(i), r.row(i))).collect()
}

/// Gold threshold for pairs treated as positives in the alignment metric.
pub const ALIGNMENT_GOLD_THRESHOLD: f64 = 4.0;

/// Alignment over high-gold dev pairs and uniformity over every dev sentence.
fn dev_geometry(params: &EncoderParams, pairs: &[StsPair], pre_mlp: bool) -> Result<(f64, f64)> {
    let (l, r) = pair_embeddings(params, pairs, pre_mlp)?;
    let positive: Vec<usize> = (0..pairs.len())
        .filter(|&i| pairs[i].gold >= ALIGNMENT_GOLD_THRESHOLD)
        .collect();
    let idx: Vec<usize> = if positive.is_empty() { (0..pairs.len()).collect() } else { positive };
    let pick = |m: &Matrix| Matrix::from_fn(idx.len(), m.cols(), |i, c| m[(idx[i], c)]);
    let align = alignment(&pick(&l), &pick(&r))?;
    let uni = uniformity(&l.vstack(&r))?;
    Ok((align, uni))
}

/// A forward pass whose output feeds one or more loss inputs.
struct View {
    cache: ForwardCache,
    grad: Matrix,
}

struct ViewSet {
    views: Vec<View>,
}

impl ViewSet {
    fn new() -> Self {
        Self { views: Vec::new() }
    }

    fn run(&mut self, params: &EncoderParams, batch: &[&TokenSequence], mode: ForwardMode, rng: &mut Rng) -> Result<(usize, Matrix)> {
        let (z, cache) = forward(params, batch, mode, rng)?;
        if !z.is_finite() {
            return Err(Error::Numeric("encoder output is not finite".into()));
        }
        self.views.push(View {
            grad: Matrix::zeros(z.rows(), z.cols()),
            cache,
        });
        Ok((self.views.len() - 1, z))
    }

    fn add_grad(&mut self, view: usize, g: &Matrix, weight: f64) {
        if weight == 1.0 {
            self.views[view].grad.add_assign(g);
        } else {
            self.views[view].grad.add_assign(&g.scaled(weight));
        }
    }

    fn backward(&self, params: &EncoderParams) -> Result<crate::encoder::ParamGrads> {
        let mut total = params.zero_grads();
        for v in &self.views {
            total.accumulate(&backward(params, &v.cache, &v.grad)?);
        }
        Ok(total)
    }
}

/// Views for one contrastive role (positive or negative pair tensors).
fn role_views(
    mode: NoiseMode,
    base: [(usize, &Matrix); 2],
    set: &mut ViewSet,
    params: &EncoderParams,
    batch: &[&TokenSequence],
    rng: &mut Rng,
) -> Result<[(usize, Matrix); 2]> {
    Ok(match mode {
        NoiseMode::None => [(base[0].0, base[0].1.clone()), (base[1].0, base[1].1.clone())],
        NoiseMode::PlusNoise { variance } => [
            (base[0].0, perturb(base[0].1, rng, variance)?),
            (base[1].0, perturb(base[1].1, rng, variance)?),
        ],
        NoiseMode::MeanSampled { k } => [
            set.run(params, batch, ForwardMode::MeanSampled { k }, rng)?,
            set.run(params, batch, ForwardMode::MeanSampled { k }, rng)?,
        ],
    })
}

struct StepLoss {
    total: f64,
    info: f64,
    aux: f64,
}

/// Loss and parameter gradients for one batch.
fn step_gradients(
    cfg: &TrainConfig,
    params: &EncoderParams,
    batch: &[&TokenSequence],
    rng: &mut Rng,
) -> Result<(StepLoss, crate::encoder::ParamGrads)> {
    let mut set = ViewSet::new();
    let (i1, z1) = set.run(params, batch, ForwardMode::Dropout, rng)?;
    let (i2, z2) = set.run(params, batch, ForwardMode::Dropout, rng)?;
    let [(p1, pz1), (p2, pz2)] = role_views(cfg.pos_noise, [(i1, &z1), (i2, &z2)], &mut set, params, batch, rng)?;
    let lc = &cfg.loss;

    let info = if cfg.objective.uses_off_dropout() {
        let (i0, z0) = set.run(params, batch, ForwardMode::Deterministic, rng)?;
        let r = off_info_nce(&pz1, &pz2, &z0, lc)?;
        set.add_grad(p1, &r.grads[0], 1.0);
        set.add_grad(p2, &r.grads[1], 1.0);
        set.add_grad(i0, &r.grads[2], 1.0);
        r.value
    } else {
        let [(n1, nz1), (n2, nz2)] = role_views(cfg.neg_noise, [(i1, &z1), (i2, &z2)], &mut set, params, batch, rng)?;
        let r = info_nce_split(&pz1, &pz2, &nz1, &nz2, lc)?;
        for (view, g) in [p1, p2, n1, n2].into_iter().zip(&r.grads) {
            set.add_grad(view, g, 1.0);
        }
        r.value
    };

    let aux = match cfg.objective {
        TrainObjective::InfoNce | TrainObjective::OffInfo => 0.0,
        TrainObjective::DclOnly | TrainObjective::Combined => {
            let r = dcl(&z1, &z2, lc)?;
            set.add_grad(i1, &r.grads[0], lc.lambda_dcl);
            set.add_grad(i2, &r.grads[1], lc.lambda_dcl);
            r.value
        }
        TrainObjective::Bt => {
            let r = barlow_twins_padded(&z1, &z2, cfg.bt_pad_rows, rng, lc)?;
            set.add_grad(i1, &r.grads[0], lc.lambda_dcl);
            set.add_grad(i2, &r.grads[1], lc.lambda_dcl);
            r.value
        }
    };
    let total = info + lc.lambda_dcl * aux;
    if !total.is_finite() {
        return Err(Error::Numeric(format!("loss diverged ({total})")));
    }
    let grads = set.backward(params)?;
    Ok((StepLoss { total, info, aux }, grads))
}

/// Stream identifiers derived from the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_STEPS: u64 = 1 << 32;

/// Train from fresh parameters. On divergence the last good parameters are
/// written to `last_good` (when given) before the error is returned.
pub fn train(
    cfg: &TrainConfig,
    corpus: &[TokenSequence],
    dev: &[StsPair],
    test: &[StsPair],
    last_good: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dev.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument("dev and test sets must be non-empty".into()));
    }
    let corpus: Vec<TokenSequence> = corpus.iter().filter(|s| !s.is_empty()).cloned().collect();
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    let root = Rng::new(cfg.seed);
    let mut params = init_params(&mut root.split(STREAM_INIT), &cfg.encoder)?;
    let shuffle_seed = root.split(STREAM_SHUFFLE).next_u64();
    let mut adam = AdamState::for_params(&params);

    let mut history = Vec::new();
    let mut best: Option<(u64, f64, EncoderParams)> = None;
    let (mut sum_total, mut sum_info, mut sum_aux, mut count) = (0.0, 0.0, 0.0, 0usize);
    let mut step: u64 = 0;
    let mut last_finite: Option<(u64, EncoderParams)> = None;

    let mut evaluate_now = |step: u64, params: &EncoderParams, sums: (f64, f64, f64, usize)| -> Result<()> {
        let dev_spearman = evaluate(params, dev, cfg.eval_pre_mlp)?;
        let (align, uni) = dev_geometry(params, dev, cfg.eval_pre_mlp)?;
        let n = sums.3.max(1) as f64;
        history.push(EvalRecord {
            step,
            loss: sums.0 / n,
            loss_info: sums.1 / n,
            loss_dcl: sums.2 / n,
            dev_spearman,
            alignment: align,
            uniformity: uni,
        });
        // strict improvement: earlier checkpoint wins ties
        if best.as_ref().is_none_or(|b| dev_spearman > b.1) {
            best = Some((step, dev_spearman, params.clone()));
        }
        Ok(())
    };

    for epoch in 0..cfg.epochs as u64 {
        for batch_idx in epoch_batches(corpus.len(), cfg.batch_size, shuffle_seed, epoch)? {
            let batch: Vec<&TokenSequence> = batch_idx.iter().map(|&i| &corpus[i]).collect();
            let mut rng = root.split(STREAM_STEPS + step);
            let outcome = step_gradients(cfg, &params, &batch, &mut rng).and_then(|(loss, grads)| {
                // parameters that produced the previous finite loss
                let previous = last_good.map(|_| params.clone());
                adam_step(&mut params, &grads, &mut adam, cfg.lr)?;
                Ok((loss, previous))
            });
            let loss = match outcome {
                Ok((loss, previous)) => {
                    if let Some(previous) = previous {
                        last_finite = Some((step, previous));
                    }
                    loss
                }
                Err(e @ Error::Numeric(_)) => {
                    if let (Some(path), Some((good_step, good))) = (last_good, &last_finite) {
                        let echo = serde_json::to_value(cfg).unwrap_or_default();
                        save_checkpoint(good, path, cfg.seed, *good_step, echo)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            step += 1;
            sum_total += loss.total;
            sum_info += loss.info;
            sum_aux += loss.aux;
            count += 1;
            if step.is_multiple_of(cfg.eval_interval as u64) {
                evaluate_now(step, &params, (sum_total, sum_info, sum_aux, count))?;
                (sum_total, sum_info, sum_aux, count) = (0.0, 0.0, 0.0, 0);
            }
        }
    }
    if count > 0 || step == 0 {
        evaluate_now(step, &params, (sum_total, sum_info, sum_aux, count))?;
    }

    let (best_step, best_dev_spearman, best_params) = best.expect("at least one evaluation");
    let test_spearman = evaluate(&best_params, test, cfg.eval_pre_mlp)?;
    Ok(TrainOutcome {
        report: TrainReport {
            objective: cfg.objective,
            seed: cfg.seed,
            steps: step,
            history,
            best_step,
            best_dev_spearman,
            test_spearman,
        },
        best_params,
    })
}
