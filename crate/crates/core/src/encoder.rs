//! Toy differentiable sentence encoder.
//!
//! token lookup → mean pooling → dropout → dense + activation → dropout →
//! dense. Dropout is inverted (kept units scaled by `1/p_keep`), so the
//! deterministic forward with every unit kept is the weight-scaling estimate
//! of the dropout expectation.

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::matrix::{gaussian_sample, Matrix};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::borrow::Borrow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// Linear head; makes the dropout expectation identity exact.
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub p_keep: f64,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 30_000,
            embed_dim: 64,
            hidden_dim: 128,
            out_dim: 64,
            p_keep: 0.9,
            activation: Activation::Tanh,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config("encoder dimensions must all be >= 1".into()));
        }
        if !(self.p_keep > 0.0 && self.p_keep <= 1.0) {
            return Err(Error::Config(format!(
                "model.p_keep must lie in (0, 1], got {}",
                self.p_keep
            )));
        }
        Ok(())
    }
}

/// Parameter blocks, in declaration (and checkpoint) order.
pub const BLOCK_NAMES: [&str; 5] = ["token_table", "hidden_weight", "hidden_bias", "output_weight", "output_bias"];

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    /// vocab_size × embed_dim
    pub token_table: Matrix,
    /// embed_dim × hidden_dim
    pub hidden_weight: Matrix,
    /// 1 × hidden_dim
    pub hidden_bias: Matrix,
    /// hidden_dim × out_dim
    pub output_weight: Matrix,
    /// 1 × out_dim
    pub output_bias: Matrix,
}

/// Gradients with the same block layout as [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub token_table: Matrix,
    pub hidden_weight: Matrix,
    pub hidden_bias: Matrix,
    pub output_weight: Matrix,
    pub output_bias: Matrix,
}

impl EncoderParams {
    pub fn block_shapes(config: &EncoderConfig) -> [(usize, usize); 5] {
        [
            (config.vocab_size, config.embed_dim),
            (config.embed_dim, config.hidden_dim),
            (1, config.hidden_dim),
            (config.hidden_dim, config.out_dim),
            (1, config.out_dim),
        ]
    }

    pub fn from_blocks(config: EncoderConfig, blocks: Vec<Matrix>) -> Result<Self> {
        let shapes = Self::block_shapes(&config);
        if blocks.len() != 5 {
            return Err(Error::InvalidArgument(format!("expected 5 parameter blocks, got {}", blocks.len())));
        }
        for ((block, shape), name) in blocks.iter().zip(shapes).zip(BLOCK_NAMES) {
            if block.shape() != shape {
                return Err(Error::InvalidArgument(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    block.shape()
                )));
            }
        }
        let mut it = blocks.into_iter();
        let mut next = || it.next().expect("length checked");
        Ok(Self {
            config,
            token_table: next(),
            hidden_weight: next(),
            hidden_bias: next(),
            output_weight: next(),
            output_bias: next(),
        })
    }

    pub fn blocks(&self) -> [&Matrix; 5] {
        [
            &self.token_table,
            &self.hidden_weight,
            &self.hidden_bias,
            &self.output_weight,
            &self.output_bias,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut Matrix; 5] {
        [
            &mut self.token_table,
            &mut self.hidden_weight,
            &mut self.hidden_bias,
            &mut self.output_weight,
            &mut self.output_bias,
        ]
    }

    pub fn zero_grads(&self) -> ParamGrads {
        let s = Self::block_shapes(&self.config);
        ParamGrads {
            token_table: Matrix::zeros(s[0].0, s[0].1),
            hidden_weight: Matrix::zeros(s[1].0, s[1].1),
            hidden_bias: Matrix::zeros(s[2].0, s[2].1),
            output_weight: Matrix::zeros(s[3].0, s[3].1),
            output_bias: Matrix::zeros(s[4].0, s[4].1),
        }
    }
}

impl ParamGrads {
    pub fn blocks(&self) -> [&Matrix; 5] {
        [
            &self.token_table,
            &self.hidden_weight,
            &self.hidden_bias,
            &self.output_weight,
            &self.output_bias,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut Matrix; 5] {
        [
            &mut self.token_table,
            &mut self.hidden_weight,
            &mut self.hidden_bias,
            &mut self.output_weight,
            &mut self.output_bias,
        ]
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.add_assign(b);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.blocks().iter().all(|b| b.as_slice().iter().all(|&v| v == 0.0))
    }
}

/// Xavier-uniform weights, zero biases.
pub fn init_params(rng: &mut Rng, config: &EncoderConfig) -> Result<EncoderParams> {
    config.validate()?;
    let mut xavier = |rows: usize, cols: usize| {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| a * (2.0 * rng.uniform() - 1.0)).collect();
        Matrix::from_vec(rows, cols, data).expect("shape consistent")
    };
    let token_table = xavier(config.vocab_size, config.embed_dim);
    let hidden_weight = xavier(config.embed_dim, config.hidden_dim);
    let output_weight = xavier(config.hidden_dim, config.out_dim);
    Ok(EncoderParams {
        config: config.clone(),
        token_table,
        hidden_weight,
        hidden_bias: Matrix::zeros(1, config.hidden_dim),
        output_weight,
        output_bias: Matrix::zeros(1, config.out_dim),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ForwardMode {
    /// One dropout sample per row.
    Dropout,
    /// All units kept, no scaling (off-dropout).
    Deterministic,
    /// Mean of `k` independent dropout forwards.
    MeanSampled { k: usize },
    /// Dropout forward plus Gaussian noise of the given variance.
    DropoutPlusGaussian { variance: f64 },
}

#[derive(Debug, Clone)]
struct Pass {
    /// Per-entry dropout factor (0 or 1/p_keep) after pooling; `None` when all kept.
    pool_mask: Option<Vec<f64>>,
    /// Activation outputs before the second dropout site.
    hidden: Matrix,
    hidden_mask: Option<Vec<f64>>,
}

/// Activations and masks from one [`forward`] call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    config: EncoderConfig,
    mode: ForwardMode,
    tokens: Vec<Vec<u32>>,
    pooled: Matrix,
    passes: Vec<Pass>,
}

impl ForwardCache {
    pub fn mode(&self) -> ForwardMode {
        self.mode
    }

    pub fn batch_size(&self) -> usize {
        self.tokens.len()
    }

    /// Number of dropout samples in the cache (K for mean sampling).
    pub fn pass_count(&self) -> usize {
        self.passes.len()
    }

    /// Keep/drop pattern at the post-pooling site of pass `pass`, or `None` when deterministic.
    pub fn pool_keep_mask(&self, pass: usize) -> Option<Vec<bool>> {
        self.passes[pass].pool_mask.as_ref().map(|m| m.iter().map(|&f| f != 0.0).collect())
    }

    /// Keep/drop pattern at the post-activation site of pass `pass`.
    pub fn hidden_keep_mask(&self, pass: usize) -> Option<Vec<bool>> {
        self.passes[pass].hidden_mask.as_ref().map(|m| m.iter().map(|&f| f != 0.0).collect())
    }
}

fn sample_mask(rng: &mut Rng, len: usize, p_keep: f64) -> Option<Vec<f64>> {
    if p_keep >= 1.0 {
        return Some(vec![1.0; len]);
    }
    let scale = 1.0 / p_keep;
    Some((0..len).map(|_| if rng.bernoulli(p_keep) { scale } else { 0.0 }).collect())
}

fn apply_mask(m: &Matrix, mask: &Option<Vec<f64>>) -> Matrix {
    match mask {
        None => m.clone(),
        Some(f) => {
            let mut out = m.clone();
            out.as_mut_slice().iter_mut().zip(f).for_each(|(v, s)| *v *= s);
            out
        }
    }
}

fn add_bias(m: &mut Matrix, bias: &Matrix) {
    let b = bias.as_slice();
    for i in 0..m.rows() {
        m.row_mut(i).iter_mut().zip(b).for_each(|(v, c)| *v += c);
    }
}

/// Mean of token embeddings per sentence (N × embed_dim).
fn pool<S: Borrow<TokenSequence>>(params: &EncoderParams, batch: &[S]) -> Result<(Matrix, Vec<Vec<u32>>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let e = params.config.embed_dim;
    let mut pooled = Matrix::zeros(batch.len(), e);
    let mut tokens = Vec::with_capacity(batch.len());
    for (i, seq) in batch.iter().enumerate() {
        let seq = seq.borrow();
        if seq.is_empty() {
            return Err(Error::InvalidArgument(format!("sequence {i} in batch is empty")));
        }
        let inv = 1.0 / seq.len() as f64;
        let row = pooled.row_mut(i);
        for &id in &seq.ids {
            if id as usize >= params.config.vocab_size {
                return Err(Error::InvalidArgument(format!(
                    "token id {id} out of range for vocabulary of {}",
                    params.config.vocab_size
                )));
            }
            row.iter_mut()
                .zip(params.token_table.row(id as usize))
                .for_each(|(r, t)| *r += t * inv);
        }
        tokens.push(seq.ids.clone());
    }
    Ok((pooled, tokens))
}

fn head_pass(params: &EncoderParams, pooled: &Matrix, rng: Option<&mut Rng>) -> (Matrix, Pass) {
    let cfg = &params.config;
    let (n, e, h) = (pooled.rows(), cfg.embed_dim, cfg.hidden_dim);
    let mut rng = rng;
    let pool_mask = rng.as_deref_mut().and_then(|r| sample_mask(r, n * e, cfg.p_keep));
    let mut pre = apply_mask(pooled, &pool_mask).matmul(&params.hidden_weight);
    add_bias(&mut pre, &params.hidden_bias);
    pre.as_mut_slice().iter_mut().for_each(|v| *v = cfg.activation.apply(*v));
    let hidden = pre;
    let hidden_mask = rng.and_then(|r| sample_mask(r, n * h, cfg.p_keep));
    let mut out = apply_mask(&hidden, &hidden_mask).matmul(&params.output_weight);
    add_bias(&mut out, &params.output_bias);
    (
        out,
        Pass {
            pool_mask,
            hidden,
            hidden_mask,
        },
    )
}

/// Embed a batch under `mode`. `rng` is only consumed by stochastic modes.
pub fn forward<S: Borrow<TokenSequence>>(
    params: &EncoderParams,
    batch: &[S],
    mode: ForwardMode,
    rng: &mut Rng,
) -> Result<(Matrix, ForwardCache)> {
    let (pooled, tokens) = pool(params, batch)?;
    let (out, passes) = match mode {
        ForwardMode::Deterministic => {
            let (out, pass) = head_pass(params, &pooled, None);
            (out, vec![pass])
        }
        ForwardMode::Dropout => {
            let (out, pass) = head_pass(params, &pooled, Some(rng));
            (out, vec![pass])
        }
        ForwardMode::DropoutPlusGaussian { variance } => {
            let (mut out, pass) = head_pass(params, &pooled, Some(rng));
            let noise = gaussian_sample(rng, out.rows(), out.cols(), 0.0, variance)?;
            out.add_assign(&noise);
            (out, vec![pass])
        }
        ForwardMode::MeanSampled { k } => {
            if k == 0 {
                return Err(Error::InvalidArgument("mean sampling needs K >= 1".into()));
            }
            let mut acc = Matrix::zeros(pooled.rows(), params.config.out_dim);
            let mut passes = Vec::with_capacity(k);
            for _ in 0..k {
                let (out, pass) = head_pass(params, &pooled, Some(rng));
                acc.add_assign(&out);
                passes.push(pass);
            }
            acc.scale(1.0 / k as f64);
            (acc, passes)
        }
    };
    Ok((
        out,
        ForwardCache {
            config: params.config.clone(),
            mode,
            tokens,
            pooled,
            passes,
        },
    ))
}

/// Deterministic embeddings for evaluation: the pooling output when
/// `pre_mlp`, otherwise the full head.
pub fn embed<S: Borrow<TokenSequence>>(params: &EncoderParams, batch: &[S], pre_mlp: bool) -> Result<Matrix> {
    if pre_mlp {
        Ok(pool(params, batch)?.0)
    } else {
        Ok(head_pass(params, &pool(params, batch)?.0, None).0)
    }
}

/// Gradients of `Σ ⟨grad_out, output⟩` with respect to every parameter.
pub fn backward(params: &EncoderParams, cache: &ForwardCache, grad_out: &Matrix) -> Result<ParamGrads> {
    if params.config != cache.config {
        return Err(Error::InvalidState("forward cache was produced with a different encoder config".into()));
    }
    let n = cache.tokens.len();
    if grad_out.shape() != (n, params.config.out_dim) {
        return Err(Error::InvalidState(format!(
            "grad_out shape {:?} does not match forward output ({n}, {})",
            grad_out.shape(),
            params.config.out_dim
        )));
    }
    let act = params.config.activation;
    let weight = 1.0 / cache.passes.len() as f64;
    let mut grads = params.zero_grads();
    let mut d_pooled = Matrix::zeros(n, params.config.embed_dim);

    for pass in &cache.passes {
        let mut g = grad_out.clone();
        if cache.passes.len() > 1 {
            g.scale(weight);
        }
        for i in 0..n {
            grads.output_bias.row_mut(0).iter_mut().zip(g.row(i)).for_each(|(b, v)| *b += v);
        }
        let dropped_hidden = apply_mask(&pass.hidden, &pass.hidden_mask);
        grads.output_weight.add_assign(&dropped_hidden.t_matmul(&g));

        let mut d_hidden = g.matmul_t(&params.output_weight);
        if let Some(mask) = &pass.hidden_mask {
            d_hidden.as_mut_slice().iter_mut().zip(mask).for_each(|(v, s)| *v *= s);
        }
        d_hidden
            .as_mut_slice()
            .iter_mut()
            .zip(pass.hidden.as_slice())
            .for_each(|(v, &y)| *v *= act.derivative_from_output(y));
        for i in 0..n {
            grads.hidden_bias.row_mut(0).iter_mut().zip(d_hidden.row(i)).for_each(|(b, v)| *b += v);
        }
        let dropped_pool = apply_mask(&cache.pooled, &pass.pool_mask);
        grads.hidden_weight.add_assign(&dropped_pool.t_matmul(&d_hidden));

        let mut d_pool = d_hidden.matmul_t(&params.hidden_weight);
        if let Some(mask) = &pass.pool_mask {
            d_pool.as_mut_slice().iter_mut().zip(mask).for_each(|(v, s)| *v *= s);
        }
        d_pooled.add_assign(&d_pool);
    }

    for (i, ids) in cache.tokens.iter().enumerate() {
        let inv = 1.0 / ids.len() as f64;
        for &id in ids {
            grads
                .token_table
                .row_mut(id as usize)
                .iter_mut()
                .zip(d_pooled.row(i))
                .for_each(|(t, d)| *t += d * inv);
        }
    }
    Ok(grads)
}

/// `z` plus independent `N(0, variance)` noise per entry.
pub fn perturb(z: &Matrix, rng: &mut Rng, variance: f64) -> Result<Matrix> {
    let mut out = z.clone();
    if variance == 0.0 {
        return Ok(out);
    }
    out.add_assign(&gaussian_sample(rng, z.rows(), z.cols(), 0.0, variance)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 20,
            embed_dim: 5,
            hidden_dim: 6,
            out_dim: 4,
            p_keep: 0.8,
            activation: Activation::Tanh,
        }
    }

    fn batch() -> Vec<TokenSequence> {
        [vec![1, 2, 3], vec![4, 4], vec![0, 19, 7, 7, 2]]
            .into_iter()
            .map(|ids| TokenSequence {
                original_len: ids.len(),
                ids,
            })
            .collect()
    }

    /// Params with nonzero biases so every block is exercised.
    fn params(seed: u64, cfg: &EncoderConfig) -> EncoderParams {
        let mut rng = Rng::new(seed);
        let mut p = init_params(&mut rng, cfg).unwrap();
        p.token_table.scale(20.0);
        for v in p.hidden_bias.as_mut_slice().iter_mut().chain(p.output_bias.as_mut_slice()) {
            *v = 0.3 * rng.standard_normal();
        }
        p
    }

    #[test]
    fn init_is_seeded_with_zero_biases() {
        let cfg = tiny_config();
        let a = init_params(&mut Rng::new(1), &cfg).unwrap();
        assert_eq!(a, init_params(&mut Rng::new(1), &cfg).unwrap());
        assert!(a.hidden_bias.as_slice().iter().all(|&v| v == 0.0));
        assert!(a.output_bias.as_slice().iter().all(|&v| v == 0.0));
        let bound = (6.0 / 11.0f64).sqrt();
        assert!(a.hidden_weight.as_slice().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn init_weight_mean_near_zero() {
        let cfg = EncoderConfig {
            vocab_size: 200,
            embed_dim: 64,
            ..tiny_config()
        };
        let p = init_params(&mut Rng::new(3), &cfg).unwrap();
        let s = p.token_table.as_slice();
        assert!(s.len() >= 10_000);
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let a = (6.0 / 264.0f64).sqrt();
        assert!(mean.abs() < 0.01 * a / 0.15, "mean {mean}");
        assert!(mean.abs() < 0.01);
    }

    #[test]
    fn deterministic_is_pure() {
        let cfg = tiny_config();
        let p = params(2, &cfg);
        let (a, _) = forward(&p, &batch(), ForwardMode::Deterministic, &mut Rng::new(1)).unwrap();
        let (b, _) = forward(&p, &batch(), ForwardMode::Deterministic, &mut Rng::new(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn keep_all_dropout_equals_deterministic() {
        let cfg = EncoderConfig {
            p_keep: 1.0,
            ..tiny_config()
        };
        let p = params(2, &cfg);
        let (a, _) = forward(&p, &batch(), ForwardMode::Dropout, &mut Rng::new(1)).unwrap();
        let (b, _) = forward(&p, &batch(), ForwardMode::Deterministic, &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_sequence_rejected() {
        let p = params(2, &tiny_config());
        let mut b = batch();
        b.push(TokenSequence {
            ids: vec![],
            original_len: 0,
        });
        assert!(matches!(
            forward(&p, &b, ForwardMode::Deterministic, &mut Rng::new(1)),
            Err(Error::InvalidArgument(_))
        ));
        let none: Vec<TokenSequence> = vec![];
        assert!(forward(&p, &none, ForwardMode::Deterministic, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let p = params(2, &tiny_config());
        let (out, cache) = forward(&p, &batch(), ForwardMode::Dropout, &mut Rng::new(4)).unwrap();
        let g = backward(&p, &cache, &Matrix::zeros(out.rows(), out.cols())).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let p = params(2, &tiny_config());
        let (_, cache) = forward(&p, &batch(), ForwardMode::Dropout, &mut Rng::new(4)).unwrap();
        assert!(matches!(
            backward(&p, &cache, &Matrix::zeros(2, 4)),
            Err(Error::InvalidState(_))
        ));
        let other = params(2, &EncoderConfig { out_dim: 3, ..tiny_config() });
        assert!(matches!(
            backward(&other, &cache, &Matrix::zeros(3, 3)),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn dropped_hidden_unit_passes_no_gradient_to_its_output_weights() {
        let cfg = EncoderConfig {
            p_keep: 0.5,
            ..tiny_config()
        };
        let p = params(5, &cfg);
        let one = vec![batch().remove(0)];
        let (out, cache) = forward(&p, &one, ForwardMode::Dropout, &mut Rng::new(8)).unwrap();
        let mask = cache.hidden_keep_mask(0).unwrap();
        assert!(mask.iter().any(|k| !k), "seed should drop a unit");
        let g = backward(&p, &cache, &Matrix::from_fn(out.rows(), out.cols(), |_, _| 1.0)).unwrap();
        for (h, kept) in mask.iter().enumerate() {
            if !kept {
                assert!(g.output_weight.row(h).iter().all(|&v| v == 0.0));
                assert_eq!(g.hidden_bias[(0, h)], 0.0);
                assert!((0..cfg.embed_dim).all(|e| g.hidden_weight[(e, h)] == 0.0));
            }
        }
    }

    fn objective(out: &Matrix, probe: &Matrix) -> f64 {
        crate::matrix::dot(out.as_slice(), probe.as_slice())
    }

    /// Central differences on every parameter with the dropout masks frozen
    /// by replaying the same RNG state.
    fn fd_audit(mode: ForwardMode, activation: Activation) -> f64 {
        let cfg = EncoderConfig {
            activation,
            ..tiny_config()
        };
        let p = params(11, &cfg);
        let b = batch();
        let probe = gaussian_sample(&mut Rng::new(77), 3, cfg.out_dim, 0.0, 1.0).unwrap();
        let seed = Rng::new(42).state();
        let (_, cache) = forward(&p, &b, mode, &mut Rng::from_state(seed)).unwrap();
        let grads = backward(&p, &cache, &probe).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for block in 0..5 {
            let len = p.blocks()[block].as_slice().len();
            for k in 0..len {
                // Only token rows that appear in the batch carry signal; skip the rest quickly.
                let analytic = grads.blocks()[block].as_slice()[k];
                let mut plus = p.clone();
                plus.blocks_mut()[block].as_mut_slice()[k] += h;
                let mut minus = p.clone();
                minus.blocks_mut()[block].as_mut_slice()[k] -= h;
                let fp = objective(&forward(&plus, &b, mode, &mut Rng::from_state(seed)).unwrap().0, &probe);
                let fm = objective(&forward(&minus, &b, mode, &mut Rng::from_state(seed)).unwrap().0, &probe);
                let numeric = (fp - fm) / (2.0 * h);
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2);
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn backward_matches_finite_differences_all_modes() {
        for mode in [
            ForwardMode::Deterministic,
            ForwardMode::Dropout,
            ForwardMode::MeanSampled { k: 3 },
            ForwardMode::DropoutPlusGaussian { variance: 0.1 },
        ] {
            for act in [Activation::Tanh, Activation::Identity] {
                let err = fd_audit(mode, act);
                assert!(err < 1e-6, "{mode:?} {act:?}: {err}");
            }
        }
    }

    #[test]
    fn perturb_cases() {
        let z = Matrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64);
        assert_eq!(perturb(&z, &mut Rng::new(1), 0.0).unwrap(), z);
        assert_eq!(
            perturb(&z, &mut Rng::new(1), 0.1).unwrap(),
            perturb(&z, &mut Rng::new(1), 0.1).unwrap()
        );
        assert!(perturb(&z, &mut Rng::new(1), -1.0).is_err());

        let big = Matrix::zeros(1000, 100);
        let d = perturb(&big, &mut Rng::new(3), 0.1).unwrap();
        let n = 1e5;
        let mean = d.as_slice().iter().sum::<f64>() / n;
        let var = d.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 0.1).abs() <= 0.005, "variance {var}");
    }

    #[test]
    fn mean_sampled_cache_has_k_passes() {
        let p = params(2, &tiny_config());
        let (_, cache) = forward(&p, &batch(), ForwardMode::MeanSampled { k: 10 }, &mut Rng::new(1)).unwrap();
        assert_eq!(cache.pass_count(), 10);
        assert!(forward(&p, &batch(), ForwardMode::MeanSampled { k: 0 }, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn embed_pre_mlp_is_mean_of_token_rows() {
        let p = params(2, &tiny_config());
        let b = batch();
        let e = embed(&p, &b, true).unwrap();
        for c in 0..5 {
            let want = (p.token_table[(4, c)] + p.token_table[(4, c)]) / 2.0;
            assert!((e[(1, c)] - want).abs() < 1e-15);
        }
        let full = embed(&p, &b, false).unwrap();
        let (det, _) = forward(&p, &b, ForwardMode::Deterministic, &mut Rng::new(0)).unwrap();
        assert_eq!(full, det);
    }
}
