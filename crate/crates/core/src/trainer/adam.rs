use crate::encoder::{EncoderParams, ParamGrads, BLOCK_NAMES};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment accumulators, one buffer per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(block_sizes: &[usize]) -> Self {
        Self {
            first_moment: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            beta1: BETA1,
            beta2: BETA2,
            epsilon: EPSILON,
        }
    }

    pub fn for_params(params: &EncoderParams) -> Self {
        let sizes: Vec<usize> = params.blocks().iter().map(|b| b.as_slice().len()).collect();
        Self::new(&sizes)
    }

    /// One bias-corrected Adam update over named blocks. Nothing is modified
    /// if any gradient entry is non-finite.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], names: &[&str], lr: f64) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} blocks, got {} params and {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for (b, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first_moment[b].len() {
                return Err(Error::InvalidArgument(format!(
                    "block {}: parameter/gradient/state sizes {} / {} / {} disagree",
                    names.get(b).copied().unwrap_or("?"),
                    p.len(),
                    g.len(),
                    self.first_moment[b].len()
                )));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at optimizer step {}, block {}, entry {i}",
                    self.step + 1,
                    names.get(b).copied().unwrap_or("?")
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (b, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[b];
            let v = &mut self.second_moment[b];
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                if m[i] == 0.0 {
                    continue;
                }
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Adam update of every encoder block.
pub fn adam_step(params: &mut EncoderParams, grads: &ParamGrads, state: &mut AdamState, lr: f64) -> Result<()> {
    let grad_blocks: Vec<&[f64]> = grads.blocks().iter().map(|b| b.as_slice()).collect();
    let mut param_blocks: Vec<&mut [f64]> = params.blocks_mut().into_iter().map(|b| b.as_mut_slice()).collect();
    state.update(&mut param_blocks, &grad_blocks, &BLOCK_NAMES, lr)
}
