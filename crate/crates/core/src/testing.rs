//! Analytic denoisers for tests and for checking engine identities.

use crate::autograd::{Graph, Var};
use crate::diffusion::{BackendInfo, DenoiserBackend, DenoiserOutput, NoiseSchedule, TextEmbedding};
use crate::error::Result;
use crate::tensor::Tensor;

const TEXT_DIM: usize = 8;
const ANY_STEPS: usize = crate::diffusion::BackendInfo::ANY_STEPS;

fn info(channels: usize, num_steps: usize) -> BackendInfo {
    BackendInfo {
        latent_channels: channels,
        spatial_multiple: 1,
        num_steps,
        text_dim: TEXT_DIM,
    }
}

/// Predicts `ε ≡ 0`.
pub struct ZeroNoise {
    channels: usize,
}

impl ZeroNoise {
    pub fn new(channels: usize) -> Self {
        Self { channels }
    }
}

impl DenoiserBackend for ZeroNoise {
    fn info(&self) -> BackendInfo {
        info(self.channels, ANY_STEPS)
    }

    fn forward(&self, g: &Graph, x: Var, _t: usize, _c: &TextEmbedding) -> Result<DenoiserOutput> {
        let eps = g.scale(x, 0.0);
        Ok(DenoiserOutput { eps, features: vec![eps] })
    }
}

/// Predicts the same fixed tensor for every input.
pub struct FixedNoise {
    eps: Tensor,
}

impl FixedNoise {
    pub fn new(eps: Tensor) -> Self {
        Self { eps }
    }
}

impl DenoiserBackend for FixedNoise {
    fn info(&self) -> BackendInfo {
        info(self.eps.shape()[0], ANY_STEPS)
    }

    fn forward(&self, g: &Graph, x: Var, _t: usize, _c: &TextEmbedding) -> Result<DenoiserOutput> {
        let zero = g.scale(x, 0.0);
        let eps = g.offset(zero, &self.eps)?;
        Ok(DenoiserOutput { eps, features: vec![eps] })
    }
}

/// Predicts `ε = slope · x + intercept` elementwise.
pub struct LinearDenoiser {
    channels: usize,
    slope: f64,
    intercept: f64,
}

impl LinearDenoiser {
    pub fn new(channels: usize, slope: f64, intercept: f64) -> Self {
        Self {
            channels,
            slope,
            intercept,
        }
    }
}

impl DenoiserBackend for LinearDenoiser {
    fn info(&self) -> BackendInfo {
        info(self.channels, ANY_STEPS)
    }

    fn forward(&self, g: &Graph, x: Var, _t: usize, _c: &TextEmbedding) -> Result<DenoiserOutput> {
        let shape = g.value(x).shape().to_vec();
        let eps = g.offset(g.scale(x, self.slope), &Tensor::full(&shape, self.intercept))?;
        Ok(DenoiserOutput { eps, features: vec![eps] })
    }
}

/// Exact noise oracle for a known clean latent: `ε = (x_t − √ᾱ_t·x_ref) / √(1 − ᾱ_t)`.
///
/// Any trajectory started from `x_ref` denoises back onto it.
pub struct ReferenceOracle {
    reference: Tensor,
    sched: NoiseSchedule,
}

impl ReferenceOracle {
    pub fn new(reference: Tensor, sched: NoiseSchedule) -> Self {
        Self { reference, sched }
    }
}

impl DenoiserBackend for ReferenceOracle {
    fn info(&self) -> BackendInfo {
        info(self.reference.shape()[0], self.sched.num_steps())
    }

    fn forward(&self, g: &Graph, x: Var, t: usize, _c: &TextEmbedding) -> Result<DenoiserOutput> {
        let ab = self.sched.alpha_bar(t);
        let shifted = g.offset(x, &self.reference.scale(-ab.sqrt()))?;
        let eps = g.scale(shifted, 1.0 / (1.0 - ab).sqrt());
        Ok(DenoiserOutput { eps, features: vec![eps] })
    }
}
