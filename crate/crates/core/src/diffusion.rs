//! Noise schedules, forward noising, reverse denoising steps and the frozen
//! denoiser interface.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{contract_err, param_err, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Variance plan of a discrete diffusion process with steps `1..=T`.
///
/// Arrays are stored zero-based; the accessors take the one-based step index
/// and define `alpha_bar(0) = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta schedule from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(param_err(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(param_err(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let last = (steps - 1) as f64;
        let betas = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / last)
            .collect();
        Ok(Self::from_betas(betas))
    }

    /// Schedule from an explicit beta sequence, each in (0, 1).
    pub fn from_beta_list(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(param_err(format!("schedule needs at least 2 steps, got {}", betas.len())));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(param_err(format!("every beta must lie in (0, 1), got {b}")));
        }
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Self {
            betas,
            alphas,
            alpha_bars,
        }
    }

    /// Default schedule for the toy backend: 100 steps, beta 1e-4 to 0.02.
    pub fn toy_default() -> Self {
        Self::linear(100, 1e-4, 0.02).expect("valid default schedule")
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(param_err(format!(
                "step {t} outside 1..={}",
                self.num_steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product up to step `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Ancestral posterior variance `(1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`; zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }
}

/// A `[c, h, w]` latent with its diffusion noise level (0 = clean).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor {
    pub data: Tensor,
    pub noise_level: usize,
    pub requires_grad: bool,
}

impl LatentTensor {
    pub fn clean(data: Tensor) -> Result<Self> {
        Self::at_level(data, 0)
    }

    pub fn at_level(data: Tensor, noise_level: usize) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(shape_err(format!(
                "latent must be [c, h, w], got {:?}",
                data.shape()
            )));
        }
        Ok(Self {
            data,
            noise_level,
            requires_grad: false,
        })
    }

    pub fn learnable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn expect_level(&self, level: usize, what: &str) -> Result<()> {
        if self.noise_level != level {
            return Err(contract_err(format!(
                "{what}: expected noise level {level}, got {}",
                self.noise_level
            )));
        }
        Ok(())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if !self.data.all_finite() {
            return Err(Error::Numeric(format!("{what}: latent has non-finite entries")));
        }
        Ok(())
    }
}

/// Sequence of `L` text token vectors of width `d`, stored as `[L, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    tokens: Tensor,
}

impl TextEmbedding {
    pub fn new(tokens: Tensor) -> Result<Self> {
        match *tokens.shape() {
            [l, d] if l >= 1 && d >= 1 => Ok(Self { tokens }),
            _ => Err(shape_err(format!(
                "text embedding must be [L >= 1, d], got {:?}",
                tokens.shape()
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }
}

/// Static facts an adapter exposes about its latent space and conditioning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub latent_channels: usize,
    /// Latent height and width must be multiples of this.
    pub spatial_multiple: usize,
    pub num_steps: usize,
    pub text_dim: usize,
}

impl BackendInfo {
    /// `num_steps` of a backend that works with any schedule.
    pub const ANY_STEPS: usize = usize::MAX;

    pub fn accepts_schedule(&self, sched: &NoiseSchedule) -> bool {
        self.num_steps == Self::ANY_STEPS || self.num_steps == sched.num_steps()
    }
}

/// Noise prediction plus intermediate maps recorded on a graph.
pub struct DenoiserOutput {
    pub eps: Var,
    /// Multi-scale intermediate maps, each `[c, h, w]`.
    pub features: Vec<Var>,
}

/// A frozen noise predictor `ε_θ(x, t, c)`.
///
/// `forward` records the prediction on a [`Graph`] so that gradients reach the
/// latent input. Parameters must enter the graph as constants.
pub trait DenoiserBackend: Send + Sync {
    fn info(&self) -> BackendInfo;

    fn forward(&self, g: &Graph, x: Var, t: usize, c: &TextEmbedding) -> Result<DenoiserOutput>;

    fn is_frozen(&self) -> bool {
        true
    }

    /// Content hash of the weights, when the backend has any.
    fn snapshot_hash(&self) -> Option<String> {
        None
    }

    /// Gradient-free prediction.
    fn predict(&self, x: &Tensor, t: usize, c: &TextEmbedding) -> Result<Tensor> {
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward(&g, xv, t, c)?;
        Ok((*g.value(out.eps)).clone())
    }

    fn check_latent(&self, shape: &[usize]) -> Result<()> {
        let info = self.info();
        let ok = shape.len() == 3
            && shape[0] == info.latent_channels
            && shape[1].is_multiple_of(info.spatial_multiple)
            && shape[2].is_multiple_of(info.spatial_multiple)
            && shape[1] > 0
            && shape[2] > 0;
        if !ok {
            return Err(shape_err(format!(
                "backend expects [{}, k·{m}, k·{m}] latents, got {shape:?}",
                info.latent_channels,
                m = info.spatial_multiple
            )));
        }
        Ok(())
    }
}

/// Maps a prompt to the embedding a backend is conditioned on.
pub trait TextEncoder: Send + Sync {
    fn encode(&self, prompt: &str) -> TextEmbedding;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Stochastic DDPM step with posterior variance.
    #[default]
    Ancestral,
    /// Zero-stochasticity DDIM step (η = 0).
    Deterministic,
}

/// `√ᾱ_t · x0 + √(1 − ᾱ_t) · eps`.
pub fn forward_noise(
    x0: &LatentTensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    x0.expect_level(0, "forward_noise input")?;
    sched.check_step(t)?;
    x0.data.ensure_same_shape(eps, "forward_noise eps")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data.zip_map(eps, |x, e| a * x + b * e);
    LatentTensor::at_level(data, t)
}

/// [`forward_noise`] with `eps` drawn from `rng`; returns the draw as well.
pub fn forward_noise_sampled<R: Rng + ?Sized>(
    x0: &LatentTensor,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(LatentTensor, Tensor)> {
    let eps = Tensor::randn(x0.shape(), rng);
    Ok((forward_noise(x0, t, &eps, sched)?, eps))
}

/// Graph form of [`forward_noise`] for a clean variable and a fixed `eps`.
pub fn forward_noise_var(
    g: &Graph,
    x0: Var,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Var> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let scaled = g.scale(x0, ab.sqrt());
    g.offset(scaled, &eps.scale((1.0 - ab).sqrt()))
}

/// Clean-latent estimate `(x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn predicted_x0(xt: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Tensor {
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    xt.zip_map(eps, |x, e| (x - b * e) / a)
}

pub struct StepVars {
    pub prev: Var,
    pub eps: Var,
}

/// One reverse step recorded on a graph. `z` is the ancestral noise draw and is
/// ignored by the deterministic sampler and at `t = 1`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step_var(
    g: &Graph,
    xt: Var,
    t: usize,
    c: &TextEmbedding,
    backend: &dyn DenoiserBackend,
    sched: &NoiseSchedule,
    sampler: Sampler,
    z: Option<&Tensor>,
) -> Result<StepVars> {
    sched.check_step(t)?;
    let eps = backend.forward(g, xt, t, c)?.eps;
    if !g.value(eps).all_finite() {
        return Err(Error::Numeric(format!(
            "denoiser produced non-finite output at step {t}"
        )));
    }
    let prev = match sampler {
        Sampler::Ancestral => {
            let alpha = sched.alpha(t);
            let coef = (1.0 - alpha) / (1.0 - sched.alpha_bar(t)).sqrt();
            let diff = g.sub(xt, g.scale(eps, coef))?;
            let mean = g.scale(diff, 1.0 / alpha.sqrt());
            let sigma = sched.posterior_variance(t).sqrt();
            match z {
                Some(z) if t > 1 => g.offset(mean, &z.scale(sigma))?,
                _ => mean,
            }
        }
        Sampler::Deterministic => {
            let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t - 1));
            let x0 = g.scale(
                g.sub(xt, g.scale(eps, (1.0 - ab).sqrt()))?,
                1.0 / ab.sqrt(),
            );
            g.add(
                g.scale(x0, ab_prev.sqrt()),
                g.scale(eps, (1.0 - ab_prev).sqrt()),
            )?
        }
    };
    Ok(StepVars { prev, eps })
}

/// A reverse step's output and the noise prediction it used.
pub struct StepResult {
    pub prev: LatentTensor,
    pub eps: Tensor,
}

/// One reverse step with an explicit ancestral noise draw.
pub fn reverse_step_with_noise(
    xt: &LatentTensor,
    c: &TextEmbedding,
    backend: &dyn DenoiserBackend,
    sched: &NoiseSchedule,
    sampler: Sampler,
    z: Option<&Tensor>,
) -> Result<StepResult> {
    let t = xt.noise_level;
    if t == 0 {
        return Err(param_err("reverse step from a clean latent (t = 0)"));
    }
    if let Some(z) = z {
        xt.data.ensure_same_shape(z, "reverse step noise")?;
    }
    let g = Graph::new();
    let x = g.constant(xt.data.clone());
    let step = reverse_step_var(&g, x, t, c, backend, sched, sampler, z)?;
    Ok(StepResult {
        prev: LatentTensor::at_level((*g.value(step.prev)).clone(), t - 1)?,
        eps: (*g.value(step.eps)).clone(),
    })
}

/// Whether a step at level `t` consumes an ancestral noise draw.
pub fn step_draws_noise(sampler: Sampler, t: usize) -> bool {
    sampler == Sampler::Ancestral && t > 1
}

/// One reverse step `x_t → x_{t−1}`, drawing ancestral noise from `rng` when needed.
pub fn reverse_step<R: Rng + ?Sized>(
    xt: &LatentTensor,
    c: &TextEmbedding,
    backend: &dyn DenoiserBackend,
    sched: &NoiseSchedule,
    sampler: Sampler,
    rng: &mut R,
) -> Result<LatentTensor> {
    let t = xt.noise_level;
    let z = step_draws_noise(sampler, t).then(|| Tensor::randn(xt.shape(), rng));
    Ok(reverse_step_with_noise(xt, c, backend, sched, sampler, z.as_ref())?.prev)
}

/// Reverse steps from `x.noise_level` down to 0.
pub fn run_denoise<R: Rng + ?Sized>(
    x: &LatentTensor,
    c: &TextEmbedding,
    backend: &dyn DenoiserBackend,
    sched: &NoiseSchedule,
    sampler: Sampler,
    rng: &mut R,
) -> Result<LatentTensor> {
    if x.noise_level == 0 {
        return Err(param_err("run_denoise needs a noised latent"));
    }
    let mut cur = x.clone();
    while cur.noise_level > 0 {
        cur = reverse_step(&cur, c, backend, sched, sampler, rng)?;
    }
    Ok(cur)
}
