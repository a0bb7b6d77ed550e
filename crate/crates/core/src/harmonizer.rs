//! The optimize-and-composite loop and the second-stage refinement pass.
//!
//! Per outer iteration `i = t_aug … 1` the learnable foreground latent is
//! re-noised to level `i`, optimized for a few rounds against the style,
//! content and stability terms, and then one reverse step is taken on both
//! the background and the foreground branch. The two step outputs are blended
//! by the latent mask.

use std::cell::Cell;
use std::time::Instant;

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{resample_mask, Codec, ImageTensor, LatentMask, PixelMask};
use crate::diffusion::{
    forward_noise, predicted_x0, reverse_step_with_noise, step_draws_noise, DenoiserBackend, LatentTensor,
    NoiseSchedule, Sampler, TextEmbedding, TextEncoder,
};
use crate::error::{contract_err, param_err, shape_err, Error, Result};
use crate::losses::{LossOptions, LossReport, LossWeights, Objective, StyleTarget};
use crate::optim::{Adam, Lbfgs, LbfgsConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Lbfgs,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    /// Gradient steps per round; matches the L-BFGS evaluation budget by default.
    pub steps_per_round: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            steps_per_round: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinementConfig {
    pub enabled: bool,
    /// Fraction of the square side added on each side of the foreground box.
    pub margin_ratio: f64,
    /// Noise level of the refinement pass; `None` means `⌊0.08·T⌋`.
    pub t_ref: Option<usize>,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            margin_ratio: 0.15,
            t_ref: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarmonizeConfig {
    pub weights: LossWeights,
    /// Augmentation strength; `None` means `⌊0.2·T⌋`.
    pub t_aug: Option<usize>,
    pub inner_rounds: usize,
    pub optimizer: OptimizerKind,
    pub lbfgs: LbfgsConfig,
    pub adam: AdamConfig,
    pub sampler: Sampler,
    pub seed: u64,
    pub refinement: RefinementConfig,
    pub prompt: String,
    pub loss: LossOptions,
    /// Unnormalized Gram and the background latent as content target.
    pub strict_paper: bool,
    /// Keep the clean composite after every outer iteration.
    pub keep_snapshots: bool,
}

impl Default for HarmonizeConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            t_aug: None,
            inner_rounds: 5,
            optimizer: OptimizerKind::Lbfgs,
            lbfgs: LbfgsConfig::default(),
            adam: AdamConfig::default(),
            sampler: Sampler::default(),
            seed: 0,
            refinement: RefinementConfig::default(),
            prompt: String::new(),
            loss: LossOptions::default(),
            strict_paper: false,
            keep_snapshots: false,
        }
    }
}

/// Largest augmentation level the guidance recommends for `num_steps`.
pub fn t_aug_guidance(num_steps: usize) -> usize {
    num_steps / 5
}

pub fn default_t_ref(num_steps: usize) -> usize {
    num_steps * 2 / 25
}

impl HarmonizeConfig {
    pub fn resolved_t_aug(&self, num_steps: usize) -> Result<usize> {
        let t = self.t_aug.unwrap_or_else(|| t_aug_guidance(num_steps).max(1));
        if t == 0 || t > num_steps {
            return Err(param_err(format!("t_aug must be in 1..={num_steps}, got {t}")));
        }
        Ok(t)
    }

    pub fn resolved_t_ref(&self, num_steps: usize) -> Result<usize> {
        let t = self.refinement.t_ref.unwrap_or_else(|| default_t_ref(num_steps));
        if t > num_steps {
            return Err(param_err(format!("t_ref must be at most {num_steps}, got {t}")));
        }
        Ok(t)
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            normalize_gram: self.loss.normalize_gram && !self.strict_paper,
            ..self.loss
        }
    }

    pub fn validate(&self, num_steps: usize) -> Result<()> {
        self.weights.validate()?;
        self.resolved_t_aug(num_steps)?;
        self.resolved_t_ref(num_steps)?;
        if self.inner_rounds == 0 {
            return Err(param_err("inner_rounds must be positive"));
        }
        let m = self.refinement.margin_ratio;
        if !(m.is_finite() && m >= 0.0) {
            return Err(param_err(format!("margin_ratio must be finite and non-negative, got {m}")));
        }
        if !(self.adam.lr.is_finite() && self.adam.lr > 0.0) || self.adam.steps_per_round == 0 {
            return Err(param_err("adam needs a positive lr and steps_per_round"));
        }
        if self.lbfgs.history == 0 || self.lbfgs.max_eval == 0 || self.lbfgs.max_iter == 0 {
            return Err(param_err("lbfgs history, max_iter and max_eval must be positive"));
        }
        Ok(())
    }
}

/// How the ambiguous parts of the procedure were resolved for a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignFlags {
    /// `"foreground"` (default) or `"background"` (strict mode).
    pub content_target: String,
    /// Augmentation level follows the loop index.
    pub augmentation_level: String,
    /// How the clean background estimate is carried between iterations.
    pub background_update: String,
    pub shared_step_noise: bool,
    pub fixed_noise_per_iteration: bool,
    pub reverse_steps_per_iteration: usize,
    pub gram_normalized: bool,
    pub optimizer_history_reset_per_iteration: bool,
}

impl DesignFlags {
    fn for_config(cfg: &HarmonizeConfig) -> Self {
        Self {
            content_target: if cfg.strict_paper { "background" } else { "foreground" }.into(),
            augmentation_level: "loop_index".into(),
            background_update: "background_branch_x0_projection".into(),
            shared_step_noise: true,
            fixed_noise_per_iteration: true,
            reverse_steps_per_iteration: 1,
            gram_normalized: cfg.loss_options().normalize_gram,
            optimizer_history_reset_per_iteration: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HarmonizeEvent {
    TAugAboveGuidance { t_aug: usize, guidance: usize },
    LineSearchFallback { level: usize, round: usize },
    RefinementSkipped { reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub level: usize,
    pub round: usize,
    pub evaluations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_secs: f64,
    pub optimize_secs: f64,
    pub refine_secs: f64,
}

#[derive(Clone, Debug)]
pub struct HarmonizeResult {
    pub fused_image: ImageTensor,
    /// Clean composite after the last iteration, before refinement.
    pub fused_latent: LatentTensor,
    pub refined_latent: Option<LatentTensor>,
    /// One report per optimization round, taken at the start of the round.
    pub loss_trace: Vec<LossReport>,
    /// Objective after the last round of the last iteration.
    pub final_report: LossReport,
    pub rounds: Vec<RoundRecord>,
    pub snapshots: Vec<LatentTensor>,
    pub events: Vec<HarmonizeEvent>,
    pub timing: Timing,
    pub config: HarmonizeConfig,
    pub t_aug: usize,
    pub t_ref: usize,
    pub design: DesignFlags,
    pub clamp_fraction: f64,
}

/// Hashes of everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContentHashes {
    pub background: String,
    pub foreground: String,
    pub mask: String,
    pub backend: Option<String>,
    pub fused_image: String,
    pub fused_latent: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: HarmonizeConfig,
    pub t_aug: usize,
    pub t_ref: usize,
    pub num_steps: usize,
    pub codec: String,
    pub design: DesignFlags,
    pub loss_trace: Vec<LossReport>,
    pub final_report: LossReport,
    pub rounds: Vec<RoundRecord>,
    pub events: Vec<HarmonizeEvent>,
    pub timing: Timing,
    pub clamp_fraction: f64,
    pub hashes: ContentHashes,
}

pub fn hash_values(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn hash_mask(mask: &PixelMask) -> String {
    let mut h = Sha256::new();
    h.update((mask.height() as u64).to_le_bytes());
    h.update((mask.width() as u64).to_le_bytes());
    h.update(mask.data());
    hex::encode(h.finalize())
}

/// Reverse-step outputs of both branches plus their blend.
pub struct CompositeStep {
    pub prev: LatentTensor,
    pub background_prev: LatentTensor,
    pub foreground_prev: LatentTensor,
    pub background_eps: Tensor,
    pub foreground_eps: Tensor,
}

/// `DM(x_G^t) ∘ (1 − m) + DM(x_L^t) ∘ m` with one ancestral draw `z` shared by both branches.
#[allow(clippy::too_many_arguments)]
pub fn composite_update_with_noise(
    xg_t: &LatentTensor,
    xl_t: &LatentTensor,
    mask: &LatentMask,
    c: &TextEmbedding,
    backend: &dyn DenoiserBackend,
    sched: &NoiseSchedule,
    sampler: Sampler,
    z: Option<&Tensor>,
) -> Result<CompositeStep> {
    if xg_t.noise_level != xl_t.noise_level {
        return Err(contract_err(format!(
            "composite of latents at levels {} and {}",
            xg_t.noise_level, xl_t.noise_level
        )));
    }
    xg_t.data.ensure_same_shape(&xl_t.data, "composite branches")?;
    let bg = reverse_step_with_noise(xg_t, c, backend, sched, sampler, z)?;
    let fg = reverse_step_with_noise(xl_t, c, backend, sched, sampler, z)?;
    let blended = mask.blend(&bg.prev.data, &fg.prev.data)?;
    Ok(CompositeStep {
        prev: LatentTensor::at_level(blended, xg_t.noise_level - 1)?,
        background_prev: bg.prev,
        foreground_prev: fg.prev,
        background_eps: bg.eps,
        foreground_eps: fg.eps,
    })
}

/// [`composite_update_with_noise`] drawing the shared step noise from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn composite_update<R: rand::Rng + ?Sized>(
    xg_t: &LatentTensor,
    xl_t: &LatentTensor,
    mask: &LatentMask,
    c: &TextEmbedding,
    backend: &dyn DenoiserBackend,
    sched: &NoiseSchedule,
    sampler: Sampler,
    rng: &mut R,
) -> Result<CompositeStep> {
    let z = step_draws_noise(sampler, xg_t.noise_level).then(|| Tensor::randn(xg_t.shape(), rng));
    composite_update_with_noise(xg_t, xl_t, mask, c, backend, sched, sampler, z.as_ref())
}

/// Clean estimate of a level-`t` step output, using the noise prediction that produced it.
fn project_clean(prev: &LatentTensor, eps: &Tensor, sched: &NoiseSchedule) -> Result<LatentTensor> {
    LatentTensor::clean(predicted_x0(&prev.data, eps, prev.noise_level, sched))
}

/// Square around the mask's bounding box, widened by `margin_ratio` of its side on each side.
pub fn refinement_square(mask: &PixelMask, margin_ratio: f64) -> Option<PixelMask> {
    let (y0, x0, y1, x1) = mask.bounding_box()?;
    let side = (y1 - y0 + 1).max(x1 - x0 + 1) as f64;
    let half = side / 2.0 + margin_ratio * side;
    let (cy, cx) = ((y0 + y1 + 1) as f64 / 2.0, (x0 + x1 + 1) as f64 / 2.0);
    let lo = |c: f64| (c - half).floor().max(0.0) as usize;
    let hi = |c: f64, n: usize| ((c + half).ceil() as usize).min(n);
    let (ya, yb) = (lo(cy), hi(cy, mask.height()));
    let (xa, xb) = (lo(cx), hi(cx, mask.width()));
    Some(PixelMask::from_fn(mask.height(), mask.width(), |y, x| {
        (ya..yb).contains(&y) && (xa..xb).contains(&x)
    }))
}

/// A frozen backend together with the text encoder, codec and schedule it was trained with.
#[derive(Clone, Copy)]
pub struct Harmonizer<'a> {
    pub backend: &'a dyn DenoiserBackend,
    pub text: &'a dyn TextEncoder,
    pub codec: &'a dyn Codec,
    pub sched: &'a NoiseSchedule,
}

impl<'a> Harmonizer<'a> {
    pub fn new(
        backend: &'a dyn DenoiserBackend,
        text: &'a dyn TextEncoder,
        codec: &'a dyn Codec,
        sched: &'a NoiseSchedule,
    ) -> Result<Self> {
        let info = backend.info();
        if !info.accepts_schedule(sched) {
            return Err(contract_err(format!(
                "backend trained for {} steps, schedule has {}",
                info.num_steps,
                sched.num_steps()
            )));
        }
        if info.latent_channels != codec.latent_channels() {
            return Err(shape_err(format!(
                "codec {} yields {} channels, backend expects {}",
                codec.name(),
                codec.latent_channels(),
                info.latent_channels
            )));
        }
        Ok(Self {
            backend,
            text,
            codec,
            sched,
        })
    }

    fn check_inputs(&self, background: &ImageTensor, foreground: &ImageTensor, mask: &PixelMask) -> Result<()> {
        if background.height() != foreground.height() || background.width() != foreground.width() {
            return Err(shape_err(format!(
                "background {}×{} and foreground {}×{} differ",
                background.height(),
                background.width(),
                foreground.height(),
                foreground.width()
            )));
        }
        background.check_mask(mask)?;
        if !background.all_finite() || !foreground.all_finite() {
            return Err(Error::Numeric("input image has non-finite values".into()));
        }
        if !self.backend.is_frozen() {
            return Err(contract_err("harmonization needs a frozen backend"));
        }
        Ok(())
    }

    pub fn harmonize(
        &self,
        background: &ImageTensor,
        foreground: &ImageTensor,
        mask: &PixelMask,
        cfg: &HarmonizeConfig,
    ) -> Result<HarmonizeResult> {
        let start = Instant::now();
        let num_steps = self.sched.num_steps();
        cfg.validate(num_steps)?;
        self.check_inputs(background, foreground, mask)?;
        let t_aug = cfg.resolved_t_aug(num_steps)?;
        let t_ref = cfg.resolved_t_ref(num_steps)?;
        let mut events = Vec::new();
        let guidance = t_aug_guidance(num_steps);
        if t_aug > guidance {
            warn!("t_aug {t_aug} exceeds the recommended maximum {guidance}");
            events.push(HarmonizeEvent::TAugAboveGuidance { t_aug, guidance });
        }

        let xg = self.codec.encode(background)?;
        let xi = self.codec.encode(foreground)?;
        self.backend.check_latent(xg.shape())?;
        let lmask = resample_mask(mask, self.codec.factor())?;
        let text = self.text.encode(&cfg.prompt);
        let options = cfg.loss_options();
        let content_target = if cfg.strict_paper { &xg.data } else { &xi.data };

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut xl = xi.data.clone().into_data();
        let mut bg_clean = xg.clone();
        let mut composite = xg.clone();
        let mut lbfgs = Lbfgs::new(cfg.lbfgs);
        let mut loss_trace = Vec::with_capacity(t_aug * cfg.inner_rounds);
        let mut rounds = Vec::with_capacity(t_aug * cfg.inner_rounds);
        let mut snapshots = Vec::new();
        let mut final_report = LossReport::default();
        let shape = xi.shape().to_vec();

        for level in (1..=t_aug).rev() {
            let eps_l = Tensor::randn(&shape, &mut rng);
            let eps_g = Tensor::randn(&shape, &mut rng);
            let z = step_draws_noise(cfg.sampler, level).then(|| Tensor::randn(&shape, &mut rng));

            let xg_t = forward_noise(&bg_clean, level, &eps_g, self.sched)?;
            let style_target = StyleTarget::compute(&xg_t, &text, self.backend, &options, Some(&lmask))?;
            let objective = Objective {
                level,
                eps: &eps_l,
                style_target: &style_target,
                content_target,
                stability_reference: &bg_clean.data,
                text: &text,
                backend: self.backend,
                sched: self.sched,
                weights: cfg.weights,
                options,
                mask: Some(&lmask),
            };
            let diverged = |xl: &[f64], e: Error| match e {
                Error::Numeric(message) => Error::Diverged {
                    level,
                    message,
                    last_finite: Tensor::new(shape.clone(), xl.to_vec()).ok().map(Box::new),
                },
                other => other,
            };

            lbfgs.reset();
            let mut adam = Adam::new(cfg.adam.lr, xl.len());
            for round in 0..cfg.inner_rounds {
                let before = xl.clone();
                let first: Cell<Option<LossReport>> = Cell::new(None);
                let evaluate = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
                    let (report, grad) = objective.evaluate(&Tensor::new(shape.clone(), x.to_vec())?)?;
                    if first.get().is_none() {
                        first.set(Some(report));
                    }
                    Ok((report.total, grad.into_data()))
                };
                let outcome = match cfg.optimizer {
                    OptimizerKind::Lbfgs => lbfgs.minimize_round(&mut xl, &evaluate).map(|s| {
                        (s.evaluations, s.initial_loss, s.final_loss, s.line_search_failed)
                    }),
                    OptimizerKind::Adam => (|| {
                        let mut initial = f64::NAN;
                        let mut last = f64::NAN;
                        for step in 0..cfg.adam.steps_per_round {
                            let (loss, grad) = evaluate(&xl)?;
                            if step == 0 {
                                initial = loss;
                            }
                            last = loss;
                            adam.step(&mut xl, &grad);
                        }
                        Ok((cfg.adam.steps_per_round, initial, last, false))
                    })(),
                };
                let (evaluations, initial_loss, final_loss, failed) = outcome.map_err(|e| diverged(&before, e))?;
                loss_trace.push(first.get().expect("every round evaluates at least once"));
                if failed {
                    let (_, grad) = evaluate(&xl).map_err(|e| diverged(&before, e))?;
                    let l1: f64 = grad.iter().map(|v| v.abs()).sum();
                    let step = (1.0f64).min(1.0 / l1) * cfg.lbfgs.lr;
                    for (x, g) in xl.iter_mut().zip(&grad) {
                        *x -= step * g;
                    }
                    debug!("line search failed at level {level}, round {round}; took a gradient step");
                    events.push(HarmonizeEvent::LineSearchFallback { level, round });
                }
                rounds.push(RoundRecord {
                    level,
                    round,
                    evaluations,
                    initial_loss,
                    final_loss,
                });
            }

            let xl_tensor = Tensor::new(shape.clone(), xl.clone())?;
            if level == 1 {
                final_report = objective.report(&xl_tensor).map_err(|e| diverged(&xl, e))?;
            }
            let xl_t = forward_noise(&LatentTensor::clean(xl_tensor)?, level, &eps_l, self.sched)?;
            let step = composite_update_with_noise(
                &xg_t,
                &xl_t,
                &lmask,
                &text,
                self.backend,
                self.sched,
                cfg.sampler,
                z.as_ref(),
            )
            .map_err(|e| diverged(&xl, e))?;
            bg_clean = project_clean(&step.background_prev, &step.background_eps, self.sched)?;
            let fg_clean = project_clean(&step.foreground_prev, &step.foreground_eps, self.sched)?;
            composite = LatentTensor::clean(lmask.blend(&bg_clean.data, &fg_clean.data)?)?;
            composite.ensure_finite("composite").map_err(|e| diverged(&xl, e))?;
            if cfg.keep_snapshots {
                snapshots.push(composite.clone());
            }
            debug!("level {level}: loss {:.6e}", loss_trace.last().map_or(f64::NAN, |r| r.total));
        }
        let optimize_secs = start.elapsed().as_secs_f64();

        let refine_start = Instant::now();
        let mut refined_latent = None;
        if cfg.refinement.enabled && t_ref > 0 {
            match refinement_square(mask, cfg.refinement.margin_ratio) {
                Some(square) => {
                    refined_latent = Some(self.refine_latent(&composite, &square, t_ref, cfg, &text, &mut rng)?);
                }
                None => {
                    warn!("empty mask; refinement skipped");
                    events.push(HarmonizeEvent::RefinementSkipped {
                        reason: "empty mask".into(),
                    });
                }
            }
        }
        let decoded = self.codec.decode(refined_latent.as_ref().unwrap_or(&composite))?;
        if !decoded.image.all_finite() {
            return Err(Error::Numeric("decoded image is not finite".into()));
        }
        let refine_secs = refine_start.elapsed().as_secs_f64();

        Ok(HarmonizeResult {
            fused_image: decoded.image,
            fused_latent: composite,
            refined_latent,
            loss_trace,
            final_report,
            rounds,
            snapshots,
            events,
            timing: Timing {
                total_secs: start.elapsed().as_secs_f64(),
                optimize_secs,
                refine_secs,
            },
            config: cfg.clone(),
            t_aug,
            t_ref,
            design: DesignFlags::for_config(cfg),
            clamp_fraction: decoded.clamp_fraction,
        })
    }

    /// Noise the whole latent to `t_ref` and denoise it with the prompt alone,
    /// resetting the outside of `square` to the matching-level noised input at every step.
    pub fn refine_latent<R: rand::Rng + ?Sized>(
        &self,
        fused: &LatentTensor,
        square: &PixelMask,
        t_ref: usize,
        cfg: &HarmonizeConfig,
        text: &TextEmbedding,
        rng: &mut R,
    ) -> Result<LatentTensor> {
        fused.expect_level(0, "refinement input")?;
        if t_ref == 0 {
            return Ok(fused.clone());
        }
        let lsquare = resample_mask(square, self.codec.factor())?;
        let eps = Tensor::randn(fused.shape(), rng);
        let mut x = forward_noise(fused, t_ref, &eps, self.sched)?;
        while x.noise_level > 0 {
            let t = x.noise_level;
            let z = step_draws_noise(cfg.sampler, t).then(|| Tensor::randn(fused.shape(), rng));
            let prev = reverse_step_with_noise(&x, text, self.backend, self.sched, cfg.sampler, z.as_ref())?.prev;
            let outside = if t == 1 {
                fused.clone()
            } else {
                forward_noise(fused, t - 1, &eps, self.sched)?
            };
            x = LatentTensor::at_level(lsquare.blend(&outside.data, &prev.data)?, t - 1)?;
        }
        x.ensure_finite("refined latent")?;
        Ok(x)
    }

    /// Second-stage refinement of a clean fused latent; returns the decoded image.
    pub fn refine(&self, fused: &LatentTensor, mask: &PixelMask, cfg: &HarmonizeConfig) -> Result<ImageTensor> {
        let t_ref = cfg.resolved_t_ref(self.sched.num_steps())?;
        let Some(square) = refinement_square(mask, cfg.refinement.margin_ratio) else {
            warn!("empty mask; refinement skipped");
            return Ok(self.codec.decode(fused)?.image);
        };
        let text = self.text.encode(&cfg.prompt);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7265_6669);
        let refined = self.refine_latent(fused, &square, t_ref, cfg, &text, &mut rng)?;
        Ok(self.codec.decode(&refined)?.image)
    }
}

impl HarmonizeResult {
    pub fn run_record(
        &self,
        h: &Harmonizer<'_>,
        background: &ImageTensor,
        foreground: &ImageTensor,
        mask: &PixelMask,
    ) -> RunRecord {
        RunRecord {
            config: self.config.clone(),
            t_aug: self.t_aug,
            t_ref: self.t_ref,
            num_steps: h.sched.num_steps(),
            codec: h.codec.name(),
            design: self.design.clone(),
            loss_trace: self.loss_trace.clone(),
            final_report: self.final_report,
            rounds: self.rounds.clone(),
            events: self.events.clone(),
            timing: self.timing,
            clamp_fraction: self.clamp_fraction,
            hashes: ContentHashes {
                background: hash_values(background.data()),
                foreground: hash_values(foreground.data()),
                mask: hash_mask(mask),
                backend: h.backend.snapshot_hash(),
                fused_image: hash_values(self.fused_image.data()),
                fused_latent: hash_values(self.fused_latent.data.data()),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::SpaceToDepth;
    use crate::metrics::{max_abs_diff_region, Region};
    use crate::testing::{LinearDenoiser, ReferenceOracle, ZeroNoise};
    use crate::toy::StubTextEncoder;

    fn text() -> TextEmbedding {
        StubTextEncoder::new(8, 0).encode("")
    }

    fn latent(seed: u64, level: usize) -> LatentTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentTensor::at_level(Tensor::randn(&[3, 4, 4], &mut rng), level).unwrap()
    }

    fn half_mask() -> LatentMask {
        resample_mask(&PixelMask::from_fn(4, 4, |_, x| x < 2), 1).unwrap()
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(20, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn composite_degenerate_masks() {
        let (s, b) = (sched(), LinearDenoiser::new(3, 0.3, 0.1));
        let (xg, xl) = (latent(1, 5), latent(2, 5));
        let z = Tensor::randn(&[3, 4, 4], &mut ChaCha8Rng::seed_from_u64(3));
        let step = |m: &LatentMask, a: &LatentTensor, c: &LatentTensor| {
            composite_update_with_noise(a, c, m, &text(), &b, &s, Sampler::Ancestral, Some(&z))
                .unwrap()
                .prev
        };
        let direct = |x: &LatentTensor| {
            reverse_step_with_noise(x, &text(), &b, &s, Sampler::Ancestral, Some(&z))
                .unwrap()
                .prev
        };
        assert_eq!(step(&LatentMask::filled(4, 4, false), &xg, &xl), direct(&xg));
        assert_eq!(step(&LatentMask::filled(4, 4, true), &xg, &xl), direct(&xl));
        assert_eq!(step(&half_mask(), &xg, &xg), step(&LatentMask::filled(4, 4, true), &xg, &xg));
    }

    #[test]
    fn composite_rejects_mismatches() {
        let (s, b) = (sched(), ZeroNoise::new(3));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = composite_update(&latent(1, 5), &latent(2, 4), &half_mask(), &text(), &b, &s, Sampler::Ancestral, &mut rng);
        assert!(matches!(r, Err(Error::Contract(_))));
        let small = LatentMask::filled(2, 2, true);
        let r = composite_update(&latent(1, 5), &latent(2, 5), &small, &text(), &b, &s, Sampler::Ancestral, &mut rng);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn t_aug_resolution_and_guidance() {
        let cfg = HarmonizeConfig::default();
        assert_eq!(cfg.resolved_t_aug(100).unwrap(), 20);
        assert_eq!(cfg.resolved_t_ref(100).unwrap(), 8);
        let bad = HarmonizeConfig {
            t_aug: Some(0),
            ..HarmonizeConfig::default()
        };
        assert!(matches!(bad.validate(100), Err(Error::Parameter(_))));
        let over = HarmonizeConfig {
            t_aug: Some(101),
            ..HarmonizeConfig::default()
        };
        assert!(over.validate(100).is_err());
        assert!(serde_json::from_str::<HarmonizeConfig>(r#"{"t_agu": 3}"#).is_err());
    }

    fn fixture(size: usize) -> (ImageTensor, ImageTensor, PixelMask) {
        let bg = ImageTensor::from_fn(size, size, |y, x| [(x % 4) as f64 / 4.0, 0.5, (y % 2) as f64 / 2.0]);
        let fg = ImageTensor::from_fn(size, size, |y, x| [0.25, (x + y) as f64 / (2 * size) as f64, 0.75]);
        let mask = PixelMask::from_fn(size, size, |y, x| (2..6).contains(&y) && (3..7).contains(&x));
        (bg, fg, mask)
    }

    #[test]
    fn oracle_backend_with_zero_weights_returns_background() {
        let (bg, fg, _) = fixture(8);
        let codec = SpaceToDepth::identity();
        let s = sched();
        let oracle = ReferenceOracle::new(codec.encode(&bg).unwrap().data, s.clone());
        let enc = StubTextEncoder::new(8, 0);
        let h = Harmonizer::new(&oracle, &enc, &codec, &s).unwrap();
        let cfg = HarmonizeConfig {
            weights: LossWeights::zero(),
            sampler: Sampler::Deterministic,
            t_aug: Some(4),
            ..HarmonizeConfig::default()
        };
        let empty = PixelMask::from_fn(8, 8, |_, _| false);
        let out = h.harmonize(&bg, &fg, &empty, &cfg).unwrap();
        for (a, b) in out.fused_image.data().iter().zip(bg.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out.loss_trace.len(), 4 * 5);
        assert!(out
            .events
            .iter()
            .any(|e| matches!(e, HarmonizeEvent::RefinementSkipped { .. })));
    }

    #[test]
    fn content_starts_at_zero_and_trace_has_expected_length() {
        let (bg, fg, mask) = fixture(8);
        let codec = SpaceToDepth::identity();
        let s = sched();
        let b = LinearDenoiser::new(3, 0.5, 0.0);
        let enc = StubTextEncoder::new(8, 0);
        let h = Harmonizer::new(&b, &enc, &codec, &s).unwrap();
        let cfg = HarmonizeConfig {
            t_aug: Some(3),
            inner_rounds: 2,
            ..HarmonizeConfig::default()
        };
        let out = h.harmonize(&bg, &fg, &mask, &cfg).unwrap();
        assert_eq!(out.loss_trace.len(), 6);
        assert_eq!(out.loss_trace[0].content, 0.0);
        assert!(out.loss_trace.iter().all(|r| r.satisfies_decomposition(&cfg.weights)));
        assert!(out.fused_image.all_finite());
    }

    #[test]
    fn outside_mask_matches_background_only_run() {
        let (bg, fg, mask) = fixture(8);
        let codec = SpaceToDepth::identity();
        let s = sched();
        let b = LinearDenoiser::new(3, 0.4, 0.05);
        let enc = StubTextEncoder::new(8, 0);
        let h = Harmonizer::new(&b, &enc, &codec, &s).unwrap();
        let cfg = HarmonizeConfig {
            t_aug: Some(4),
            inner_rounds: 1,
            refinement: RefinementConfig {
                enabled: false,
                ..RefinementConfig::default()
            },
            ..HarmonizeConfig::default()
        };
        let with_fg = h.harmonize(&bg, &fg, &mask, &cfg).unwrap();
        let empty = PixelMask::from_fn(8, 8, |_, _| false);
        let bg_only = h.harmonize(&bg, &fg, &empty, &cfg).unwrap();
        let d = max_abs_diff_region(&with_fg.fused_image, &bg_only.fused_image, &mask, Region::Outside).unwrap();
        assert!(d <= 1e-12, "{d}");
    }

    #[test]
    fn refine_identity_cases() {
        let (bg, _, mask) = fixture(8);
        let codec = SpaceToDepth::identity();
        let s = sched();
        let b = ZeroNoise::new(3);
        let enc = StubTextEncoder::new(8, 0);
        let h = Harmonizer::new(&b, &enc, &codec, &s).unwrap();
        let fused = codec.encode(&bg).unwrap();
        let zero = HarmonizeConfig {
            refinement: RefinementConfig {
                t_ref: Some(0),
                ..RefinementConfig::default()
            },
            ..HarmonizeConfig::default()
        };
        assert_eq!(h.refine(&fused, &mask, &zero).unwrap(), bg);

        let det = HarmonizeConfig {
            sampler: Sampler::Deterministic,
            ..HarmonizeConfig::default()
        };
        let out = h.refine(&fused, &mask, &det).unwrap();
        let square = refinement_square(&mask, det.refinement.margin_ratio).unwrap();
        assert_eq!(max_abs_diff_region(&out, &bg, &square, Region::Outside).unwrap(), 0.0);
    }

    #[test]
    fn square_covers_box_and_clamps() {
        let mask = PixelMask::from_fn(10, 10, |y, x| (3..5).contains(&y) && (3..7).contains(&x));
        let sq = refinement_square(&mask, 0.0).unwrap();
        assert_eq!(sq.bounding_box(), Some((2, 3, 5, 6)));
        let full = PixelMask::from_fn(10, 10, |_, _| true);
        assert_eq!(refinement_square(&full, 0.0).unwrap(), full);
        assert_eq!(refinement_square(&mask, 5.0).unwrap(), full);
        assert!(refinement_square(&PixelMask::from_fn(4, 4, |_, _| false), 0.1).is_none());
    }
}
