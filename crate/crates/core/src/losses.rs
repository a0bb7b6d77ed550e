//! Objective terms for the learnable foreground latent.
//!
//! Every term has a plain form over tensors and a graph form that records it
//! for differentiation with respect to the learnable latent. The background
//! style branch and the histogram-matched target are constants.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::codec::LatentMask;
use crate::diffusion::{forward_noise_var, DenoiserBackend, LatentTensor, NoiseSchedule, TextEmbedding};
use crate::error::{contract_err, param_err, Error, Result};
use crate::tensor::Tensor;

/// Weights of the total objective and of the stability sub-terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub omega_sty: f64,
    pub omega_c: f64,
    pub omega_sta: f64,
    pub lambda_his: f64,
    pub lambda_tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            omega_sty: 1e7,
            omega_c: 1e1,
            omega_sta: 1.0,
            lambda_his: 1.0,
            lambda_tv: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            omega_sty: 0.0,
            omega_c: 0.0,
            omega_sta: 0.0,
            lambda_his: 0.0,
            lambda_tv: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("omega_sty", self.omega_sty),
            ("omega_c", self.omega_c),
            ("omega_sta", self.omega_sta),
            ("lambda_his", self.lambda_his),
            ("lambda_tv", self.lambda_tv),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(param_err(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-term values of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub style: f64,
    pub content: f64,
    pub histogram: f64,
    pub tv: f64,
    pub weighted_style: f64,
    pub weighted_content: f64,
    pub weighted_stability: f64,
}

impl LossReport {
    pub fn from_terms(w: &LossWeights, style: f64, content: f64, histogram: f64, tv: f64) -> Self {
        let weighted_style = w.omega_sty * style;
        let weighted_content = w.omega_c * content;
        let weighted_stability = w.omega_sta * (w.lambda_his * histogram + w.lambda_tv * tv);
        Self {
            total: weighted_style + weighted_content + weighted_stability,
            style,
            content,
            histogram,
            tv,
            weighted_style,
            weighted_content,
            weighted_stability,
        }
    }

    /// `total = ω_sty·style + ω_c·content + ω_sta·(λ_his·histogram + λ_tv·tv)` to 1e-10 relative.
    pub fn satisfies_decomposition(&self, w: &LossWeights) -> bool {
        let want = w.omega_sty * self.style
            + w.omega_c * self.content
            + w.omega_sta * (w.lambda_his * self.histogram + w.lambda_tv * self.tv);
        (self.total - want).abs() <= 1e-10 * want.abs().max(f64::MIN_POSITIVE)
    }
}

/// Which denoiser output feeds the Gram matrices of the style term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleSource {
    /// The predicted noise ε̂.
    #[default]
    Epsilon,
    /// Every intermediate map from the denoiser's `features`, summed over scales.
    MultiScale,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossOptions {
    pub style_source: StyleSource,
    /// Divide Gram matrices by `c·h·w`.
    pub normalize_gram: bool,
    /// Restrict the content and stability residuals (and the ε-source style
    /// maps) to the latent mask instead of the full latent.
    pub restrict_to_mask: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            style_source: StyleSource::Epsilon,
            normalize_gram: true,
            restrict_to_mask: false,
        }
    }
}

/// Channel Gram matrix `F·Fᵀ` of a `[c, h, w]` map, optionally divided by `c·h·w`.
pub fn gram_var(g: &Graph, f: Var, normalize: bool) -> Result<Var> {
    let shape = g.value(f).shape().to_vec();
    let (c, hw) = match shape[..] {
        [c, h, w] => (c, h * w),
        _ => return Err(Error::Shape(format!("gram needs [c, h, w], got {shape:?}"))),
    };
    let flat = g.reshape(f, &[c, hw])?;
    let prod = g.matmul(flat, g.transpose(flat)?)?;
    Ok(if normalize {
        g.scale(prod, 1.0 / (c * hw) as f64)
    } else {
        prod
    })
}

pub fn gram(f: &Tensor, normalize: bool) -> Result<Tensor> {
    if !f.all_finite() {
        return Err(Error::Numeric("gram of a non-finite feature map".into()));
    }
    let g = Graph::new();
    let v = g.constant(f.clone());
    let out = gram_var(&g, v, normalize)?;
    Ok((*g.value(out)).clone())
}

fn mask_tensor(mask: &LatentMask, channels: usize) -> Tensor {
    let hw = mask.height() * mask.width();
    Tensor::from_fn(&[channels, mask.height(), mask.width()], |i| mask.data()[i % hw])
}

fn style_maps(
    g: &Graph,
    x: Var,
    t: usize,
    c: &TextEmbedding,
    backend: &dyn DenoiserBackend,
    opts: &LossOptions,
    mask: Option<&LatentMask>,
) -> Result<Vec<Var>> {
    let out = backend.forward(g, x, t, c)?;
    Ok(match opts.style_source {
        StyleSource::Epsilon => {
            let eps = match (opts.restrict_to_mask, mask) {
                (true, Some(m)) => {
                    let channels = g.value(out.eps).shape()[0];
                    g.mul(out.eps, g.constant(mask_tensor(m, channels)))?
                }
                _ => out.eps,
            };
            vec![eps]
        }
        StyleSource::MultiScale => out.features,
    })
}

/// Gram matrices of the background branch at level `t`, held as constants.
#[derive(Clone, Debug)]
pub struct StyleTarget {
    pub level: usize,
    pub grams: Vec<Tensor>,
}

impl StyleTarget {
    pub fn compute(
        xg_t: &LatentTensor,
        c: &TextEmbedding,
        backend: &dyn DenoiserBackend,
        opts: &LossOptions,
        mask: Option<&LatentMask>,
    ) -> Result<Self> {
        let g = Graph::new();
        let x = g.constant(xg_t.data.clone());
        let maps = style_maps(&g, x, xg_t.noise_level, c, backend, opts, mask)?;
        let grams = maps
            .into_iter()
            .map(|m| Ok((*g.value(gram_var(&g, m, opts.normalize_gram)?)).clone()))
            .collect::<Result<_>>()?;
        Ok(Self {
            level: xg_t.noise_level,
            grams,
        })
    }
}

/// `Σ_scales ‖G(features(x_L^t)) − G_target‖²_F`.
pub fn style_loss_var(
    g: &Graph,
    xl_t: Var,
    target: &StyleTarget,
    c: &TextEmbedding,
    backend: &dyn DenoiserBackend,
    opts: &LossOptions,
    mask: Option<&LatentMask>,
) -> Result<Var> {
    let maps = style_maps(g, xl_t, target.level, c, backend, opts, mask)?;
    if maps.len() != target.grams.len() {
        return Err(contract_err("style target was computed with a different feature source"));
    }
    let mut total: Option<Var> = None;
    for (m, tg) in maps.into_iter().zip(&target.grams) {
        let gm = gram_var(g, m, opts.normalize_gram)?;
        let term = g.sum_squares(g.offset(gm, &tg.scale(-1.0))?);
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    total.ok_or_else(|| contract_err("backend exposed no style features"))
}

/// Style term for two latents at the same noise level.
pub fn style_loss(
    xl_t: &LatentTensor,
    xg_t: &LatentTensor,
    c: &TextEmbedding,
    backend: &dyn DenoiserBackend,
    opts: &LossOptions,
) -> Result<f64> {
    if xl_t.noise_level != xg_t.noise_level {
        return Err(contract_err(format!(
            "style loss on latents at levels {} and {}",
            xl_t.noise_level, xg_t.noise_level
        )));
    }
    let target = StyleTarget::compute(xg_t, c, backend, opts, None)?;
    let g = Graph::new();
    let x = g.constant(xl_t.data.clone());
    let v = style_loss_var(&g, x, &target, c, backend, opts, None)?;
    Ok(g.scalar(v))
}

fn masked_residual(g: &Graph, x: Var, target: &Tensor, mask: Option<&Tensor>) -> Result<Var> {
    let diff = g.offset(x, &target.scale(-1.0))?;
    match mask {
        Some(m) => g.mul(diff, g.constant(m.clone())),
        None => Ok(diff),
    }
}

/// Mean squared error between the learnable latent and the clean foreground latent.
pub fn content_loss_var(g: &Graph, xl: Var, xi: &Tensor, mask: Option<&Tensor>) -> Result<Var> {
    let r = masked_residual(g, xl, xi, mask)?;
    Ok(g.scale(g.sum_squares(r), 1.0 / xi.len() as f64))
}

pub fn content_loss(xl: &LatentTensor, xi: &LatentTensor) -> Result<f64> {
    xl.expect_level(0, "content loss (learnable)")?;
    xi.expect_level(0, "content loss (foreground)")?;
    xl.data.ensure_same_shape(&xi.data, "content loss")?;
    let g = Graph::new();
    let x = g.constant(xl.data.clone());
    let v = content_loss_var(&g, x, &xi.data, None)?;
    Ok(g.scalar(v))
}

/// Per-channel rank remap of `source` onto the value distribution of `reference`.
///
/// The k-th smallest source value takes the reference value at the same
/// quantile: the k-th smallest when counts agree, linear quantile
/// interpolation otherwise. Ties in the source keep index order.
pub fn hist_match_tensor(source: &Tensor, reference: &Tensor) -> Result<Tensor> {
    let (sc, rc) = (source.shape()[0], reference.shape()[0]);
    if sc != rc {
        return Err(Error::Shape(format!("histogram match across {sc} and {rc} channels")));
    }
    let sn = source.len() / sc.max(1);
    let rn = reference.len() / rc.max(1);
    if sn == 0 || rn == 0 {
        return Err(contract_err("histogram match on an empty channel"));
    }
    let mut out = source.clone();
    for ch in 0..sc {
        let src = &source.data()[ch * sn..(ch + 1) * sn];
        let mut refs = reference.data()[ch * rn..(ch + 1) * rn].to_vec();
        refs.sort_by(f64::total_cmp);
        let mut order: Vec<usize> = (0..sn).collect();
        order.sort_by(|&a, &b| src[a].total_cmp(&src[b]).then(a.cmp(&b)));
        let dst = &mut out.data_mut()[ch * sn..(ch + 1) * sn];
        for (k, &idx) in order.iter().enumerate() {
            dst[idx] = if sn == rn {
                refs[k]
            } else {
                let q = if sn == 1 { 0.5 } else { k as f64 / (sn - 1) as f64 };
                let pos = q * (rn - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(rn - 1);
                let frac = pos - lo as f64;
                refs[lo] * (1.0 - frac) + refs[hi] * frac
            };
        }
    }
    Ok(out)
}

pub fn hist_match(source: &LatentTensor, reference: &LatentTensor) -> Result<LatentTensor> {
    source.expect_level(0, "histogram match source")?;
    reference.expect_level(0, "histogram match reference")?;
    LatentTensor::clean(hist_match_tensor(&source.data, &reference.data)?)
}

/// `mean((x_L − R(x_L))²)` with `R(x_L)` held constant.
pub fn hist_loss_var(g: &Graph, xl: Var, xg: &Tensor, mask: Option<&Tensor>) -> Result<Var> {
    let target = hist_match_tensor(&g.value(xl), xg)?;
    let r = masked_residual(g, xl, &target, mask)?;
    Ok(g.scale(g.sum_squares(r), 1.0 / target.len() as f64))
}

pub fn hist_loss(xl: &LatentTensor, xg: &LatentTensor) -> Result<f64> {
    let target = hist_match(xl, xg)?;
    Ok(xl.data.zip_map(&target.data, |a, b| (a - b).powi(2)).sum() / xl.data.len() as f64)
}

pub fn tv_loss_var(g: &Graph, x: Var, mask: Option<&Tensor>) -> Result<Var> {
    match mask {
        Some(m) => g.total_variation(g.mul(x, g.constant(m.clone()))?),
        None => g.total_variation(x),
    }
}

/// Sum of squared horizontal and vertical neighbour differences, over channels.
pub fn tv_loss(x: &LatentTensor) -> f64 {
    let s = x.shape();
    crate::autograd::tv_value(x.data.data(), s[0], s[1], s[2])
}

pub fn stability_loss(xl: &LatentTensor, xg: &LatentTensor, w: &LossWeights) -> Result<f64> {
    Ok(w.lambda_his * hist_loss(xl, xg)? + w.lambda_tv * tv_loss(xl))
}

/// Everything the total objective needs at one outer iteration, besides `x_L` itself.
pub struct Objective<'a> {
    /// Noise level of the style term.
    pub level: usize,
    /// Fixed noise used to re-noise `x_L` to `level`.
    pub eps: &'a Tensor,
    pub style_target: &'a StyleTarget,
    /// Clean foreground latent `x̂_I`.
    pub content_target: &'a Tensor,
    /// Clean background estimate the histogram is matched to.
    pub stability_reference: &'a Tensor,
    pub text: &'a TextEmbedding,
    pub backend: &'a dyn DenoiserBackend,
    pub sched: &'a NoiseSchedule,
    pub weights: LossWeights,
    pub options: LossOptions,
    pub mask: Option<&'a LatentMask>,
}

impl Objective<'_> {
    /// Records the weighted total for a clean learnable latent `xl`.
    pub fn record(&self, g: &Graph, xl: Var) -> Result<(Var, LossReport)> {
        let w = &self.weights;
        let residual_mask = match (self.options.restrict_to_mask, self.mask) {
            (true, Some(m)) => Some(mask_tensor(m, g.value(xl).shape()[0])),
            _ => None,
        };
        let rm = residual_mask.as_ref();

        let xl_t = forward_noise_var(g, xl, self.level, self.eps, self.sched)?;
        let style = style_loss_var(g, xl_t, self.style_target, self.text, self.backend, &self.options, self.mask)?;
        let content = content_loss_var(g, xl, self.content_target, rm)?;
        let hist = hist_loss_var(g, xl, self.stability_reference, rm)?;
        let tv = tv_loss_var(g, xl, rm)?;

        let stability = g.add(g.scale(hist, w.lambda_his), g.scale(tv, w.lambda_tv))?;
        let total = g.add(
            g.add(g.scale(style, w.omega_sty), g.scale(content, w.omega_c))?,
            g.scale(stability, w.omega_sta),
        )?;
        let report = LossReport::from_terms(w, g.scalar(style), g.scalar(content), g.scalar(hist), g.scalar(tv));
        Ok((total, report))
    }

    /// Loss report and gradient with respect to `xl`.
    pub fn evaluate(&self, xl: &Tensor) -> Result<(LossReport, Tensor)> {
        let g = Graph::new();
        let x = g.variable(xl.clone());
        let (total, report) = self.record(&g, x)?;
        if !report.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at level {}", self.level)));
        }
        let grad = g
            .backward(total)?
            .take(x)
            .unwrap_or_else(|| Tensor::zeros(xl.shape()));
        Ok((report, grad))
    }

    pub fn report(&self, xl: &Tensor) -> Result<LossReport> {
        let g = Graph::new();
        let x = g.constant(xl.clone());
        Ok(self.record(&g, x)?.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{LinearDenoiser, ZeroNoise};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lat(shape: &[usize], data: Vec<f64>) -> LatentTensor {
        LatentTensor::clean(Tensor::new(shape.to_vec(), data).unwrap()).unwrap()
    }

    fn text() -> TextEmbedding {
        TextEmbedding::new(Tensor::zeros(&[1, 8])).unwrap()
    }

    #[test]
    fn gram_identity_case() {
        let f = Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let gm = gram(&f, false).unwrap();
        assert_eq!(gm.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn style_loss_hand_case() {
        let backend = LinearDenoiser::new(1, 1.0, 0.0);
        let xl = LatentTensor::at_level(Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap(), 3).unwrap();
        let xg = LatentTensor::at_level(Tensor::new(vec![1, 1, 2], vec![2.0, 0.0]).unwrap(), 3).unwrap();
        let v = style_loss(&xl, &xg, &text(), &backend, &LossOptions::default()).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        assert_eq!(style_loss(&xl, &xl, &text(), &backend, &LossOptions::default()).unwrap(), 0.0);
        assert_eq!(style_loss(&xl, &xg, &text(), &ZeroNoise::new(1), &LossOptions::default()).unwrap(), 0.0);
        let other = LatentTensor::at_level(xg.data.clone(), 4).unwrap();
        assert!(matches!(
            style_loss(&xl, &other, &text(), &backend, &LossOptions::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn content_loss_cases() {
        let a = lat(&[1, 1, 2], vec![1.0, 2.0]);
        let b = lat(&[1, 1, 2], vec![4.0, 6.0]);
        assert_eq!(content_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(content_loss(&a, &b).unwrap(), 12.5);
        let shifted = lat(&[1, 1, 2], vec![2.0, 3.0]);
        assert_eq!(content_loss(&shifted, &a).unwrap(), 1.0);
        assert!(content_loss(&a, &lat(&[1, 2, 1], vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn hist_match_cases() {
        let s = lat(&[1, 1, 3], vec![1.0, 2.0, 3.0]);
        let r = lat(&[1, 1, 3], vec![10.0, 20.0, 30.0]);
        assert_eq!(hist_match(&s, &r).unwrap().data.data(), &[10.0, 20.0, 30.0]);
        assert_eq!(hist_match(&s, &s).unwrap(), s);
        let flat = lat(&[1, 1, 3], vec![5.0, 5.0, 5.0]);
        assert_eq!(hist_match(&s, &flat).unwrap().data.data(), &[5.0; 3]);
        let shuffled = lat(&[1, 1, 3], vec![3.0, 1.0, 2.0]);
        assert_eq!(hist_match(&shuffled, &r).unwrap().data.data(), &[30.0, 10.0, 20.0]);
    }

    #[test]
    fn hist_match_unequal_counts_interpolates() {
        let s = Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 2.0]).unwrap();
        let r = Tensor::new(vec![1, 1, 2], vec![10.0, 20.0]).unwrap();
        assert_eq!(hist_match_tensor(&s, &r).unwrap().data(), &[10.0, 15.0, 20.0]);
        let empty = Tensor::new(vec![1, 0, 0], vec![]).unwrap();
        assert!(matches!(hist_match_tensor(&empty, &r), Err(Error::Contract(_))));
    }

    #[test]
    fn hist_loss_cases() {
        let xl = lat(&[1, 1, 3], vec![1.0, 2.0, 3.0]);
        let xg = lat(&[1, 1, 3], vec![10.0, 20.0, 30.0]);
        assert_eq!(hist_loss(&xl, &xg).unwrap(), 378.0);
        assert_eq!(hist_loss(&xl, &xl).unwrap(), 0.0);
        let flipped = lat(&[1, 1, 3], vec![-10.0, -20.0, -30.0]);
        assert_ne!(hist_loss(&xl, &flipped).unwrap(), hist_loss(&xl, &xg).unwrap());
    }

    fn brute_tv(x: &[Vec<Vec<f64>>]) -> f64 {
        let mut s = 0.0;
        for ch in x {
            let (h, w) = (ch.len(), ch[0].len());
            for i in 0..h {
                for j in 0..w {
                    for (di, dj) in [(0usize, 1usize), (1, 0)] {
                        if i >= di && j >= dj {
                            s += (ch[i][j] - ch[i - di][j - dj]).powi(2);
                        }
                    }
                }
            }
        }
        s
    }

    #[test]
    fn tv_cases() {
        assert_eq!(tv_loss(&lat(&[2, 3, 3], vec![0.7; 18])), 0.0);
        assert_eq!(tv_loss(&lat(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0])), 10.0);
        let board: Vec<f64> = (0..16).map(|i| if (i / 4 + i % 4) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let nested = vec![(0..4).map(|r| board[r * 4..r * 4 + 4].to_vec()).collect::<Vec<_>>()];
        assert_eq!(brute_tv(&nested), 96.0);
        assert_eq!(tv_loss(&lat(&[1, 4, 4], board)), 96.0);
    }

    #[test]
    fn stability_is_linear_in_lambdas() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xl = LatentTensor::clean(Tensor::randn(&[2, 3, 3], &mut rng)).unwrap();
        let xg = LatentTensor::clean(Tensor::randn(&[2, 3, 3], &mut rng)).unwrap();
        let h = hist_loss(&xl, &xg).unwrap();
        let v = tv_loss(&xl);
        let w = |lh, lt| LossWeights {
            lambda_his: lh,
            lambda_tv: lt,
            ..LossWeights::default()
        };
        assert_eq!(stability_loss(&xl, &xg, &w(0.0, 0.0)).unwrap(), 0.0);
        assert_eq!(stability_loss(&xl, &xg, &w(1.0, 0.0)).unwrap(), h);
        let s = stability_loss(&xl, &xg, &w(2.0, 3.0)).unwrap();
        assert!((s - (2.0 * h + 3.0 * v)).abs() <= 1e-12 * s.abs());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            omega_c: -1.0,
            ..LossWeights::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Parameter(_))));
        let nan = LossWeights {
            lambda_tv: f64::NAN,
            ..LossWeights::default()
        };
        assert!(nan.validate().is_err());
    }

    proptest! {
        #[test]
        fn gram_is_symmetric_psd_and_permutation_invariant(
            vals in prop::collection::vec(-3.0f64..3.0, 12),
            perm_seed in 0u64..1000,
        ) {
            let f = Tensor::new(vec![3, 2, 2], vals).unwrap();
            let gm = gram(&f, true).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!((gm.data()[i * 3 + j] - gm.data()[j * 3 + i]).abs() < 1e-15);
                }
            }
            let probe = [0.3, -1.2, 0.8];
            let mut quad = 0.0;
            for i in 0..3 { for j in 0..3 { quad += probe[i] * gm.data()[i * 3 + j] * probe[j]; } }
            prop_assert!(quad >= -1e-12);

            let mut perm: Vec<usize> = (0..4).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            let permuted = Tensor::from_fn(&[3, 2, 2], |i| f.data()[(i / 4) * 4 + perm[i % 4]]);
            let gp = gram(&permuted, true).unwrap();
            prop_assert!(gm.max_abs_diff(&gp) <= 1e-12);
        }

        #[test]
        fn hist_match_takes_reference_values(
            src in prop::collection::vec(-5.0f64..5.0, 18),
            reference in prop::collection::vec(-5.0f64..5.0, 18),
        ) {
            let s = Tensor::new(vec![2, 3, 3], src).unwrap();
            let r = Tensor::new(vec![2, 3, 3], reference).unwrap();
            let m = hist_match_tensor(&s, &r).unwrap();
            for ch in 0..2 {
                let mut a = m.data()[ch * 9..(ch + 1) * 9].to_vec();
                let mut b = r.data()[ch * 9..(ch + 1) * 9].to_vec();
                a.sort_by(f64::total_cmp);
                b.sort_by(f64::total_cmp);
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn tv_non_negative_zero_iff_constant(vals in prop::collection::vec(-2.0f64..2.0, 18)) {
            let x = lat(&[2, 3, 3], vals.clone());
            let v = tv_loss(&x);
            prop_assert!(v >= 0.0);
            let constant = (0..2).all(|c| vals[c * 9..(c + 1) * 9].iter().all(|&u| u == vals[c * 9]));
            prop_assert_eq!(v == 0.0, constant);
        }
    }
}
