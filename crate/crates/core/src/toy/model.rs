use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::diffusion::{BackendInfo, DenoiserBackend, DenoiserOutput, NoiseSchedule, TextEmbedding};
use crate::error::{contract_err, shape_err, Result};
use crate::tensor::Tensor;

/// Architecture of the toy denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub in_channels: usize,
    /// Channel width at full resolution; the two coarser levels use twice this.
    pub base_width: usize,
    pub text_dim: usize,
    pub attn_dim: usize,
    pub time_dim: usize,
    /// Diffusion steps the model is trained for.
    pub num_steps: usize,
    pub text_seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_width: 32,
            text_dim: 32,
            attn_dim: 32,
            time_dim: 32,
            num_steps: 100,
            text_seed: 0,
        }
    }
}

impl ToyConfig {
    fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (c, w, w2) = (self.in_channels, self.base_width, 2 * self.base_width);
        let td = self.time_dim;
        vec![
            ("time.w", vec![td, td]),
            ("time.b", vec![1, td]),
            ("conv_in.w", vec![w, c, 3, 3]),
            ("conv_in.b", vec![w]),
            ("enc0.w", vec![w, w, 3, 3]),
            ("enc0.b", vec![w]),
            ("enc0.t", vec![td, w]),
            ("enc1.w", vec![w2, w, 3, 3]),
            ("enc1.b", vec![w2]),
            ("enc1.t", vec![td, w2]),
            ("enc2.w", vec![w2, w2, 3, 3]),
            ("enc2.b", vec![w2]),
            ("enc2.t", vec![td, w2]),
            ("attn.q", vec![w2, self.attn_dim]),
            ("attn.k", vec![self.text_dim, self.attn_dim]),
            ("attn.v", vec![self.text_dim, w2]),
            ("dec1.w", vec![w2, w2, 3, 3]),
            ("dec1.b", vec![w2]),
            ("dec0.w", vec![w, w2, 3, 3]),
            ("dec0.b", vec![w]),
            ("dec0b.w", vec![w, w, 3, 3]),
            ("dec0b.b", vec![w]),
            ("conv_out.w", vec![c, w, 3, 3]),
            ("conv_out.b", vec![c]),
        ]
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.num_steps, 1e-4, 0.02)
    }
}

/// Three-level convolutional encoder-decoder with one cross-attention block
/// at the bottleneck. Latent sides must be multiples of 4.
#[derive(Clone, PartialEq)]
pub struct ToyDenoiser {
    config: ToyConfig,
    names: Vec<&'static str>,
    params: Vec<Tensor>,
    frozen: bool,
}

impl fmt::Debug for ToyDenoiser {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ToyDenoiser")
            .field("config", &self.config)
            .field("parameters", &self.num_parameters())
            .field("frozen", &self.frozen)
            .finish()
    }
}

impl ToyDenoiser {
    /// Fresh, trainable weights: scaled Gaussian init, zero biases and a zero
    /// output convolution so the initial prediction is `ε̂ = 0`.
    pub fn init(config: ToyConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.param_shapes() {
            let t = if name.ends_with(".b") || name == "conv_out.w" {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = match name {
                    n if n.ends_with(".w") && shape.len() == 4 => shape[1] * 9,
                    _ => shape[0],
                };
                let gain = if name.starts_with("attn") { 1.0 } else { 2.0 };
                Tensor::randn(&shape, &mut rng).scale((gain / fan_in as f64).sqrt())
            };
            names.push(name);
            params.push(t);
        }
        Self {
            config,
            names,
            params,
            frozen: false,
        }
    }

    pub(crate) fn from_parts(config: ToyConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let expected = config.param_shapes();
        if expected.len() != named.len() {
            return Err(shape_err(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                named.len()
            )));
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        for ((name, shape), (got_name, t)) in expected.into_iter().zip(named) {
            if name != got_name || t.shape() != shape.as_slice() {
                return Err(shape_err(format!(
                    "parameter {got_name} {:?} does not match {name} {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            params.push(t);
        }
        Ok(Self {
            config,
            names,
            params,
            frozen: true,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn named_parameters(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        self.names.iter().copied().zip(&self.params)
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Mutable access for training; refused once frozen.
    pub fn parameters_mut(&mut self) -> Result<&mut [Tensor]> {
        if self.frozen {
            return Err(contract_err("toy denoiser is frozen; parameters are read-only"));
        }
        Ok(&mut self.params)
    }

    pub fn set_parameter(&mut self, name: &str, value: Tensor) -> Result<()> {
        let idx = self
            .names
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| shape_err(format!("unknown parameter {name}")))?;
        if value.shape() != self.params[idx].shape() {
            return Err(shape_err(format!("parameter {name} shape mismatch")));
        }
        self.parameters_mut()?[idx] = value;
        Ok(())
    }

    pub(crate) fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    /// SHA-256 over the architecture and every parameter's bytes, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, t) in self.named_parameters() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Inserts the parameters into `g`, as variables when `trainable`.
    pub(crate) fn bind(&self, g: &Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.variable(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect()
    }

    fn time_features(&self, t: usize) -> Tensor {
        let half = self.config.time_dim / 2;
        let mut v = Vec::with_capacity(self.config.time_dim);
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            v.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            v.push((t as f64 * freq).cos());
        }
        v.resize(self.config.time_dim, 0.0);
        Tensor::new(vec![1, self.config.time_dim], v).expect("sized")
    }

    /// Forward pass against already-bound parameters.
    pub(crate) fn forward_bound(
        &self,
        g: &Graph,
        p: &[Var],
        x: Var,
        t: usize,
        c: &TextEmbedding,
    ) -> Result<DenoiserOutput> {
        let shape = g.value(x).shape().to_vec();
        self.check_latent(&shape)?;
        if c.dim() != self.config.text_dim {
            return Err(shape_err(format!(
                "text embedding width {} vs model {}",
                c.dim(),
                self.config.text_dim
            )));
        }
        let [time_w, time_b, cin_w, cin_b, e0w, e0b, e0t, e1w, e1b, e1t, e2w, e2b, e2t, aq, ak, av, d1w, d1b, d0w, d0b, d0bw, d0bb, ow, ob] =
            p
        else {
            return Err(shape_err("parameter list does not match the toy architecture"));
        };

        let tf = g.constant(self.time_features(t));
        let temb = g.silu(g.add(g.matmul(tf, *time_w)?, *time_b)?);
        let time_bias = |proj: Var, channels: usize| -> Result<Var> {
            g.reshape(g.matmul(temb, proj)?, &[channels])
        };
        let w = self.config.base_width;

        let h = g.conv2d(x, *cin_w, *cin_b)?;
        let h0 = g.silu(g.channel_bias(g.conv2d(h, *e0w, *e0b)?, time_bias(*e0t, w)?)?);
        let h1 = g.silu(g.channel_bias(
            g.conv2d(g.avg_pool2(h0)?, *e1w, *e1b)?,
            time_bias(*e1t, 2 * w)?,
        )?);
        let h2 = g.silu(g.channel_bias(
            g.conv2d(g.avg_pool2(h1)?, *e2w, *e2b)?,
            time_bias(*e2t, 2 * w)?,
        )?);

        let text = g.constant(c.tokens().clone());
        let attn = cross_attention(g, h2, text, *aq, *ak, *av)?;
        let mid = g.add(h2, attn)?;

        let up1 = g.add(g.upsample2(mid)?, h1)?;
        let d1 = g.silu(g.conv2d(up1, *d1w, *d1b)?);
        let d0 = g.add(g.silu(g.conv2d(g.upsample2(d1)?, *d0w, *d0b)?), h0)?;
        let d0b = g.silu(g.conv2d(d0, *d0bw, *d0bb)?);
        let eps = g.conv2d(d0b, *ow, *ob)?;
        Ok(DenoiserOutput {
            eps,
            features: vec![mid, d1, d0b],
        })
    }
}

impl DenoiserBackend for ToyDenoiser {
    fn info(&self) -> BackendInfo {
        BackendInfo {
            latent_channels: self.config.in_channels,
            spatial_multiple: 4,
            num_steps: self.config.num_steps,
            text_dim: self.config.text_dim,
        }
    }

    fn forward(&self, g: &Graph, x: Var, t: usize, c: &TextEmbedding) -> Result<DenoiserOutput> {
        let p = self.bind(g, false);
        self.forward_bound(g, &p, x, t, c)
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn snapshot_hash(&self) -> Option<String> {
        Some(self.content_hash())
    }
}

/// `Softmax((X·W_Q)(E·W_K)ᵀ / √d) · (E·W_V)` for an image map `X` (`[c, h, w]`,
/// flattened to positions × channels) and text tokens `E` (`[L, d_txt]`).
/// Returns a `[c_v, h, w]` map where `c_v` is the width of `W_V`.
pub fn cross_attention(g: &Graph, image: Var, text: Var, wq: Var, wk: Var, wv: Var) -> Result<Var> {
    let shape = g.value(image).shape().to_vec();
    let (c, h, w) = match shape[..] {
        [c, h, w] => (c, h, w),
        _ => return Err(shape_err(format!("cross_attention image {shape:?}"))),
    };
    let (q_shape, k_shape, v_shape) = (
        g.value(wq).shape().to_vec(),
        g.value(wk).shape().to_vec(),
        g.value(wv).shape().to_vec(),
    );
    let text_dim = g.value(text).shape()[1];
    if q_shape[0] != c || k_shape[0] != text_dim || v_shape[0] != text_dim || q_shape[1] != k_shape[1] {
        return Err(shape_err(format!(
            "cross_attention projections {q_shape:?}/{k_shape:?}/{v_shape:?} for image channels {c}, text width {text_dim}"
        )));
    }
    let d = q_shape[1] as f64;
    let positions = g.transpose(g.reshape(image, &[c, h * w])?)?;
    let q = g.matmul(positions, wq)?;
    let k = g.matmul(text, wk)?;
    let v = g.matmul(text, wv)?;
    let scores = g.scale(g.matmul(q, g.transpose(k)?)?, 1.0 / d.sqrt());
    let weights = g.softmax_rows(scores)?;
    let out = g.matmul(weights, v)?;
    g.reshape(g.transpose(out)?, &[v_shape[1], h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::StubTextEncoder;

    fn small() -> ToyConfig {
        ToyConfig {
            base_width: 4,
            text_dim: 8,
            attn_dim: 4,
            time_dim: 8,
            ..ToyConfig::default()
        }
    }

    #[test]
    fn single_token_attention_broadcasts_values() {
        let g = Graph::new();
        let img = g.constant(Tensor::from_fn(&[2, 2, 3], |i| i as f64 * 0.3 - 1.0));
        let text = g.constant(Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap());
        let wq = g.constant(Tensor::from_fn(&[2, 4], |i| (i as f64).sin()));
        let wk = g.constant(Tensor::from_fn(&[3, 4], |i| (i as f64).cos()));
        let wv = g.constant(Tensor::from_fn(&[3, 2], |i| i as f64 - 2.0));
        let out = g.value(cross_attention(&g, img, text, wq, wk, wv).unwrap());
        // E·W_V = [0.5·-2 + -1·0 + 2·2, 0.5·-1 + -1·1 + 2·3] = [3, 4.5]
        for p in 0..6 {
            assert!((out.data()[p] - 3.0).abs() < 1e-12);
            assert!((out.data()[6 + p] - 4.5).abs() < 1e-12);
        }

        let twice = g.constant(Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.5, -1.0, 2.0]).unwrap());
        let out2 = g.value(cross_attention(&g, img, twice, wq, wk, wv).unwrap());
        assert!(out.max_abs_diff(&out2) < 1e-12);
    }

    #[test]
    fn scalar_attention_by_hand() {
        // two positions with features 1 and 2; tokens 1 and -1; W_Q = 2, W_K = 1, W_V = 3
        let g = Graph::new();
        let img = g.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap());
        let text = g.constant(Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap());
        let wq = g.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let wk = g.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let wv = g.constant(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let out = g.value(cross_attention(&g, img, text, wq, wk, wv).unwrap());
        let expected = |q: f64| {
            let (s1, s2) = (q, -q);
            let (e1, e2) = (s1.exp(), s2.exp());
            (e1 * 3.0 + e2 * -3.0) / (e1 + e2)
        };
        assert!((out.data()[0] - expected(2.0)).abs() < 1e-12);
        assert!((out.data()[1] - expected(4.0)).abs() < 1e-12);
    }

    #[test]
    fn attention_rejects_bad_projection() {
        let g = Graph::new();
        let img = g.constant(Tensor::zeros(&[2, 2, 2]));
        let text = g.constant(Tensor::zeros(&[1, 3]));
        let wq = g.constant(Tensor::zeros(&[3, 4]));
        let wk = g.constant(Tensor::zeros(&[3, 4]));
        let wv = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            cross_attention(&g, img, text, wq, wk, wv),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn output_shape_and_zero_init() {
        let model = ToyDenoiser::init(small(), 1).freeze();
        let text = StubTextEncoder::new(8, 0).embed("disc");
        let x = Tensor::from_fn(&[3, 8, 12], |i| (i as f64 * 0.1).sin());
        let eps = model.predict(&x, 5, &text).unwrap();
        assert_eq!(eps.shape(), &[3, 8, 12]);
        assert!(eps.data().iter().all(|&v| v == 0.0));
        assert!(model.predict(&Tensor::zeros(&[3, 6, 8]), 5, &text).is_err());
    }

    #[test]
    fn frozen_model_refuses_mutation() {
        let mut model = ToyDenoiser::init(small(), 1).freeze();
        assert!(matches!(model.parameters_mut(), Err(crate::Error::Contract(_))));
        let w = Tensor::zeros(&[3]);
        assert!(matches!(model.set_parameter("conv_out.b", w), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn hash_tracks_parameters() {
        let a = ToyDenoiser::init(small(), 1);
        let b = ToyDenoiser::init(small(), 1);
        let c = ToyDenoiser::init(small(), 2);
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), c.content_hash());
        assert_eq!(a.content_hash().len(), 64);
    }

    /// Perturb the output layer so the network is not trivially zero, then
    /// check input gradients against central differences.
    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut model = ToyDenoiser::init(small(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        model
            .set_parameter("conv_out.w", Tensor::randn(&[3, 4, 3, 3], &mut rng).scale(0.3))
            .unwrap();
        let model = model.freeze();
        let text = StubTextEncoder::new(8, 0).embed("disc stripes");
        let x = Tensor::randn(&[3, 4, 4], &mut rng);
        let probe = Tensor::randn(&[3, 4, 4], &mut rng);
        let objective = |g: &Graph, xv: Var| {
            let out = model.forward(g, xv, 17, &text).unwrap();
            let p = g.constant(probe.clone());
            g.sum(g.mul(out.eps, p).unwrap())
        };
        let g = Graph::new();
        let xv = g.variable(x.clone());
        let o = objective(&g, xv);
        let grad = g.backward(o).unwrap().get(xv).unwrap().clone();
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let eval = |d: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += d;
                let g = Graph::new();
                let xv = g.constant(xp);
                let o = objective(&g, xv);
                g.scalar(o)
            };
            let fd = (eval(1e-5) - eval(-1e-5)) / 2e-5;
            let a = grad.data()[i];
            worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-6));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
