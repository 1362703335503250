//! Conditional denoiser: a patch encoder turns the conditioning image into
//! tokens, a sinusoidal-plus-MLP embedding encodes the timestep, a
//! conditioning bridge enhances the tokens and modulates them with FiLM
//! parameters derived from the time embedding, and a dual-head UNet predicts
//! noise and auxiliary segmentation logits from the shared decoder features.
//!
//! Parameters live in a named [`Params`] store; the model owns only its
//! configuration and fetches tensors by name on every forward pass, so the
//! optimizer may replace leaves freely. Cross-attention output projections
//! start at zero: the network begins as an unconditional denoiser and the
//! conditioning path opens up through training.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::checkpoint;
use crate::losses::NoisePredictor;
use crate::rng::rng_for;
use crate::tensor::{c, Params, Real, Tensor};
use crate::{Error, Result};

const NORM_EPS: f64 = 1e-5;
const GROUPS: usize = 8;

/// Patch-token image encoder settings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { patch_size: 8, embed_dim: 64, depth: 2, heads: 4 }
    }
}

/// UNet backbone settings. `attention_levels` lists the decoder levels
/// (0 = finest) that receive token cross-attention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub attention_levels: Vec<usize>,
    pub time_embed_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            attention_levels: vec![1, 2],
            time_embed_dim: 128,
        }
    }
}

/// Full model configuration for square single-channel masks and images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub encoder: EncoderConfig,
    pub unet: UNetConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { image_size: 32, encoder: EncoderConfig::default(), unet: UNetConfig::default() }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        let e = &self.encoder;
        let u = &self.unet;
        if e.patch_size == 0 {
            return cfg("model.encoder.patch_size must be positive".into());
        }
        if e.heads == 0 {
            return cfg("model.encoder.heads must be positive".into());
        }
        if e.embed_dim == 0 || e.embed_dim % e.heads != 0 {
            return cfg(format!(
                "model.encoder.embed_dim {} must be a positive multiple of model.encoder.heads {}",
                e.embed_dim, e.heads
            ));
        }
        if e.depth == 0 {
            return cfg("model.encoder.depth must be positive".into());
        }
        if u.base_channels == 0 || u.base_channels % GROUPS != 0 {
            return cfg(format!(
                "model.unet.base_channels {} must be a positive multiple of {GROUPS} (group norm)",
                u.base_channels
            ));
        }
        if u.channel_multipliers.is_empty() {
            return cfg("model.unet.channel_multipliers must be nonempty".into());
        }
        if let Some(&m) = u.channel_multipliers.iter().find(|&&m| m == 0) {
            return cfg(format!("model.unet.channel_multipliers entry {m} must be positive"));
        }
        let levels = u.channel_multipliers.len();
        for (i, &l) in u.attention_levels.iter().enumerate() {
            if l >= levels {
                return cfg(format!(
                    "model.unet.attention_levels has level {l} but the UNet has {levels} levels"
                ));
            }
            if u.attention_levels[..i].contains(&l) {
                return cfg(format!("model.unet.attention_levels lists level {l} twice"));
            }
            let ch = u.base_channels * u.channel_multipliers[l];
            if ch % e.heads != 0 {
                return cfg(format!(
                    "cross-attention at level {l} has {ch} channels, not divisible by model.encoder.heads {}",
                    e.heads
                ));
            }
        }
        if u.time_embed_dim == 0 || u.time_embed_dim % 2 != 0 {
            return cfg(format!(
                "model.unet.time_embed_dim {} must be positive and even",
                u.time_embed_dim
            ));
        }
        if self.image_size == 0 || self.image_size % e.patch_size != 0 {
            return cfg(format!(
                "model.image_size {} must be a positive multiple of model.encoder.patch_size {}",
                self.image_size, e.patch_size
            ));
        }
        let stride = 1usize << (levels - 1);
        if self.image_size % stride != 0 {
            return cfg(format!(
                "model.image_size {} must be divisible by 2^(levels-1) = {stride}",
                self.image_size
            ));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.unet.base_channels * self.unet.channel_multipliers[level]
    }

    fn num_patches(&self) -> usize {
        let g = self.image_size / self.encoder.patch_size;
        g * g
    }
}

/// Predictions from one forward pass; both heads read the same shared
/// decoder feature map and match the input mask shape.
#[derive(Debug, Clone)]
pub struct DualHeadOutput<F: Real> {
    pub eps_hat: Tensor<F>,
    pub aux_logits: Tensor<F>,
}

/// Raw sinusoidal timestep features: first half sine, second half cosine,
/// band `i` at frequency 10000^(-i/(dim/2)).
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("time embedding dim {dim} must be positive and even")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = 10000f64.powf(i as f64 / half as f64);
        let arg = t as f64 / freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Ok(out)
}

enum Init {
    Kaiming(usize),
    Normal(f64),
    Zero,
    One,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn spec(specs: &mut Vec<ParamSpec>, name: String, shape: &[usize], init: Init) {
    specs.push(ParamSpec { name, shape: shape.to_vec(), init });
}

fn res_specs(specs: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize, td: usize) {
    spec(specs, format!("{prefix}norm1.g"), &[cin], Init::One);
    spec(specs, format!("{prefix}norm1.b"), &[cin], Init::Zero);
    spec(specs, format!("{prefix}conv1.w"), &[cout, cin, 3, 3], Init::Kaiming(9 * cin));
    spec(specs, format!("{prefix}conv1.b"), &[cout], Init::Zero);
    spec(specs, format!("{prefix}temb.w"), &[td, cout], Init::Kaiming(td));
    spec(specs, format!("{prefix}temb.b"), &[cout], Init::Zero);
    spec(specs, format!("{prefix}norm2.g"), &[cout], Init::One);
    spec(specs, format!("{prefix}norm2.b"), &[cout], Init::Zero);
    spec(specs, format!("{prefix}conv2.w"), &[cout, cout, 3, 3], Init::Kaiming(9 * cout));
    spec(specs, format!("{prefix}conv2.b"), &[cout], Init::Zero);
    if cin != cout {
        spec(specs, format!("{prefix}skip.w"), &[cout, cin, 1, 1], Init::Kaiming(cin));
        spec(specs, format!("{prefix}skip.b"), &[cout], Init::Zero);
    }
}

/// The conditional denoiser. Holds only a validated configuration; all
/// parameters are fetched by name from a [`Params`] store at forward time.
#[derive(Debug)]
pub struct Denoiser {
    pub cfg: ModelConfig,
    passes: AtomicU64,
}

impl Clone for Denoiser {
    /// The clone starts its own forward-pass count.
    fn clone(&self) -> Self {
        Denoiser { cfg: self.cfg.clone(), passes: AtomicU64::new(0) }
    }
}

impl Denoiser {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Denoiser { cfg, passes: AtomicU64::new(0) })
    }

    /// Cumulative per-sample forward evaluations since construction; the
    /// inference budget checks (one pass per image for the auxiliary head,
    /// T for full sampling) read this.
    pub fn forward_passes(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }

    /// Every parameter name, shape, and initializer, in a fixed order that
    /// also defines RNG consumption during initialization.
    fn param_specs(&self) -> Vec<ParamSpec> {
        let v = &mut Vec::new();
        let d = self.cfg.encoder.embed_dim;
        let td = self.cfg.unet.time_embed_dim;
        let p2 = self.cfg.encoder.patch_size * self.cfg.encoder.patch_size;
        let n = self.cfg.num_patches();
        let levels = self.cfg.unet.channel_multipliers.len();
        let base = self.cfg.unet.base_channels;

        spec(v, "time.mlp1.w".into(), &[td, 4 * td], Init::Kaiming(td));
        spec(v, "time.mlp1.b".into(), &[4 * td], Init::Zero);
        spec(v, "time.mlp2.w".into(), &[4 * td, td], Init::Kaiming(4 * td));
        spec(v, "time.mlp2.b".into(), &[td], Init::Zero);

        spec(v, "encoder.patch.w".into(), &[p2, d], Init::Kaiming(p2));
        spec(v, "encoder.patch.b".into(), &[d], Init::Zero);
        spec(v, "encoder.pos".into(), &[n, d], Init::Normal(0.02));
        for i in 0..self.cfg.encoder.depth {
            let pre = format!("encoder.block{i}.");
            spec(v, format!("{pre}ln1.g"), &[d], Init::One);
            spec(v, format!("{pre}ln1.b"), &[d], Init::Zero);
            for proj in ["wq", "wk", "wv", "wo"] {
                spec(v, format!("{pre}attn.{proj}"), &[d, d], Init::Kaiming(d));
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                spec(v, format!("{pre}attn.{bias}"), &[d], Init::Zero);
            }
            spec(v, format!("{pre}ln2.g"), &[d], Init::One);
            spec(v, format!("{pre}ln2.b"), &[d], Init::Zero);
            spec(v, format!("{pre}mlp1.w"), &[d, 4 * d], Init::Kaiming(d));
            spec(v, format!("{pre}mlp1.b"), &[4 * d], Init::Zero);
            spec(v, format!("{pre}mlp2.w"), &[4 * d, d], Init::Kaiming(4 * d));
            spec(v, format!("{pre}mlp2.b"), &[d], Init::Zero);
        }

        spec(v, "acb.enh1.w".into(), &[d, d], Init::Kaiming(d));
        spec(v, "acb.enh1.b".into(), &[d], Init::Zero);
        spec(v, "acb.enh2.w".into(), &[d, d], Init::Kaiming(d));
        spec(v, "acb.enh2.b".into(), &[d], Init::Zero);
        spec(v, "acb.gamma.w".into(), &[td, d], Init::Zero);
        spec(v, "acb.gamma.b".into(), &[d], Init::One);
        spec(v, "acb.beta.w".into(), &[td, d], Init::Zero);
        spec(v, "acb.beta.b".into(), &[d], Init::Zero);

        spec(v, "unet.stem.w".into(), &[base, 1, 3, 3], Init::Kaiming(9));
        spec(v, "unet.stem.b".into(), &[base], Init::Zero);
        for i in 0..levels {
            let cin = if i == 0 { base } else { self.cfg.channels(i - 1) };
            res_specs(v, &format!("unet.down{i}.res."), cin, self.cfg.channels(i), td);
            if i + 1 < levels {
                let ch = self.cfg.channels(i);
                spec(v, format!("unet.down{i}.pool.w"), &[ch, ch, 3, 3], Init::Kaiming(9 * ch));
                spec(v, format!("unet.down{i}.pool.b"), &[ch], Init::Zero);
            }
        }
        let cb = self.cfg.channels(levels - 1);
        res_specs(v, "unet.mid.res.", cb, cb, td);
        for l in 0..levels {
            if !self.cfg.unet.attention_levels.contains(&l) {
                continue;
            }
            let ch = self.cfg.channels(l);
            let pre = format!("unet.attn{l}.");
            spec(v, format!("{pre}wq"), &[ch, ch], Init::Kaiming(ch));
            spec(v, format!("{pre}bq"), &[ch], Init::Zero);
            spec(v, format!("{pre}wk"), &[d, ch], Init::Kaiming(d));
            spec(v, format!("{pre}bk"), &[ch], Init::Zero);
            spec(v, format!("{pre}wv"), &[d, ch], Init::Kaiming(d));
            spec(v, format!("{pre}bv"), &[ch], Init::Zero);
            spec(v, format!("{pre}wo"), &[ch, ch], Init::Zero);
            spec(v, format!("{pre}bo"), &[ch], Init::Zero);
        }
        for i in (0..levels.saturating_sub(1)).rev() {
            let ch = self.cfg.channels(i);
            let above = self.cfg.channels(i + 1);
            spec(v, format!("unet.up{i}.proj.w"), &[ch, above, 3, 3], Init::Kaiming(9 * above));
            spec(v, format!("unet.up{i}.proj.b"), &[ch], Init::Zero);
            res_specs(v, &format!("unet.up{i}.res."), 2 * ch, ch, td);
        }
        let c0 = self.cfg.channels(0);
        spec(v, "unet.head.norm.g".into(), &[c0], Init::One);
        spec(v, "unet.head.norm.b".into(), &[c0], Init::Zero);
        spec(v, "unet.head.eps.w".into(), &[1, c0, 1, 1], Init::Kaiming(c0));
        spec(v, "unet.head.eps.b".into(), &[1], Init::Zero);
        spec(v, "unet.head.aux.w".into(), &[1, c0, 1, 1], Init::Kaiming(c0));
        spec(v, "unet.head.aux.b".into(), &[1], Init::Zero);
        std::mem::take(v)
    }

    /// Fresh parameters; a fixed seed yields bit-identical values.
    pub fn init_params<F: Real>(&self, seed: u64) -> Params<F> {
        let mut rng = rng_for(seed, "init", 0, 0);
        let mut params = Params::new();
        for spec in self.param_specs() {
            let n: usize = spec.shape.iter().product();
            let data: Vec<F> = match spec.init {
                Init::Zero => vec![F::zero(); n],
                Init::One => vec![F::one(); n],
                Init::Kaiming(fan_in) => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| c::<F>(rng.sample::<f64, _>(StandardNormal) * std)).collect()
                }
                Init::Normal(std) => {
                    (0..n).map(|_| c::<F>(rng.sample::<f64, _>(StandardNormal) * std)).collect()
                }
            };
            params.insert(&spec.name, Tensor::param(&spec.shape, data));
        }
        params
    }

    /// Loads a full checkpoint, rejecting missing, extra, or reshaped
    /// parameters relative to this configuration.
    pub fn load_params(&self, path: &Path) -> Result<Params<f32>> {
        let mut by_name: BTreeMap<String, (Vec<usize>, Vec<f32>)> =
            checkpoint::load(path)?.into_iter().map(|(n, s, v)| (n, (s, v))).collect();
        let mut params = Params::new();
        for spec in self.param_specs() {
            let (shape, data) = by_name
                .remove(&spec.name)
                .ok_or_else(|| Error::Data(format!("checkpoint is missing parameter {}", spec.name)))?;
            if shape != spec.shape {
                return Err(Error::Data(format!(
                    "checkpoint parameter {} has shape {:?}, config expects {:?}",
                    spec.name, shape, spec.shape
                )));
            }
            params.insert(&spec.name, Tensor::param(&shape, data));
        }
        if let Some(name) = by_name.keys().next() {
            return Err(Error::Data(format!("checkpoint contains unexpected parameter {name}")));
        }
        Ok(params)
    }

    /// Overwrites only the `encoder.*` parameters from a checkpoint, so a
    /// separately pretrained encoder can be dropped into a fresh model.
    /// Returns the number of tensors replaced.
    pub fn load_encoder_params(&self, params: &mut Params<f32>, path: &Path) -> Result<usize> {
        let by_name: BTreeMap<String, (Vec<usize>, Vec<f32>)> =
            checkpoint::load(path)?.into_iter().map(|(n, s, v)| (n, (s, v))).collect();
        let mut loaded = 0;
        for spec in self.param_specs() {
            if !spec.name.starts_with("encoder.") {
                continue;
            }
            let (shape, data) = by_name.get(&spec.name).ok_or_else(|| {
                Error::Data(format!("checkpoint is missing encoder parameter {}", spec.name))
            })?;
            if *shape != spec.shape {
                return Err(Error::Data(format!(
                    "checkpoint parameter {} has shape {:?}, config expects {:?}",
                    spec.name, shape, spec.shape
                )));
            }
            params.set(&spec.name, Tensor::param(shape, data.clone()));
            loaded += 1;
        }
        Ok(loaded)
    }

    /// Embeds one timestep per batch row: sinusoidal features through the
    /// shared two-layer MLP. Output is [batch, time_embed_dim].
    pub fn time_embed<F: Real>(&self, params: &Params<F>, ts: &[usize]) -> Result<Tensor<F>> {
        let dim = self.cfg.unet.time_embed_dim;
        let mut raw: Vec<F> = Vec::with_capacity(ts.len() * dim);
        for &t in ts {
            raw.extend(sinusoidal_embedding(t, dim)?.into_iter().map(c::<F>));
        }
        let x = Tensor::from_vec(&[ts.len(), dim], raw);
        let h = x
            .matmul(&params.get("time.mlp1.w"))
            .add_bias_last(&params.get("time.mlp1.b"))
            .silu();
        Ok(h.matmul(&params.get("time.mlp2.w")).add_bias_last(&params.get("time.mlp2.b")))
    }

    /// Patch tokens before positional embeddings: patchify, then a shared
    /// linear map per patch. Output is [batch, num_patches, embed_dim].
    fn patch_embed<F: Real>(&self, params: &Params<F>, image: &Tensor<F>) -> Result<Tensor<F>> {
        let s = image.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::Contract(format!(
                "encoder input must be [batch, 1, h, w], got {s:?}"
            )));
        }
        let p = self.cfg.encoder.patch_size;
        if s[2] % p != 0 || s[3] % p != 0 {
            return Err(Error::Config(format!(
                "image extent {}x{} is not divisible by model.encoder.patch_size {p}",
                s[2], s[3]
            )));
        }
        let n = (s[2] / p) * (s[3] / p);
        if n != self.cfg.num_patches() {
            return Err(Error::Config(format!(
                "positional table covers {} tokens, image yields {n}",
                self.cfg.num_patches()
            )));
        }
        let w = params.get("encoder.patch.w");
        let d = w.shape()[1];
        let flat = image.patchify(p).reshape(&[s[0] * n, p * p]);
        Ok(flat.matmul(&w).add_bias_last(&params.get("encoder.patch.b")).reshape(&[s[0], n, d]))
    }

    /// Full token encoder: patch embedding, positional embeddings, then
    /// `depth` pre-norm attention/MLP blocks.
    pub fn encode_image<F: Real>(&self, params: &Params<F>, image: &Tensor<F>) -> Result<Tensor<F>> {
        let tokens = self.patch_embed(params, image)?;
        let (b, n, d) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
        let pos = params.get("encoder.pos").reshape(&[n * d]);
        let mut x = tokens.reshape(&[b, n * d]).add_bias_last(&pos).reshape(&[b, n, d]);
        for i in 0..self.cfg.encoder.depth {
            x = encoder_block(params, i, &x, self.cfg.encoder.heads);
        }
        Ok(x)
    }

    /// UNet pass over a batch: `ts` holds one 1-based timestep per row.
    pub fn forward<F: Real>(
        &self,
        params: &Params<F>,
        x_t: &Tensor<F>,
        ts: &[usize],
        image: &Tensor<F>,
    ) -> Result<DualHeadOutput<F>> {
        let s = self.cfg.image_size;
        let xs = x_t.shape().to_vec();
        if xs.len() != 4 || xs[1] != 1 || xs[2] != s || xs[3] != s {
            return Err(Error::Contract(format!(
                "denoiser input must be [batch, 1, {s}, {s}], got {xs:?}"
            )));
        }
        if image.shape() != xs {
            return Err(Error::Contract(format!(
                "conditioning image shape {:?} differs from x_t shape {xs:?}",
                image.shape()
            )));
        }
        if ts.len() != xs[0] {
            return Err(Error::Contract(format!(
                "got {} timesteps for a batch of {}",
                ts.len(),
                xs[0]
            )));
        }
        if ts.iter().any(|&t| t == 0) {
            return Err(Error::Contract("timestep 0 is outside the 1-based schedule".into()));
        }
        self.passes.fetch_add(xs[0] as u64, Ordering::Relaxed);

        let e = self.time_embed(params, ts)?;
        let attn = &self.cfg.unet.attention_levels;
        let cond = if attn.is_empty() {
            None
        } else {
            let tokens = self.encode_image(params, image)?;
            Some(acb_condition(params, &tokens, &e)?)
        };
        let heads = self.cfg.encoder.heads;
        let levels = self.cfg.unet.channel_multipliers.len();

        let mut h = x_t.conv2d(
            &params.get("unet.stem.w"),
            Some(&params.get("unet.stem.b")),
            (1, 1),
            (1, 1),
        );
        let mut skips: Vec<Tensor<F>> = Vec::new();
        for i in 0..levels {
            h = res_block(params, &format!("unet.down{i}.res."), &h, &e);
            if i + 1 < levels {
                skips.push(h.clone());
                h = h.conv2d(
                    &params.get(&format!("unet.down{i}.pool.w")),
                    Some(&params.get(&format!("unet.down{i}.pool.b"))),
                    (2, 2),
                    (1, 1),
                );
            }
        }
        h = res_block(params, "unet.mid.res.", &h, &e);
        if attn.contains(&(levels - 1)) {
            let cond = cond.as_ref().expect("tokens exist when attention is configured");
            h = cross_attention(params, &format!("unet.attn{}.", levels - 1), &h, cond, heads)?;
        }
        for i in (0..levels.saturating_sub(1)).rev() {
            h = h.upsample_nearest_2x().conv2d(
                &params.get(&format!("unet.up{i}.proj.w")),
                Some(&params.get(&format!("unet.up{i}.proj.b"))),
                (1, 1),
                (1, 1),
            );
            h = h.concat_channel(&skips[i]);
            h = res_block(params, &format!("unet.up{i}.res."), &h, &e);
            if attn.contains(&i) {
                let cond = cond.as_ref().expect("tokens exist when attention is configured");
                h = cross_attention(params, &format!("unet.attn{i}."), &h, cond, heads)?;
            }
        }
        let shared = h
            .group_norm(GROUPS, &params.get("unet.head.norm.g"), &params.get("unet.head.norm.b"), NORM_EPS)
            .silu();
        let eps_hat = shared.conv2d(
            &params.get("unet.head.eps.w"),
            Some(&params.get("unet.head.eps.b")),
            (1, 1),
            (0, 0),
        );
        let aux_logits = shared.conv2d(
            &params.get("unet.head.aux.w"),
            Some(&params.get("unet.head.aux.b")),
            (1, 1),
            (0, 0),
        );
        Ok(DualHeadOutput { eps_hat, aux_logits })
    }

    /// Single-sample convenience wrapper around [`Denoiser::forward`].
    pub fn forward_one<F: Real>(
        &self,
        params: &Params<F>,
        x_t: &Tensor<F>,
        t: usize,
        image: &Tensor<F>,
    ) -> Result<DualHeadOutput<F>> {
        self.forward(params, x_t, &[t], image)
    }
}

fn linear_tokens<F: Real>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let s = x.shape().to_vec();
    let out = w.shape()[1];
    x.reshape(&[s[0] * s[1], s[2]]).matmul(w).add_bias_last(b).reshape(&[s[0], s[1], out])
}

/// Scaled dot-product attention over pre-projected q/k/v, heads sliced along
/// the channel axis. The per-head outputs are projected by the matching row
/// block of `wo` and summed, which equals concatenation followed by `wo`.
fn multi_head_attention<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    wo: &Tensor<F>,
    bo: &Tensor<F>,
    heads: usize,
) -> Tensor<F> {
    let (b, m, cdim) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let dk = cdim / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let c_out = wo.shape()[1];
    let mut acc: Option<Tensor<F>> = None;
    for hd in 0..heads {
        let qh = q.narrow(2, hd * dk, dk);
        let kh = k.narrow(2, hd * dk, dk);
        let vh = v.narrow(2, hd * dk, dk);
        let att = qh.bmm_nt(&kh).mul_scalar(scale).softmax_last();
        let ctx = att.bmm(&vh).reshape(&[b * m, dk]);
        let proj = ctx.matmul(&wo.narrow(0, hd * dk, dk));
        acc = Some(match acc {
            Some(a) => a.add(&proj),
            None => proj,
        });
    }
    acc.expect("at least one head").add_bias_last(bo).reshape(&[b, m, c_out])
}

/// Pre-norm encoder block: x += attention(norm(x)); x += MLP(norm(x)).
fn encoder_block<F: Real>(params: &Params<F>, index: usize, x: &Tensor<F>, heads: usize) -> Tensor<F> {
    let g = |n: &str| params.get(&format!("encoder.block{index}.{n}"));
    let xn = x.layer_norm(&g("ln1.g"), &g("ln1.b"), NORM_EPS);
    let q = linear_tokens(&xn, &g("attn.wq"), &g("attn.bq"));
    let k = linear_tokens(&xn, &g("attn.wk"), &g("attn.bk"));
    let v = linear_tokens(&xn, &g("attn.wv"), &g("attn.bv"));
    let x = x.add(&multi_head_attention(&q, &k, &v, &g("attn.wo"), &g("attn.bo"), heads));
    let xn = x.layer_norm(&g("ln2.g"), &g("ln2.b"), NORM_EPS);
    let m = linear_tokens(&xn, &g("mlp1.w"), &g("mlp1.b"))
        .gelu();
    x.add(&linear_tokens(&m, &g("mlp2.w"), &g("mlp2.b")))
}

/// Token feature enhancer: a two-layer MLP applied to every token.
fn enhance<F: Real>(params: &Params<F>, tokens: &Tensor<F>) -> Tensor<F> {
    let h = linear_tokens(tokens, &params.get("acb.enh1.w"), &params.get("acb.enh1.b")).silu();
    linear_tokens(&h, &params.get("acb.enh2.w"), &params.get("acb.enh2.b"))
}

/// Conditioning bridge: enhances tokens, then modulates them per channel
/// with FiLM scale and shift vectors derived linearly from the time
/// embedding `e_t` ([batch, time_embed_dim]).
pub fn acb_condition<F: Real>(
    params: &Params<F>,
    tokens: &Tensor<F>,
    e_t: &Tensor<F>,
) -> Result<Tensor<F>> {
    let d = tokens.shape()[2];
    let width = params.get("acb.enh1.w").shape()[0];
    if d != width {
        return Err(Error::Config(format!(
            "token dim {d} does not match conditioning bridge width {width}"
        )));
    }
    let td = e_t.shape()[1];
    let gw = params.get("acb.gamma.w");
    if gw.shape()[0] != td {
        return Err(Error::Config(format!(
            "time embedding dim {td} does not match FiLM map input {}",
            gw.shape()[0]
        )));
    }
    let cp = enhance(params, tokens);
    let gamma = e_t.matmul(&gw).add_bias_last(&params.get("acb.gamma.b"));
    let beta = e_t.matmul(&params.get("acb.beta.w")).add_bias_last(&params.get("acb.beta.b"));
    Ok(cp.film_tokens(&gamma, &beta))
}

/// Fuses tokens into a feature map: queries come from the flattened map,
/// keys and values from the tokens; the attended result is projected and
/// added back residually.
pub fn cross_attention<F: Real>(
    params: &Params<F>,
    prefix: &str,
    z: &Tensor<F>,
    tokens: &Tensor<F>,
    heads: usize,
) -> Result<Tensor<F>> {
    let zs = z.shape().to_vec();
    if zs.len() != 4 {
        return Err(Error::Contract(format!(
            "cross-attention expects [batch, c, h, w], got {zs:?}"
        )));
    }
    let (b, cdim, hh, ww) = (zs[0], zs[1], zs[2], zs[3]);
    let g = |n: &str| params.get(&format!("{prefix}{n}"));
    let wq = g("wq");
    if wq.shape()[0] != cdim {
        return Err(Error::Config(format!(
            "feature map has {cdim} channels but {prefix}wq expects {}",
            wq.shape()[0]
        )));
    }
    let wk = g("wk");
    if tokens.shape()[2] != wk.shape()[0] {
        return Err(Error::Config(format!(
            "token dim {} does not match {prefix}wk input {}",
            tokens.shape()[2],
            wk.shape()[0]
        )));
    }
    if cdim % heads != 0 {
        return Err(Error::Config(format!(
            "{cdim} channels are not divisible by {heads} heads"
        )));
    }
    let nq = hh * ww;
    let zq = z.reshape(&[b, cdim, nq]).transpose_12();
    let q = linear_tokens(&zq, &wq, &g("bq"));
    let k = linear_tokens(tokens, &wk, &g("bk"));
    let v = linear_tokens(tokens, &g("wv"), &g("bv"));
    let fused = multi_head_attention(&q, &k, &v, &g("wo"), &g("bo"), heads);
    Ok(z.add(&fused.transpose_12().reshape(&[b, cdim, hh, ww])))
}

/// Residual block: norm-act-conv, add the per-block time projection per
/// channel, norm-act-conv, plus a 1x1-projected skip when widths change.
fn res_block<F: Real>(params: &Params<F>, prefix: &str, x: &Tensor<F>, e_t: &Tensor<F>) -> Tensor<F> {
    let g = |n: &str| params.get(&format!("{prefix}{n}"));
    let h = x
        .group_norm(GROUPS, &g("norm1.g"), &g("norm1.b"), NORM_EPS)
        .silu()
        .conv2d(&g("conv1.w"), Some(&g("conv1.b")), (1, 1), (1, 1));
    let t = e_t.matmul(&g("temb.w")).add_bias_last(&g("temb.b"));
    let h = h
        .add_channel_vec(&t)
        .group_norm(GROUPS, &g("norm2.g"), &g("norm2.b"), NORM_EPS)
        .silu()
        .conv2d(&g("conv2.w"), Some(&g("conv2.b")), (1, 1), (1, 1));
    let skip = if params.contains(&format!("{prefix}skip.w")) {
        x.conv2d(&g("skip.w"), Some(&g("skip.b")), (1, 1), (0, 0))
    } else {
        x.clone()
    };
    skip.add(&h)
}

/// A model plus its parameter store, usable as the look-back noise
/// predictor of the consistency loss on single flattened samples.
pub struct BoundDenoiser<'a, F: Real> {
    model: &'a Denoiser,
    params: &'a Params<F>,
}

impl<'a, F: Real> BoundDenoiser<'a, F> {
    pub fn new(model: &'a Denoiser, params: &'a Params<F>) -> Self {
        BoundDenoiser { model, params }
    }
}

impl<F: Real> NoisePredictor<F> for BoundDenoiser<'_, F> {
    fn predict_eps(&mut self, x_t: &Tensor<F>, t: usize, image: &Tensor<F>) -> Result<Tensor<F>> {
        let s = self.model.cfg.image_size;
        if x_t.len() != s * s || image.len() != s * s {
            return Err(Error::Contract(format!(
                "bound denoiser expects single {s}x{s} samples, got {} and {} values",
                x_t.len(),
                image.len()
            )));
        }
        let out = self.model.forward(
            self.params,
            &x_t.reshape(&[1, 1, s, s]),
            &[t],
            &image.reshape(&[1, 1, s, s]),
        )?;
        Ok(out.eps_hat.reshape(x_t.shape()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, AdamW, AdamWConfig};

    fn toy_config() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            encoder: EncoderConfig { patch_size: 8, embed_dim: 16, depth: 1, heads: 2 },
            unet: UNetConfig {
                base_channels: 8,
                channel_multipliers: vec![1, 2],
                attention_levels: vec![1],
                time_embed_dim: 16,
            },
        }
    }

    fn filled(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let mut rng = rng_for(seed, "nets-test", 0, 0);
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
        Tensor::from_vec(shape, data)
    }

    fn filled32(shape: &[usize], seed: u64, scale: f64) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        let mut rng = rng_for(seed, "nets-test", 0, 0);
        let data =
            (0..n).map(|_| (rng.sample::<f64, _>(StandardNormal) * scale) as f32).collect();
        Tensor::from_vec(shape, data)
    }

    #[test]
    fn sinusoid_at_zero_is_zeros_then_ones() {
        let e = sinusoidal_embedding(0, 8).unwrap();
        assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn sinusoid_small_timesteps_differ_in_every_band() {
        let a = sinusoidal_embedding(1, 8).unwrap();
        let b = sinusoidal_embedding(2, 8).unwrap();
        for i in 0..8 {
            assert_ne!(a[i], b[i], "band {i} collided");
        }
    }

    #[test]
    fn sinusoid_odd_dim_is_config_error() {
        let err = sinusoidal_embedding(3, 7).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn time_embedding_shape_matches_dim() {
        let model = Denoiser::new(toy_config()).unwrap();
        let params = model.init_params::<f64>(1);
        let e = model.time_embed(&params, &[1, 999]).unwrap();
        assert_eq!(e.shape(), &[2, 16]);
        assert!(e.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encoder_token_count_and_shape() {
        let model = Denoiser::new(ModelConfig::default()).unwrap();
        let params = model.init_params::<f64>(2);
        let image = filled(&[1, 1, 32, 32], 3, 0.5);
        let tokens = model.encode_image(&params, &image).unwrap();
        assert_eq!(tokens.shape(), &[1, 16, 64]);
    }

    #[test]
    fn patch_embedding_commutes_with_patch_permutation() {
        let model = Denoiser::new(toy_config()).unwrap();
        let params = model.init_params::<f64>(4);
        let a = filled(&[1, 1, 16, 16], 5, 1.0);
        // Swap the contents of patch 0 (rows 0-7, cols 0-7) and patch 3
        // (rows 8-15, cols 8-15).
        let mut swapped = a.data().to_vec();
        for r in 0..8 {
            for cidx in 0..8 {
                swapped.swap(r * 16 + cidx, (r + 8) * 16 + cidx + 8);
            }
        }
        let b = Tensor::from_vec(&[1, 1, 16, 16], swapped);
        let ta = model.patch_embed(&params, &a).unwrap();
        let tb = model.patch_embed(&params, &b).unwrap();
        let (da, db) = (ta.data(), tb.data());
        let d = 16;
        assert_eq!(&da[0..d], &db[3 * d..4 * d]);
        assert_eq!(&da[3 * d..4 * d], &db[0..d]);
        assert_eq!(&da[d..3 * d], &db[d..3 * d]);
    }

    #[test]
    fn encoder_block_gradient_check() {
        let model = Denoiser::new(toy_config()).unwrap();
        let params = model.init_params::<f64>(6);
        let probe = filled(&[1, 3, 16], 7, 1.0);
        grad_check(
            "encoder_block",
            &[(vec![1, 3, 16], filled(&[1, 3, 16], 8, 0.8).data().to_vec())],
            1e-3,
            &|inputs| encoder_block(&params, 0, &inputs[0], 2).mul(&probe).sum_all(),
        );
    }

    fn rigged_acb(d: usize, td: usize) -> Params<f64> {
        let mut p = Params::new();
        p.insert("acb.enh1.w", Tensor::param(&[d, d], vec![0.0; d * d]));
        p.insert("acb.enh1.b", Tensor::param(&[d], vec![0.0; d]));
        p.insert("acb.enh2.w", Tensor::param(&[d, d], vec![0.0; d * d]));
        p.insert("acb.enh2.b", Tensor::param(&[d], vec![0.0; d]));
        p.insert("acb.gamma.w", Tensor::param(&[td, d], vec![0.0; td * d]));
        p.insert("acb.gamma.b", Tensor::param(&[d], vec![1.0; d]));
        p.insert("acb.beta.w", Tensor::param(&[td, d], vec![0.0; td * d]));
        p.insert("acb.beta.b", Tensor::param(&[d], vec![0.0; d]));
        p
    }

    #[test]
    fn film_identity_keeps_enhanced_tokens() {
        // gamma fixed at 1, beta at 0: conditioning returns c' unchanged.
        let model = Denoiser::new(toy_config()).unwrap();
        let params = model.init_params::<f64>(10);
        let tokens = filled(&[2, 4, 16], 11, 0.7);
        let e_t = filled(&[2, 16], 12, 0.5);
        let out = acb_condition(&params, &tokens, &e_t).unwrap();
        let cp = enhance(&params, &tokens);
        assert_eq!(out.data(), cp.data());
    }

    #[test]
    fn film_zero_gamma_broadcasts_beta() {
        let mut p = rigged_acb(3, 4);
        p.set("acb.gamma.b", Tensor::param(&[3], vec![0.0; 3]));
        p.set("acb.beta.b", Tensor::param(&[3], vec![0.7, -0.2, 1.5]));
        let e_t = Tensor::from_vec(&[1, 4], vec![0.3, -0.8, 0.1, 2.0]);
        let tokens_a = filled(&[1, 5, 3], 13, 1.0);
        let tokens_b = filled(&[1, 5, 3], 14, 2.0);
        let oa = acb_condition(&p, &tokens_a, &e_t).unwrap();
        let ob = acb_condition(&p, &tokens_b, &e_t).unwrap();
        assert_eq!(oa.data(), ob.data());
        for row in 0..5 {
            assert_eq!(&oa.data()[row * 3..row * 3 + 3], &[0.7, -0.2, 1.5]);
        }
    }

    #[test]
    fn film_scale_two_shift_one_on_half_tokens() {
        // Enhancer rigged to emit 0.5 everywhere, gamma = 2, beta = 1.
        let mut p = rigged_acb(3, 4);
        p.set("acb.enh2.b", Tensor::param(&[3], vec![0.5; 3]));
        p.set("acb.gamma.b", Tensor::param(&[3], vec![2.0; 3]));
        p.set("acb.beta.b", Tensor::param(&[3], vec![1.0; 3]));
        let e_t = Tensor::from_vec(&[1, 4], vec![0.4, 0.0, -1.0, 0.6]);
        let tokens = filled(&[1, 2, 3], 15, 1.0);
        let out = acb_condition(&p, &tokens, &e_t).unwrap();
        for &v in out.data() {
            assert_eq!(v, 2.0);
        }
    }

    #[test]
    fn acb_width_mismatch_is_config_error() {
        let p = rigged_acb(3, 4);
        let tokens = Tensor::from_vec(&[1, 2, 5], vec![0.1; 10]);
        let e_t = Tensor::from_vec(&[1, 4], vec![0.0; 4]);
        let err = acb_condition(&p, &tokens, &e_t).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    fn rigged_cross(c: usize, d: usize, wo: Vec<f64>) -> Params<f64> {
        let mut p = Params::new();
        let eye = |n: usize| {
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                m[i * n + i] = 1.0;
            }
            m
        };
        p.insert("x.wq", Tensor::param(&[c, c], eye(c)));
        p.insert("x.bq", Tensor::param(&[c], vec![0.0; c]));
        p.insert("x.wk", Tensor::param(&[d, c], vec![0.1; d * c]));
        p.insert("x.bk", Tensor::param(&[c], vec![0.0; c]));
        p.insert("x.wv", Tensor::param(&[d, c], vec![0.2, -0.1, 0.4, 0.3]));
        p.insert("x.bv", Tensor::param(&[c], vec![0.05, -0.15]));
        p.insert("x.wo", Tensor::param(&[c, c], wo));
        p.insert("x.bo", Tensor::param(&[c], vec![0.01, 0.02]));
        p
    }

    #[test]
    fn cross_attention_single_token_adds_projected_value_everywhere() {
        // One token: softmax over one score is exactly 1, so every position
        // receives value . wo + bo regardless of the queries.
        let p = rigged_cross(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let z = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 2.0, -1.0, 0.5]);
        let token = Tensor::from_vec(&[1, 1, 2], vec![0.3, -0.5]);
        let out = cross_attention(&p, "x.", &z, &token, 1).unwrap();
        // v = token . wv + bv = (-0.09, -0.33); projected adds (-0.08, -0.31).
        let d = out.data();
        let add0 = 0.3 * 0.2 + (-0.5) * 0.4 + 0.05 + 0.01;
        let add1 = 0.3 * (-0.1) + (-0.5) * 0.3 + (-0.15) + 0.02;
        let expect = [1.0 + add0, 2.0 + add0, -1.0 + add1, 0.5 + add1];
        for i in 0..4 {
            assert!((d[i] - expect[i]).abs() < 1e-12, "pos {i}: {} vs {}", d[i], expect[i]);
        }
        // Both spatial positions get the identical additive vector.
        assert!(((d[0] - 1.0) - (d[1] - 2.0)).abs() < 1e-15);
        assert!(((d[2] + 1.0) - (d[3] - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn cross_attention_two_identical_tokens_match_single() {
        let p = rigged_cross(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let z = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 2.0, -1.0, 0.5]);
        let one = Tensor::from_vec(&[1, 1, 2], vec![0.3, -0.5]);
        let two = Tensor::from_vec(&[1, 2, 2], vec![0.3, -0.5, 0.3, -0.5]);
        let a = cross_attention(&p, "x.", &z, &one, 1).unwrap();
        let b = cross_attention(&p, "x.", &z, &two, 1).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn cross_attention_gradient_check() {
        let mut p = Params::new();
        let (cdim, d) = (4, 3);
        let name_shapes: [(&str, Vec<usize>); 8] = [
            ("x.wq", vec![cdim, cdim]),
            ("x.bq", vec![cdim]),
            ("x.wk", vec![d, cdim]),
            ("x.bk", vec![cdim]),
            ("x.wv", vec![d, cdim]),
            ("x.bv", vec![cdim]),
            ("x.wo", vec![cdim, cdim]),
            ("x.bo", vec![cdim]),
        ];
        for (i, (name, shape)) in name_shapes.iter().enumerate() {
            p.insert(name, Tensor::param(shape, filled(shape, 20 + i as u64, 0.6).data().to_vec()));
        }
        let probe = filled(&[1, 4, 2, 2], 30, 1.0);
        grad_check(
            "cross_attention",
            &[
                (vec![1, 4, 2, 2], filled(&[1, 4, 2, 2], 31, 0.9).data().to_vec()),
                (vec![1, 3, 3], filled(&[1, 3, 3], 32, 0.9).data().to_vec()),
            ],
            1e-3,
            &|inputs| {
                cross_attention(&p, "x.", &inputs[0], &inputs[1], 2)
                    .unwrap()
                    .mul(&probe)
                    .sum_all()
            },
        );
    }

    #[test]
    fn forward_output_shapes_match_input() {
        let model = Denoiser::new(ModelConfig::default()).unwrap();
        let params = model.init_params::<f64>(40);
        let x_t = filled(&[2, 1, 32, 32], 41, 1.0);
        let image = filled(&[2, 1, 32, 32], 42, 0.5);
        let out = model.forward(&params, &x_t, &[1, 777], &image).unwrap();
        assert_eq!(out.eps_hat.shape(), &[2, 1, 32, 32]);
        assert_eq!(out.aux_logits.shape(), &[2, 1, 32, 32]);
        assert!(out.eps_hat.data().iter().all(|v| v.is_finite()));
        assert!(out.aux_logits.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_initialized_gates_ignore_image_at_init() {
        let model = Denoiser::new(toy_config()).unwrap();
        let params = model.init_params::<f64>(50);
        let x_t = filled(&[1, 1, 16, 16], 51, 1.0);
        let img_a = filled(&[1, 1, 16, 16], 52, 0.5);
        let img_b = filled(&[1, 1, 16, 16], 53, 0.5);
        let a = model.forward(&params, &x_t, &[9], &img_a).unwrap();
        let b = model.forward(&params, &x_t, &[9], &img_b).unwrap();
        assert_eq!(a.eps_hat.data(), b.eps_hat.data());
        assert_eq!(a.aux_logits.data(), b.aux_logits.data());
    }

    #[test]
    fn conditioning_becomes_live_after_one_step() {
        let model = Denoiser::new(toy_config()).unwrap();
        let mut params = model.init_params::<f32>(60);
        let x_t = filled32(&[1, 1, 16, 16], 61, 1.0);
        let img_a = filled32(&[1, 1, 16, 16], 62, 0.5);
        let img_b = filled32(&[1, 1, 16, 16], 63, 0.5);
        let out = model.forward(&params, &x_t, &[3], &img_a).unwrap();
        let loss = out
            .eps_hat
            .mul(&out.eps_hat)
            .mean_all()
            .add(&out.aux_logits.mul(&out.aux_logits).mean_all());
        let grads = loss.backward();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut params, &grads, 1e-2).unwrap();
        assert!(params.get("unet.attn1.wo").data().iter().any(|&v| v != 0.0));
        let ea = model.forward(&params, &x_t, &[3], &img_a).unwrap().eps_hat;
        let eb = model.forward(&params, &x_t, &[3], &img_b).unwrap().eps_hat;
        let diff: f32 =
            ea.data().iter().zip(eb.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff > 0.0, "conditioning image had no effect after a step");
    }

    #[test]
    fn fixed_seed_is_bit_deterministic() {
        let model = Denoiser::new(toy_config()).unwrap();
        let pa = model.init_params::<f32>(7);
        let pb = model.init_params::<f32>(7);
        assert_eq!(pa.num_tensors(), pb.num_tensors());
        for (name, t) in pa.iter() {
            assert_eq!(t.data(), pb.get(name).data(), "{name} differs across same-seed inits");
        }
        let x_t = filled32(&[1, 1, 16, 16], 70, 1.0);
        let image = filled32(&[1, 1, 16, 16], 71, 0.5);
        let a = model.forward(&pa, &x_t, &[5], &image).unwrap();
        let b = model.forward(&pb, &x_t, &[5], &image).unwrap();
        assert_eq!(a.eps_hat.data(), b.eps_hat.data());
        assert_eq!(a.aux_logits.data(), b.aux_logits.data());
        let pc = model.init_params::<f32>(8);
        let differs = pa.iter().any(|(name, t)| t.data() != pc.get(name).data());
        assert!(differs, "different seeds produced identical parameters");
    }

    #[test]
    fn full_model_gradient_check_on_random_parameter_subsample() {
        let model = Denoiser::new(toy_config()).unwrap();
        let mut params = model.init_params::<f64>(3);
        // Open the zero-initialized gates so the conditioning path carries
        // gradients worth checking.
        let mut wake = rng_for(3, "gradcheck-wake", 0, 0);
        for name in ["unet.attn1.wo", "acb.gamma.w", "acb.beta.w"] {
            let t = params.get(name);
            let data: Vec<f64> =
                (0..t.len()).map(|_| wake.sample::<f64, _>(StandardNormal) * 0.2).collect();
            params.set(name, Tensor::param(t.shape(), data));
        }
        let x_t = filled(&[1, 1, 16, 16], 80, 1.0);
        let image = filled(&[1, 1, 16, 16], 81, 0.6);
        let w_eps = filled(&[1, 1, 16, 16], 82, 1.0);
        let w_aux = filled(&[1, 1, 16, 16], 83, 1.0);
        let loss_of = |p: &Params<f64>| -> Tensor<f64> {
            let out = model.forward(p, &x_t, &[7], &image).unwrap();
            out.eps_hat.mul(&w_eps).sum_all().add(&out.aux_logits.mul(&w_aux).sum_all())
        };
        let grads = loss_of(&params).backward();
        let names: Vec<String> = params.names().cloned().collect();
        let mut pick = rng_for(3, "gradcheck-pick", 0, 0);
        let h = 1e-4;
        for _ in 0..50 {
            let name = &names[pick.gen_range(0..names.len())];
            let len = params.get(name).len();
            let coord = pick.gen_range(0..len);
            let analytic = grads.get(&params.get(name)).map_or(0.0, |g| g[coord]);
            let probe = |delta: f64| -> f64 {
                let mut shifted = Params::new();
                for (n, t) in params.iter() {
                    let mut data = t.data().to_vec();
                    if n == name {
                        data[coord] += delta;
                    }
                    shifted.insert(n, Tensor::param(t.shape(), data));
                }
                loss_of(&shifted).item()
            };
            let numeric = (probe(h) - probe(-h)) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-2);
            let rel = (analytic - numeric).abs() / denom;
            assert!(
                rel < 1e-3,
                "{name}[{coord}]: analytic {analytic} vs numeric {numeric} (rel {rel})"
            );
        }
    }

    #[test]
    fn invalid_configs_name_the_offending_field() {
        let check = |mutate: &dyn Fn(&mut ModelConfig), needle: &str| {
            let mut cfg = toy_config();
            mutate(&mut cfg);
            match Denoiser::new(cfg) {
                Err(Error::Config(msg)) => {
                    assert!(msg.contains(needle), "message {msg:?} lacks {needle:?}")
                }
                other => panic!("expected config error mentioning {needle:?}, got {other:?}"),
            }
        };
        check(&|c| c.encoder.embed_dim = 15, "model.encoder.embed_dim");
        check(&|c| c.encoder.depth = 0, "model.encoder.depth");
        check(&|c| c.unet.base_channels = 12, "model.unet.base_channels");
        check(&|c| c.unet.channel_multipliers.clear(), "model.unet.channel_multipliers");
        check(&|c| c.unet.attention_levels = vec![5], "model.unet.attention_levels");
        check(&|c| c.unet.attention_levels = vec![1, 1], "twice");
        check(&|c| c.unet.time_embed_dim = 9, "model.unet.time_embed_dim");
        check(&|c| c.image_size = 20, "model.image_size");
        check(
            &|c| {
                c.encoder.heads = 16;
                c.encoder.embed_dim = 16;
                c.unet.attention_levels = vec![0];
            },
            "not divisible by model.encoder.heads",
        );
    }

    #[test]
    fn rejects_timestep_zero_and_shape_drift() {
        let model = Denoiser::new(toy_config()).unwrap();
        let params = model.init_params::<f64>(90);
        let x_t = filled(&[1, 1, 16, 16], 91, 1.0);
        let image = filled(&[1, 1, 16, 16], 92, 0.5);
        let err = model.forward_one(&params, &x_t, 0, &image).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        let small = filled(&[1, 1, 8, 8], 93, 0.5);
        assert!(model.forward_one(&params, &x_t, 1, &small).is_err());
        assert!(model.forward(&params, &x_t, &[1, 2], &image).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_encoder_transplant() {
        let dir = std::env::temp_dir().join("nets_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let model = Denoiser::new(toy_config()).unwrap();
        let donor = model.init_params::<f32>(100);
        checkpoint::save(&path, &donor).unwrap();

        let loaded = model.load_params(&path).unwrap();
        assert_eq!(loaded.num_tensors(), donor.num_tensors());
        for (name, t) in donor.iter() {
            assert_eq!(t.data(), loaded.get(name).data(), "{name} changed across save/load");
        }

        let mut fresh = model.init_params::<f32>(101);
        let pristine = model.init_params::<f32>(101);
        let n = model.load_encoder_params(&mut fresh, &path).unwrap();
        assert!(n > 0);
        for (name, t) in fresh.iter() {
            if name.starts_with("encoder.") {
                assert_eq!(t.data(), donor.get(name).data(), "{name} not transplanted");
            } else {
                assert_eq!(t.data(), pristine.get(name).data(), "{name} touched unexpectedly");
            }
        }

        // A checkpoint from a differently shaped config must be rejected.
        let mut other_cfg = toy_config();
        other_cfg.unet.base_channels = 16;
        let other = Denoiser::new(other_cfg).unwrap();
        match other.load_params(&path) {
            Err(e) => assert_eq!(e.exit_code(), 3),
            Ok(_) => panic!("mismatched checkpoint was accepted"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bound_denoiser_predicts_flat_noise() {
        let model = Denoiser::new(toy_config()).unwrap();
        let params = model.init_params::<f64>(110);
        let x_t = filled(&[1, 1, 16, 16], 111, 1.0);
        let image = filled(&[1, 1, 16, 16], 112, 0.5);
        let mut bound = BoundDenoiser::new(&model, &params);
        let eps = bound.predict_eps(&x_t, 4, &image).unwrap();
        assert_eq!(eps.shape(), x_t.shape());
        let direct = model.forward_one(&params, &x_t, 4, &image).unwrap().eps_hat;
        assert_eq!(eps.data(), direct.data());
    }
}
