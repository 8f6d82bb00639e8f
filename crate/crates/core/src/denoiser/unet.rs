//! The 13-block toy U-Net.
//!
//! Layout, with `c = base_channels` and an `H × W` input:
//!
//! ```text
//! conv_in                       c   H
//! blocks 1-2   (encoder)        c   H
//! block 3      stride-2 down    2c  H/2
//! block 4                       2c  H/2
//! block 5      stride-2 down    2c  H/4
//! blocks 6-7   (bottleneck)     2c  H/4
//! block 8      + skip(5)        2c  H/4
//! block 9      up, + skip(4)    2c  H/2
//! block 10     + skip(3)        2c  H/2
//! block 11     up, + skip(2)    c   H
//! block 12     + skip(1)        c   H
//! block 13     + skip(conv_in)  c   H
//! out head                      in  H
//! ```
//!
//! Each block is a residual block (channel norm, SiLU, 3×3 conv, time
//! embedding, channel norm, SiLU, 3×3 conv, projected shortcut) followed by a
//! transformer block (layer norm, cross-attention over the prompt, layer
//! norm, two-layer feed-forward, each with a residual connection). The
//! transformer output is the block's feature map; that is the tensor tapped
//! and blended by the editor.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::attention::masked_cross_attention;
use super::{
    AttentionRecord, BlockSet, Denoiser, FeatureDenoiser, FeatureTapSet, ForwardOptions, ForwardOutput, NUM_BLOCKS,
};
use crate::blend::blend_features;
use crate::rng::Rng;
use crate::tensor::{channel_norm, concat_channels, conv2d, layer_norm, linear, matmul, resize_nearest, silu};
use crate::textcond::PromptEmbedding;
use crate::{Error, Result, Tensor};

const NORM_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub heads: usize,
    pub text_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { in_channels: 3, base_channels: 32, heads: 2, text_dim: 64 }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.text_dim == 0 {
            return Err(Error::Config("U-Net dimensions must be positive".into()));
        }
        if self.heads == 0 || !self.base_channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} base channels do not split into {} heads",
                self.base_channels, self.heads
            )));
        }
        if self.base_channels < 2 {
            return Err(Error::Config("base_channels must be at least 2".into()));
        }
        Ok(())
    }

    /// Output width of block `i`.
    pub fn block_channels(&self, block: usize) -> usize {
        match block {
            1 | 2 | 11 | 12 | 13 => self.base_channels,
            _ => 2 * self.base_channels,
        }
    }

    /// Input width of block `i`'s residual block, skip concatenation included.
    fn block_in_channels(&self, block: usize) -> usize {
        let prev = if block == 1 { self.base_channels } else { self.block_channels(block - 1) };
        match skip_source(block) {
            Some(src) => prev + self.skip_channels(src),
            None => prev,
        }
    }

    fn skip_channels(&self, src: usize) -> usize {
        if src == 0 {
            self.base_channels
        } else {
            self.block_channels(src)
        }
    }

    /// Sinusoid width fed to the time MLP.
    pub fn time_features(&self) -> usize {
        self.base_channels.max(8)
    }

    pub fn time_dim(&self) -> usize {
        2 * self.base_channels
    }

    /// Spatial size of block `i`'s feature map for an `h × w` input.
    pub fn block_resolution(&self, block: usize, h: usize, w: usize) -> (usize, usize) {
        let half = (h.div_ceil(2), w.div_ceil(2));
        let quarter = (half.0.div_ceil(2), half.1.div_ceil(2));
        match block {
            1 | 2 | 11 | 12 | 13 => (h, w),
            3 | 4 | 9 | 10 => half,
            _ => quarter,
        }
    }
}

/// Which encoder output feeds a decoder block's skip connection (0 is
/// `conv_in`).
fn skip_source(block: usize) -> Option<usize> {
    match block {
        8..=13 => Some(13 - block),
        _ => None,
    }
}

/// Every tensor name and shape the network expects.
pub fn manifest(cfg: &UNetConfig) -> Vec<(String, Vec<usize>)> {
    let c = cfg.base_channels;
    let td = cfg.time_dim();
    let mut m: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |name: String, shape: &[usize]| m.push((name, shape.to_vec()));
    push("time.lin1.weight".into(), &[cfg.time_features(), td]);
    push("time.lin1.bias".into(), &[td]);
    push("time.lin2.weight".into(), &[td, td]);
    push("time.lin2.bias".into(), &[td]);
    push("conv_in.weight".into(), &[c, cfg.in_channels, 3, 3]);
    push("conv_in.bias".into(), &[c]);
    for i in 1..=NUM_BLOCKS {
        let cin = cfg.block_in_channels(i);
        let cout = cfg.block_channels(i);
        let b = |s: &str| format!("block{i}.{s}");
        if i == 3 || i == 5 {
            let prev = cfg.block_channels(i - 1);
            push(b("down.weight"), &[prev, prev, 3, 3]);
            push(b("down.bias"), &[prev]);
        }
        push(b("res.norm1.gain"), &[cin]);
        push(b("res.norm1.shift"), &[cin]);
        push(b("res.conv1.weight"), &[cout, cin, 3, 3]);
        push(b("res.conv1.bias"), &[cout]);
        push(b("res.time.weight"), &[td, cout]);
        push(b("res.time.bias"), &[cout]);
        push(b("res.norm2.gain"), &[cout]);
        push(b("res.norm2.shift"), &[cout]);
        push(b("res.conv2.weight"), &[cout, cout, 3, 3]);
        push(b("res.conv2.bias"), &[cout]);
        if cin != cout {
            push(b("res.shortcut.weight"), &[cout, cin]);
        }
        push(b("attn.norm.gain"), &[cout]);
        push(b("attn.norm.shift"), &[cout]);
        push(b("attn.q.weight"), &[cout, cout]);
        push(b("attn.k.weight"), &[cfg.text_dim, cout]);
        push(b("attn.v.weight"), &[cfg.text_dim, cout]);
        push(b("attn.out.weight"), &[cout, cout]);
        push(b("attn.out.bias"), &[cout]);
        push(b("ff.norm.gain"), &[cout]);
        push(b("ff.norm.shift"), &[cout]);
        push(b("ff.lin1.weight"), &[cout, 2 * cout]);
        push(b("ff.lin1.bias"), &[2 * cout]);
        push(b("ff.lin2.weight"), &[2 * cout, cout]);
        push(b("ff.lin2.bias"), &[cout]);
    }
    push("out.norm.gain".into(), &[c]);
    push("out.norm.shift".into(), &[c]);
    push("out.conv.weight".into(), &[cfg.in_channels, c, 3, 3]);
    push("out.conv.bias".into(), &[cfg.in_channels]);
    m
}

/// Frozen network parameters, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    tensors: BTreeMap<String, Tensor>,
}

impl Weights {
    /// Seeded initialisation: norm gains 1, biases and shifts 0, every other
    /// tensor Gaussian with std `1/√fan_in` from a stream keyed by its name.
    pub fn init(cfg: &UNetConfig, seed: u64) -> Self {
        let tensors = manifest(cfg)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".gain") {
                    Tensor::full(&shape, 1.0)
                } else if name.ends_with(".bias") || name.ends_with(".shift") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in = match shape.as_slice() {
                        [_, cin, kh, kw] => cin * kh * kw,
                        // shortcut weights are stored out × in
                        [_, cin] if name.ends_with("shortcut.weight") => *cin,
                        [rows, _] => *rows,
                        _ => 1,
                    };
                    let std = 1.0 / libm::sqrt(fan_in as f64);
                    let mut rng = Rng::named_stream(seed, &name);
                    Tensor::from_fn(&shape, |_| (rng.next_gaussian() * std) as f32)
                };
                (name, t)
            })
            .collect();
        Self { tensors }
    }

    /// Checks `tensors` against the manifest: every name present with the
    /// right shape and nothing extra.
    pub fn from_tensors(cfg: &UNetConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let expected = manifest(cfg);
        for (name, shape) in &expected {
            match tensors.get(name) {
                None => return Err(Error::Weights(format!("missing tensor `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Weights(format!(
                        "tensor `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if tensors.len() != expected.len() {
            let extra = tensors.keys().find(|k| !expected.iter().any(|(n, _)| n == *k));
            return Err(Error::Weights(format!("unexpected tensor `{}`", extra.map_or("?", |s| s.as_str()))));
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Weights(format!("missing tensor `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }
}

/// `[sin(t·f_0..), cos(t·f_0..)]` with frequencies geometric from 1 down to
/// 1/10000.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Vec<f32> {
    let half = (dim / 2).max(1);
    let mut out = Vec::with_capacity(2 * half);
    let freq = |i: usize| {
        if half == 1 {
            1.0
        } else {
            libm::exp(-libm::log(10_000.0) * i as f64 / (half - 1) as f64)
        }
    };
    for i in 0..half {
        out.push(libm::sin(t as f64 * freq(i)) as f32);
    }
    for i in 0..half {
        out.push(libm::cos(t as f64 * freq(i)) as f32);
    }
    out
}

/// Sinusoidal features followed by the two-layer time MLP.
pub fn time_embedding(t: usize, cfg: &UNetConfig, w: &Weights) -> Result<Tensor> {
    let feats = cfg.time_features();
    let raw = Tensor::new(&[1, feats], sinusoidal_embedding(t, feats))?;
    let h = silu(&linear(&raw, w.get("time.lin1.weight")?, Some(w.get("time.lin1.bias")?))?);
    linear(&h, w.get("time.lin2.weight")?, Some(w.get("time.lin2.bias")?))
}

#[derive(Clone, Debug)]
pub struct UNet {
    cfg: UNetConfig,
    weights: Weights,
}

impl UNet {
    pub fn new(cfg: UNetConfig, weights: Weights) -> Result<Self> {
        cfg.validate()?;
        let weights = Weights::from_tensors(&cfg, weights.into_tensors())?;
        Ok(Self { cfg, weights })
    }

    pub fn seeded(cfg: UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, weights: Weights::init(&cfg, seed) })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    fn w(&self, name: &str) -> Result<&Tensor> {
        self.weights.get(name)
    }

    fn res_block(&self, block: usize, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let p = |s: &str| format!("block{block}.res.{s}");
        let (cin, h, w) = x.dims3()?;
        let a = silu(&channel_norm(x, self.w(&p("norm1.gain"))?, self.w(&p("norm1.shift"))?, NORM_EPS)?);
        let mut hid = conv2d(&a, self.w(&p("conv1.weight"))?, self.w(&p("conv1.bias"))?, 1)?;
        let tproj = linear(&silu(temb), self.w(&p("time.weight"))?, Some(self.w(&p("time.bias"))?))?;
        let plane = h * w;
        for (chan, &tv) in hid.data_mut().chunks_exact_mut(plane).zip(tproj.data()) {
            for v in chan.iter_mut() {
                *v += tv;
            }
        }
        let a = silu(&channel_norm(&hid, self.w(&p("norm2.gain"))?, self.w(&p("norm2.shift"))?, NORM_EPS)?);
        let hid = conv2d(&a, self.w(&p("conv2.weight"))?, self.w(&p("conv2.bias"))?, 1)?;
        let cout = hid.dims3()?.0;
        let shortcut = if cin == cout {
            x.clone()
        } else {
            let flat = x.clone().reshape(&[cin, plane])?;
            matmul(self.w(&p("shortcut.weight"))?, &flat)?.reshape(&[cout, h, w])?
        };
        shortcut.add(&hid)
    }

    fn transformer_block(
        &self,
        block: usize,
        x: &Tensor,
        cond: &PromptEmbedding,
        opts: &ForwardOptions<'_>,
        records: &mut Vec<AttentionRecord>,
    ) -> Result<Tensor> {
        let p = |s: &str| format!("block{block}.{s}");
        let (_, h, w) = x.dims3()?;
        let tokens = x.to_tokens()?;
        let normed = layer_norm(&tokens, self.w(&p("attn.norm.gain"))?, self.w(&p("attn.norm.shift"))?, NORM_EPS)?;
        let spec = opts.attention_mask.filter(|_| opts.am_blocks.contains(block));
        let att = masked_cross_attention(&normed, (h, w), cond, spec, &self.weights, block, self.cfg.heads)?;
        if opts.record_attention {
            let masked = spec.is_some_and(|s| !s.is_empty());
            for (head, probs) in att.probs.into_iter().enumerate() {
                records.push(AttentionRecord { block, head, height: h, width: w, probs, masked });
            }
        }
        let tokens = tokens.add(&att.output)?;
        let normed = layer_norm(&tokens, self.w(&p("ff.norm.gain"))?, self.w(&p("ff.norm.shift"))?, NORM_EPS)?;
        let hid = silu(&linear(&normed, self.w(&p("ff.lin1.weight"))?, Some(self.w(&p("ff.lin1.bias"))?))?);
        let ff = linear(&hid, self.w(&p("ff.lin2.weight"))?, Some(self.w(&p("ff.lin2.bias"))?))?;
        Tensor::from_tokens(&tokens.add(&ff)?, h, w)
    }
}

impl Denoiser for UNet {
    fn predict_eps(&self, x: &Tensor, t: usize, cond: &PromptEmbedding) -> Result<Tensor> {
        Ok(self.forward(x, t, cond, &ForwardOptions::default())?.eps)
    }
}

impl FeatureDenoiser for UNet {
    fn forward(&self, x: &Tensor, t: usize, cond: &PromptEmbedding, opts: &ForwardOptions<'_>) -> Result<ForwardOutput> {
        let (cin, h, w) = x.dims3()?;
        if cin != self.cfg.in_channels {
            return Err(Error::Dimension(format!("U-Net expects {} channels, got {cin}", self.cfg.in_channels)));
        }
        if cond.embeddings.dims2()?.1 != self.cfg.text_dim {
            return Err(Error::Dimension("prompt embedding width does not match the U-Net".into()));
        }
        if let Some(inj) = &opts.inject {
            for (&block, feat) in &inj.features.maps {
                let (bh, bw) = self.cfg.block_resolution(block, h, w);
                if !(1..=NUM_BLOCKS).contains(&block) {
                    return Err(Error::Injection(format!("no block {block}")));
                }
                if feat.shape() != [self.cfg.block_channels(block), bh, bw] {
                    return Err(Error::Injection(format!(
                        "block {block} produces [{}, {bh}, {bw}], injected {:?}",
                        self.cfg.block_channels(block),
                        feat.shape()
                    )));
                }
                if inj.masks.level(bh, bw).is_none() {
                    return Err(Error::Injection(format!("mask pyramid has no {bh}x{bw} level")));
                }
            }
        }

        let temb = time_embedding(t, &self.cfg, &self.weights)?;
        let mut taps = FeatureTapSet::default();
        let mut blended = FeatureTapSet::default();
        let mut attention = Vec::new();

        let mut hcur = conv2d(x, self.w("conv_in.weight")?, self.w("conv_in.bias")?, 1)?;
        let mut skips = alloc::vec![hcur.clone()];
        for block in 1..=NUM_BLOCKS {
            if block == 3 || block == 5 {
                let p = |s: &str| format!("block{block}.down.{s}");
                hcur = conv2d(&hcur, self.w(&p("weight"))?, self.w(&p("bias"))?, 2)?;
            }
            if let Some(src) = skip_source(block) {
                let skip = skips.pop().ok_or_else(|| Error::Dimension(format!("no skip for block {block}")))?;
                debug_assert_eq!(skips.len(), src);
                let (_, sh, sw) = skip.dims3()?;
                if block == 9 || block == 11 {
                    hcur = resize_nearest(&hcur, sh, sw)?;
                }
                hcur = concat_channels(&hcur, &skip)?;
            }
            hcur = self.res_block(block, &hcur, &temb)?;
            hcur = self.transformer_block(block, &hcur, cond, opts, &mut attention)?;

            if opts.taps.contains(block) {
                taps.maps.insert(block, hcur.clone());
            }
            if let Some(inj) = &opts.inject {
                if let Some(source) = inj.features.get(block) {
                    let (_, bh, bw) = hcur.dims3()?;
                    let m = inj.masks.level(bh, bw).expect("checked above");
                    hcur = blend_features(source, &hcur, m)?;
                    if opts.record_blended {
                        blended.maps.insert(block, hcur.clone());
                    }
                }
            }
            if block <= 5 {
                skips.push(hcur.clone());
            }
        }

        let normed = silu(&channel_norm(&hcur, self.w("out.norm.gain")?, self.w("out.norm.shift")?, NORM_EPS)?);
        let eps = conv2d(&normed, self.w("out.conv.weight")?, self.w("out.conv.bias")?, 1)?;
        Ok(ForwardOutput { eps, taps, blended, attention })
    }

    fn feature_resolutions(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut res: Vec<(usize, usize)> = (1..=NUM_BLOCKS).map(|b| self.cfg.block_resolution(b, h, w)).collect();
        res.sort_unstable();
        res.dedup();
        res
    }
}

impl BlockSet {
    /// Blocks whose feature map has the given resolution.
    pub fn at_resolution(cfg: &UNetConfig, h: usize, w: usize, target: (usize, usize)) -> Self {
        Self::from_blocks((1..=NUM_BLOCKS).filter(|&b| cfg.block_resolution(b, h, w) == target))
    }
}
