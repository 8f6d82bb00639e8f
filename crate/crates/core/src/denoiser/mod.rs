//! Noise-prediction networks.
//!
//! [`Denoiser`] is the minimal contract the sampler needs. [`FeatureDenoiser`]
//! adds what the editor needs on top: per-block feature taps, feature
//! injection under a mask pyramid, and per-token cross-attention masks.

mod attention;
mod unet;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

pub use attention::{attention_core, masked_cross_attention, AttentionOutput};
pub use unet::{manifest, sinusoidal_embedding, time_embedding, UNet, UNetConfig, Weights};

use crate::blend::MaskPyramid;
use crate::textcond::PromptEmbedding;
use crate::{Error, Result, Tensor};

/// Number of residual + transformer blocks in the toy U-Net.
pub const NUM_BLOCKS: usize = 13;

pub trait Denoiser {
    /// Noise estimate `ε(x_t, t, cond)`.
    fn predict_eps(&self, x: &Tensor, t: usize, cond: &PromptEmbedding) -> Result<Tensor>;
}

impl<T: Denoiser + ?Sized> Denoiser for &T {
    fn predict_eps(&self, x: &Tensor, t: usize, cond: &PromptEmbedding) -> Result<Tensor> {
        (**self).predict_eps(x, t, cond)
    }
}

pub trait FeatureDenoiser: Denoiser {
    fn forward(&self, x: &Tensor, t: usize, cond: &PromptEmbedding, opts: &ForwardOptions<'_>) -> Result<ForwardOutput>;

    /// Every `(h, w)` a feature map takes for an `h × w` input.
    fn feature_resolutions(&self, h: usize, w: usize) -> Vec<(usize, usize)>;
}

impl<T: FeatureDenoiser + ?Sized> FeatureDenoiser for &T {
    fn forward(&self, x: &Tensor, t: usize, cond: &PromptEmbedding, opts: &ForwardOptions<'_>) -> Result<ForwardOutput> {
        (**self).forward(x, t, cond, opts)
    }

    fn feature_resolutions(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        (**self).feature_resolutions(h, w)
    }
}

/// A set of block indices in `1..=13`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct BlockSet(u16);

impl BlockSet {
    pub const EMPTY: Self = Self(0);

    pub fn all() -> Self {
        Self::range(1, NUM_BLOCKS)
    }

    /// Inclusive range, clipped to `1..=13`.
    pub fn range(first: usize, last: usize) -> Self {
        let mut bits = 0u16;
        for i in first.max(1)..=last.min(NUM_BLOCKS) {
            bits |= 1 << i;
        }
        Self(bits)
    }

    pub fn from_blocks(blocks: impl IntoIterator<Item = usize>) -> Self {
        let mut bits = 0u16;
        for i in blocks {
            if (1..=NUM_BLOCKS).contains(&i) {
                bits |= 1 << i;
            }
        }
        Self(bits)
    }

    pub fn contains(self, block: usize) -> bool {
        block <= NUM_BLOCKS && self.0 & (1 << block) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (1..=NUM_BLOCKS).filter(move |&i| self.contains(i))
    }
}

/// Transformer-block outputs keyed by block index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureTapSet {
    pub maps: BTreeMap<usize, Tensor>,
}

impl FeatureTapSet {
    pub fn get(&self, block: usize) -> Option<&Tensor> {
        self.maps.get(&block)
    }

    pub fn blocks(&self) -> BlockSet {
        BlockSet::from_blocks(self.maps.keys().copied())
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// Per-token spatial masks for cross-attention.
///
/// A token with a mask may only receive attention at positions where its
/// mask is 1. Tokens without a mask are unrestricted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionMaskSpec {
    masks: BTreeMap<usize, Tensor>,
}

impl AttentionMaskSpec {
    /// Validates that every mask is binary, that all masks share one
    /// resolution, and that every position keeps at least one token out of
    /// `seq_len`.
    pub fn new(masks: BTreeMap<usize, Tensor>, seq_len: usize) -> Result<Self> {
        let mut dims = None;
        for (&tok, m) in &masks {
            if tok >= seq_len {
                return Err(Error::Input(format!("masked token {tok} outside sequence of {seq_len}")));
            }
            let d = crate::blend::check_binary_mask(m)?;
            if *dims.get_or_insert(d) != d {
                return Err(Error::Dimension("attention masks differ in resolution".into()));
            }
        }
        if masks.len() == seq_len {
            if let Some((h, w)) = dims {
                for p in 0..h * w {
                    if masks.values().all(|m| m.data()[p] == 0.0) {
                        return Err(Error::DegenerateMask(format!(
                            "every token is masked out at position ({}, {})",
                            p / w,
                            p % w
                        )));
                    }
                }
            }
        }
        Ok(Self { masks })
    }

    /// The same region for each listed token.
    pub fn uniform(tokens: &[usize], region: &Tensor, seq_len: usize) -> Result<Self> {
        Self::new(tokens.iter().map(|&t| (t, region.clone())).collect(), seq_len)
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &BTreeMap<usize, Tensor> {
        &self.masks
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Injection<'a> {
    /// Source-pass features to blend in, keyed by block.
    pub features: &'a FeatureTapSet,
    pub masks: &'a MaskPyramid,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub attention_mask: Option<&'a AttentionMaskSpec>,
    /// Blocks whose cross-attention applies `attention_mask`.
    pub am_blocks: BlockSet,
    pub inject: Option<Injection<'a>>,
    /// Blocks whose (pre-blend) transformer output is returned in `taps`.
    pub taps: BlockSet,
    /// Also return the post-blend features of every injected block.
    pub record_blended: bool,
    /// Also return the attention probabilities of every block and head.
    pub record_attention: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub block: usize,
    pub head: usize,
    pub height: usize,
    pub width: usize,
    /// `HW × L` attention weights.
    pub probs: Tensor,
    pub masked: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub eps: Tensor,
    pub taps: FeatureTapSet,
    pub blended: FeatureTapSet,
    pub attention: Vec<AttentionRecord>,
}

/// Wraps a denoiser and counts every forward pass it serves.
#[derive(Debug, Default)]
pub struct Counted<D> {
    inner: D,
    calls: AtomicUsize,
}

impl<D> Counted<D> {
    pub fn new(inner: D) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn count(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    pub fn inner(&self) -> &D {
        &self.inner
    }
}

impl<D: Denoiser> Denoiser for Counted<D> {
    fn predict_eps(&self, x: &Tensor, t: usize, cond: &PromptEmbedding) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.predict_eps(x, t, cond)
    }
}

impl<D: FeatureDenoiser> FeatureDenoiser for Counted<D> {
    fn forward(&self, x: &Tensor, t: usize, cond: &PromptEmbedding, opts: &ForwardOptions<'_>) -> Result<ForwardOutput> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.forward(x, t, cond, opts)
    }

    fn feature_resolutions(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        self.inner.feature_resolutions(h, w)
    }
}
