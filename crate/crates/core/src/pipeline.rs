//! The edit procedure.
//!
//! 1. Embed the source prompt (`C`) and target prompt (`C*`).
//! 2. DDIM-encode the input `y_0` under `C`, keeping every `y_t`.
//! 3. Start from seeded Gaussian noise (or from `y` at the encode depth when
//!    the encode ratio is below 1).
//! 4. At each step `t → t_prev`: a source pass on `y_t` under `C` records the
//!    features of the blending blocks; an edited pass on `x_t` under `C*`
//!    blends them in outside the mask and applies attention masking; the
//!    edited noise estimate drives one DDIM step. During the first steps the
//!    new latent is additionally blended with `y_{t_prev}` outside the mask.
//!    During a trailing fraction of steps blending and attention masking are
//!    switched off and only the edited pass runs.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::blend::{blend_pixels_into, build_mask_pyramid};
use crate::denoiser::{
    AttentionMaskSpec, AttentionRecord, BlockSet, Denoiser, FeatureDenoiser, FeatureTapSet, ForwardOptions, Injection,
    NUM_BLOCKS,
};
use crate::rng::Rng;
use crate::schedule::{
    ddim_encode_loop, ddim_sample_loop, encode_depth, NoiseSchedule, SamplerState, ScheduleConfig, TimestepPlan,
};
use crate::textcond::{encode_prompt, word_token_indices, PromptEmbedding, TextConfig};
use crate::{Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum EditMode {
    /// Replace or restyle an object inside the mask.
    Object,
    /// Replace the scene around the masked object.
    Background,
}

/// An inclusive range of U-Net block indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BlockRange {
    pub first: usize,
    pub last: usize,
}

impl BlockRange {
    pub const fn new(first: usize, last: usize) -> Self {
        Self { first, last }
    }

    pub fn is_valid(&self) -> bool {
        1 <= self.first && self.first <= self.last && self.last <= NUM_BLOCKS
    }

    pub fn to_set(self) -> BlockSet {
        BlockSet::range(self.first, self.last)
    }
}

impl fmt::Display for BlockRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.first, self.last)
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EditConfig {
    pub mode: EditMode,
    /// Number of DDIM steps in the full plan.
    pub steps: usize,
    /// Fraction of the plan the input is encoded through before editing.
    pub encode_ratio: f64,
    /// Blocks whose features are blended with the source pass; `None`
    /// disables feature blending.
    pub pfb_blocks: Option<BlockRange>,
    /// Blocks whose cross-attention honours the attention mask; `None`
    /// disables attention masking.
    pub am_blocks: Option<BlockRange>,
    /// Leading fraction of sampler steps followed by latent blending.
    pub pixel_blend_fraction: f64,
    /// Trailing fraction of sampler steps run without feature blending or
    /// attention masking.
    pub tail_drop_fraction: f64,
    /// Target-prompt words whose attention is confined to the mask.
    pub am_words: Vec<String>,
    pub seed: u64,
    pub schedule: ScheduleConfig,
}

impl EditConfig {
    pub fn defaults(mode: EditMode) -> Self {
        let (pixel_blend_fraction, tail_drop_fraction) = match mode {
            EditMode::Object => (0.5, 0.0),
            EditMode::Background => (0.2, 0.2),
        };
        Self {
            mode,
            steps: 50,
            encode_ratio: 1.0,
            pfb_blocks: Some(BlockRange::new(8, 13)),
            am_blocks: Some(BlockRange::new(4, 13)),
            pixel_blend_fraction,
            tail_drop_fraction,
            am_words: Vec::new(),
            seed: 0,
            schedule: ScheduleConfig::default(),
        }
    }

    fn pfb_set(&self) -> BlockSet {
        self.pfb_blocks.map_or(BlockSet::EMPTY, BlockRange::to_set)
    }

    fn am_set(&self) -> BlockSet {
        self.am_blocks.map_or(BlockSet::EMPTY, BlockRange::to_set)
    }
}

impl Default for EditConfig {
    fn default() -> Self {
        Self::defaults(EditMode::Object)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditRequest {
    /// `C × H × W` input image in `[-1, 1]`.
    pub image: Tensor,
    /// `H × W` binary mask; 1 marks the region to edit.
    pub mask: Tensor,
    pub source_prompt: String,
    pub target_prompt: String,
    pub config: EditConfig,
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Violation {
    pub field: String,
    pub code: String,
    pub message: String,
}

/// Every problem found in a request, not just the first.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn push(&mut self, field: &str, code: &str, message: impl Into<String>) {
        self.violations.push(Violation { field: field.into(), code: code.into(), message: message.into() });
    }

    pub fn has_code(&self, code: &str) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }

    pub fn into_result(self) -> Result<(), Self> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(self)
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{}: {} ({})", v.field, v.message, v.code)?;
        }
        Ok(())
    }
}

fn check_fraction(report: &mut ValidationReport, field: &str, v: f64) {
    if !(0.0..=1.0).contains(&v) {
        report.push(field, "fraction_range", format!("{v} is outside [0, 1]"));
    }
}

fn check_blocks(report: &mut ValidationReport, field: &str, r: Option<BlockRange>) {
    if let Some(r) = r {
        if !r.is_valid() {
            report.push(field, "block_range", format!("{r} is not a non-empty range inside 1..{NUM_BLOCKS}"));
        }
    }
}

/// Checks a configuration against the target prompt.
pub fn validate_config(cfg: &EditConfig, target_prompt: &str, text: &TextConfig) -> Result<(), ValidationReport> {
    let mut report = ValidationReport::default();
    config_violations(&mut report, cfg, target_prompt, text);
    report.into_result()
}

fn config_violations(report: &mut ValidationReport, cfg: &EditConfig, target_prompt: &str, text: &TextConfig) {
    let sched = &cfg.schedule;
    let sched_ok = sched.build().is_ok();
    if !sched_ok {
        report.push(
            "schedule",
            "schedule",
            format!(
                "need train_steps >= 1 and 0 < beta_start <= beta_end < 1, got {} / {} / {}",
                sched.train_steps, sched.beta_start, sched.beta_end
            ),
        );
    }
    if cfg.steps < 2 {
        report.push("steps", "steps_range", format!("need at least 2 steps, got {}", cfg.steps));
    } else if sched_ok && cfg.steps > sched.train_steps {
        report.push("steps", "steps_range", format!("{} steps exceed {} training steps", cfg.steps, sched.train_steps));
    }
    if !(cfg.encode_ratio > 0.0 && cfg.encode_ratio <= 1.0) {
        report.push("encode_ratio", "fraction_range", format!("{} is outside (0, 1]", cfg.encode_ratio));
    } else if cfg.steps >= 2 && encode_depth(cfg.steps, cfg.encode_ratio).is_err() {
        report.push("encode_ratio", "fraction_range", format!("{} covers no step of {}", cfg.encode_ratio, cfg.steps));
    }
    check_fraction(report, "pixel_blend_fraction", cfg.pixel_blend_fraction);
    check_fraction(report, "tail_drop_fraction", cfg.tail_drop_fraction);
    check_blocks(report, "pfb_blocks", cfg.pfb_blocks);
    check_blocks(report, "am_blocks", cfg.am_blocks);
    for word in &cfg.am_words {
        match word_token_indices(target_prompt, word, text) {
            Ok(_) => {}
            Err(Error::WordNotFound(_)) => {
                report.push("am_words", "word_not_found", format!("`{word}` does not occur in the target prompt"))
            }
            Err(e) => report.push("am_words", "word_invalid", e.to_string()),
        }
    }
}

/// Checks the whole request: image and mask shapes, prompts and config.
pub fn validate_request(req: &EditRequest, text: &TextConfig) -> Result<(), ValidationReport> {
    let mut report = ValidationReport::default();
    match (req.image.dims3(), req.mask.dims2()) {
        (Ok((_, ih, iw)), Ok((mh, mw))) => {
            if (ih, iw) != (mh, mw) {
                report.push("mask", "mask_shape", format!("mask is {mh}x{mw} but the image is {ih}x{iw}"));
            }
        }
        (img, mask) => {
            if img.is_err() {
                report.push("image", "image_shape", format!("expected C x H x W, got {:?}", req.image.shape()));
            }
            if mask.is_err() {
                report.push("mask", "mask_shape", format!("expected H x W, got {:?}", req.mask.shape()));
            }
        }
    }
    if !req.mask.is_binary() {
        report.push("mask", "mask_not_binary", "mask values must be 0 or 1");
    }
    if !req.image.is_finite() {
        report.push("image", "image_not_finite", "image contains NaN or infinity");
    }
    for (field, prompt) in [("source_prompt", &req.source_prompt), ("target_prompt", &req.target_prompt)] {
        if crate::textcond::split_words(prompt).is_empty() {
            report.push(field, "empty_prompt", "prompt has no words");
        }
    }
    config_violations(&mut report, &req.config, &req.target_prompt, text);
    report.into_result()
}

/// Seeded standard-normal starting latent.
pub fn initial_noise(seed: u64, shape: &[usize]) -> Tensor {
    Rng::named_stream(seed, "initial-noise").gaussian_tensor(shape)
}

/// `⌊f·n⌋`, guarded against `0.2·50` landing a hair below 10.
fn fraction_of(f: f64, n: usize) -> usize {
    (libm::floor(f * n as f64 + 1e-9) as usize).min(n)
}

/// What happened at one sampler step.
#[derive(Debug)]
pub struct StepTrace<'a> {
    /// 0 for the first (noisiest) step.
    pub index: usize,
    pub t: usize,
    pub t_prev: usize,
    pub pfb_active: bool,
    pub am_active: bool,
    pub pixel_blend: bool,
    /// Denoiser forwards this step issued.
    pub forwards: usize,
    /// Source-pass features at the blending blocks (when blending was active).
    pub source_features: Option<&'a FeatureTapSet>,
    /// Edited-pass features after blending (only with detailed tracing).
    pub blended_features: &'a FeatureTapSet,
    /// Edited-pass attention weights (only with detailed tracing).
    pub attention: &'a [AttentionRecord],
    pub eps: &'a Tensor,
    /// `x_{t_prev}` after any latent blending.
    pub x_prev: &'a Tensor,
    /// Encoded source `y_{t_prev}`.
    pub y_prev: &'a Tensor,
}

/// Instrumentation hooks for [`edit_with_observer`].
pub trait EditObserver {
    /// Request blended features and attention weights in [`StepTrace`].
    fn detailed(&self) -> bool {
        false
    }

    /// Called once with the encoded trajectory `(t, y_t)`, ascending in `t`.
    fn on_encoded(&mut self, _trajectory: &[(usize, Tensor)]) {}

    fn on_step(&mut self, _step: &StepTrace<'_>) {}
}

impl EditObserver for () {}

#[derive(Clone, Debug, PartialEq)]
pub struct EditOutcome {
    pub image: Tensor,
    /// Denoiser forwards spent encoding the input.
    pub encode_forwards: usize,
    /// Denoiser forwards spent at each sampler step.
    pub step_forwards: Vec<usize>,
}

/// Runs an edit and returns the edited image.
pub fn edit<M: FeatureDenoiser + ?Sized>(req: &EditRequest, model: &M, text: &TextConfig) -> Result<Tensor> {
    Ok(edit_with_observer(req, model, text, &mut ())?.image)
}

/// Attention masks for every token of every `am_words` entry, each
/// confined to the mask region.
fn attention_spec(req: &EditRequest, text: &TextConfig, seq_len: usize) -> Result<AttentionMaskSpec> {
    let mut masks = BTreeMap::new();
    for word in &req.config.am_words {
        for idx in word_token_indices(&req.target_prompt, word, text)? {
            masks.insert(idx, req.mask.clone());
        }
    }
    AttentionMaskSpec::new(masks, seq_len)
}

pub fn edit_with_observer<M: FeatureDenoiser + ?Sized, O: EditObserver + ?Sized>(
    req: &EditRequest,
    model: &M,
    text: &TextConfig,
    observer: &mut O,
) -> Result<EditOutcome> {
    validate_request(req, text).map_err(Error::Validation)?;
    let cfg = &req.config;
    let schedule = cfg.schedule.build()?;
    let (_, h, w) = req.image.dims3()?;

    let source = encode_prompt(&req.source_prompt, text)?;
    let target = encode_prompt(&req.target_prompt, text)?;
    let am_spec = attention_spec(req, text, target.len())?;
    let pyramid = build_mask_pyramid(&req.mask, &model.feature_resolutions(h, w))?;

    let encode_plan = TimestepPlan::encode(schedule.train_steps(), cfg.steps, cfg.encode_ratio)?;
    let trajectory = ddim_encode_loop(model, &req.image, &source, &encode_plan, &schedule)?;
    let depth = encode_plan.steps();
    observer.on_encoded(&trajectory);

    let mut x = SamplerState::from_tensor(&if depth == cfg.steps {
        initial_noise(cfg.seed, req.image.shape())
    } else {
        trajectory[depth].1.clone()
    });

    let pfb = cfg.pfb_set();
    let am = cfg.am_set();
    let blend_steps = fraction_of(cfg.pixel_blend_fraction, depth);
    let tail_start = depth - fraction_of(cfg.tail_drop_fraction, depth);
    let detailed = observer.detailed();
    let mut step_forwards = Vec::with_capacity(depth);

    for k in 0..depth {
        let j = depth - k;
        let (t, y_t) = (trajectory[j].0, &trajectory[j].1);
        let (t_prev, y_prev) = (trajectory[j - 1].0, &trajectory[j - 1].1);
        let in_tail = k >= tail_start;
        let pfb_active = !in_tail && !pfb.is_empty();
        let am_active = !in_tail && !am.is_empty() && !am_spec.is_empty();
        let mut forwards = 0;

        let source_taps = if pfb_active {
            forwards += 1;
            let opts = ForwardOptions { taps: pfb, ..Default::default() };
            Some(model.forward(y_t, t, &source, &opts)?.taps)
        } else {
            None
        };

        let opts = ForwardOptions {
            attention_mask: am_active.then_some(&am_spec),
            am_blocks: if am_active { am } else { BlockSet::EMPTY },
            inject: source_taps.as_ref().map(|features| Injection { features, masks: &pyramid }),
            taps: BlockSet::EMPTY,
            record_blended: detailed,
            record_attention: detailed,
        };
        let edited = model.forward(&x.to_tensor(), t, &target, &opts)?;
        forwards += 1;

        x.ddim_step(&edited.eps, t, t_prev, &schedule)?;
        let pixel_blend = k < blend_steps;
        if pixel_blend {
            blend_pixels_into(y_prev, &mut x, &req.mask)?;
        }
        let x_prev = x.to_tensor();
        observer.on_step(&StepTrace {
            index: k,
            t,
            t_prev,
            pfb_active,
            am_active,
            pixel_blend,
            forwards,
            source_features: source_taps.as_ref(),
            blended_features: &edited.blended,
            attention: &edited.attention,
            eps: &edited.eps,
            x_prev: &x_prev,
            y_prev,
        });
        step_forwards.push(forwards);
    }
    Ok(EditOutcome { image: x.to_tensor(), encode_forwards: depth, step_forwards })
}

/// `decode(encode(image))` over a uniform `steps`-step plan under one
/// prompt embedding.
pub fn reconstruct<D: Denoiser + ?Sized>(
    image: &Tensor,
    cond: &PromptEmbedding,
    steps: usize,
    model: &D,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let plan = TimestepPlan::uniform(schedule.train_steps(), steps)?;
    let encoded = ddim_encode_loop(model, image, cond, &plan.reversed(), schedule)?;
    let (_, y_t) = encoded.last().expect("plan has at least two entries");
    ddim_sample_loop(model, y_t, cond, &plan, schedule)
}
