use alloc::string::String;

use crate::pipeline::ValidationReport;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),
    #[error("timestep {t} outside 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("timestep order violation: {from} -> {to}")]
    TimestepOrder { from: usize, to: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("word `{0}` does not occur in the prompt")]
    WordNotFound(String),
    #[error("feature injection error: {0}")]
    Injection(String),
    #[error("weights error: {0}")]
    Weights(String),
    #[error("mask is {mask_h}x{mask_w} but the image is {image_h}x{image_w}")]
    MaskShape {
        image_h: usize,
        image_w: usize,
        mask_h: usize,
        mask_w: usize,
    },
    #[error("invalid edit configuration: {0}")]
    Validation(ValidationReport),
}
