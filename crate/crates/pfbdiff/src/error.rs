//! Machine-readable error bodies shared by the CLI and the service.

use pfbdiff_core::pipeline::{ValidationReport, Violation};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    /// The first violation's code for validation failures, otherwise a
    /// category such as `image_format` or `io`.
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<Violation>,
}

impl ErrorBody {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self { code: code.into(), message: message.into(), violations: Vec::new() }
    }

    pub fn field(field: &str, code: &str, message: impl Into<String>) -> Self {
        let mut report = ValidationReport::default();
        report.push(field, code, message);
        Self::from_report(report)
    }

    pub fn from_report(report: ValidationReport) -> Self {
        let code = report.violations.first().map_or_else(|| "validation".to_string(), |v| v.code.clone());
        Self { code, message: report.to_string(), violations: report.violations }
    }

    pub fn from_core(err: pfbdiff_core::Error) -> Self {
        use pfbdiff_core::Error as E;
        match err {
            E::Validation(report) => Self::from_report(report),
            E::MaskShape { .. } => Self::new("mask_shape", err.to_string()),
            E::WordNotFound(_) => Self::new("word_not_found", err.to_string()),
            E::DegenerateMask(_) => Self::new("degenerate_mask", err.to_string()),
            E::Weights(_) => Self::new("weights", err.to_string()),
            E::Config(_) => Self::new("config", err.to_string()),
            other => Self::new("engine", other.to_string()),
        }
    }

    /// Whether the error is the caller's fault rather than the engine's.
    pub fn is_validation(&self) -> bool {
        !matches!(self.code.as_str(), "engine" | "io" | "weights")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("error bodies serialize")
    }
}
