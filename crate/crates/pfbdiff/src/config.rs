//! JSON edit configuration documents.
//!
//! A document mirrors the field names of [`EditConfig`]; every field is
//! optional. Missing fields take the defaults of the document's `mode` (or
//! of the mode given on the command line). `pfb_blocks` and `am_blocks`
//! accept `null` to switch the mechanism off.

use std::path::Path;

use pfbdiff_core::pipeline::{BlockRange, EditConfig, EditMode};
use pfbdiff_core::schedule::ScheduleConfig;
use serde::{Deserialize, Deserializer, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditConfigDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<EditMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encode_ratio: Option<f64>,
    #[serde(default, deserialize_with = "present", skip_serializing_if = "Option::is_none")]
    pub pfb_blocks: Option<Option<BlockRange>>,
    #[serde(default, deserialize_with = "present", skip_serializing_if = "Option::is_none")]
    pub am_blocks: Option<Option<BlockRange>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_blend_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail_drop_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub am_words: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleConfig>,
}

/// Distinguishes an explicit `null` (`Some(None)`) from an absent field
/// (`None`, via `#[serde(default)]`).
fn present<'de, D, T>(d: D) -> Result<Option<Option<T>>, D::Error>
where
    D: Deserializer<'de>,
    T: Deserialize<'de>,
{
    Option::<T>::deserialize(d).map(Some)
}

impl EditConfigDoc {
    /// Fills the gaps from the defaults of `fallback_mode` (overridden by the
    /// document's own `mode`).
    pub fn resolve(&self, fallback_mode: EditMode) -> EditConfig {
        let base = EditConfig::defaults(self.mode.unwrap_or(fallback_mode));
        EditConfig {
            mode: base.mode,
            steps: self.steps.unwrap_or(base.steps),
            encode_ratio: self.encode_ratio.unwrap_or(base.encode_ratio),
            pfb_blocks: self.pfb_blocks.unwrap_or(base.pfb_blocks),
            am_blocks: self.am_blocks.unwrap_or(base.am_blocks),
            pixel_blend_fraction: self.pixel_blend_fraction.unwrap_or(base.pixel_blend_fraction),
            tail_drop_fraction: self.tail_drop_fraction.unwrap_or(base.tail_drop_fraction),
            am_words: self.am_words.clone().unwrap_or(base.am_words),
            seed: self.seed.unwrap_or(base.seed),
            schedule: self.schedule.unwrap_or(base.schedule),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid config document: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn parse_doc(text: &str) -> Result<EditConfigDoc, ConfigError> {
    Ok(serde_json::from_str(text)?)
}

pub fn load_doc(path: &Path) -> Result<EditConfigDoc, ConfigError> {
    parse_doc(&std::fs::read_to_string(path)?)
}

/// Per-mode defaults, as served by the defaults endpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefaultsDump {
    pub object: EditConfig,
    pub background: EditConfig,
}

pub fn defaults_dump() -> DefaultsDump {
    DefaultsDump { object: EditConfig::defaults(EditMode::Object), background: EditConfig::defaults(EditMode::Background) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_doc_gives_defaults() {
        let doc = parse_doc("{}").unwrap();
        assert_eq!(doc.resolve(EditMode::Object), EditConfig::defaults(EditMode::Object));
        assert_eq!(doc.resolve(EditMode::Background), EditConfig::defaults(EditMode::Background));
    }

    #[test]
    fn mode_in_doc_selects_defaults() {
        let cfg = parse_doc(r#"{"mode": "background", "steps": 20}"#).unwrap().resolve(EditMode::Object);
        assert_eq!(cfg.mode, EditMode::Background);
        assert_eq!((cfg.steps, cfg.pixel_blend_fraction, cfg.tail_drop_fraction), (20, 0.2, 0.2));
    }

    #[test]
    fn null_disables_blocks() {
        let cfg = parse_doc(r#"{"pfb_blocks": null, "am_blocks": {"first": 5, "last": 9}}"#)
            .unwrap()
            .resolve(EditMode::Object);
        assert_eq!(cfg.pfb_blocks, None);
        assert_eq!(cfg.am_blocks, Some(BlockRange::new(5, 9)));
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(parse_doc(r#"{"stepz": 3}"#).is_err());
    }

    #[test]
    fn full_config_round_trips_through_doc() {
        let cfg = EditConfig { am_words: vec!["dog".into()], seed: 77, ..EditConfig::defaults(EditMode::Background) };
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(parse_doc(&json).unwrap().resolve(EditMode::Object), cfg);
    }

    #[test]
    fn defaults_dump_shape() {
        let v = serde_json::to_value(defaults_dump()).unwrap();
        assert_eq!(v["object"]["steps"], 50);
        assert_eq!(v["object"]["pfb_blocks"]["first"], 8);
        assert_eq!(v["background"]["tail_drop_fraction"], 0.2);
    }
}
