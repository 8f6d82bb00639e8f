//! A loaded model plus the text conditioner it was built for.

use std::path::Path;

use pfbdiff_core::denoiser::{UNet, UNetConfig, Weights};
use pfbdiff_core::pipeline::{edit, EditRequest};
use pfbdiff_core::textcond::TextConfig;
use pfbdiff_core::Tensor;

use crate::weights_file::{self, WeightsFileError};

/// Seed of the weights used when no weights file is given.
pub const DEFAULT_WEIGHTS_SEED: u64 = 0x5eed;

#[derive(Clone, Debug)]
pub struct Engine {
    pub model: UNet,
    pub text: TextConfig,
}

impl Engine {
    pub fn seeded(seed: u64) -> Self {
        let model = UNet::seeded(UNetConfig::default(), seed).expect("default U-Net config is valid");
        Self { model, text: TextConfig::default() }
    }

    pub fn load(path: &Path) -> Result<Self, WeightsFileError> {
        let cfg = UNetConfig::default();
        let weights: Weights = weights_file::read_weights(path, &cfg)?;
        Ok(Self { model: UNet::new(cfg, weights)?, text: TextConfig::default() })
    }

    /// Loads `path` when given, otherwise seeds the default weights.
    pub fn from_option(path: Option<&Path>) -> Result<Self, WeightsFileError> {
        path.map_or_else(|| Ok(Self::seeded(DEFAULT_WEIGHTS_SEED)), Self::load)
    }

    pub fn edit(&self, req: &EditRequest) -> pfbdiff_core::Result<Tensor> {
        edit(req, &self.model, &self.text)
    }
}
