//! Deterministic synthetic model family.
//!
//! The quality proxy in [`proxy`] is a curve fit to reference quality
//! measurements. It is not an emulation of any learned video-quality metric;
//! it only reproduces the shape of the quality/acceptance trade-off.

pub mod models;
pub mod proxy;
pub mod quality;

pub use models::{FidelityScorer, SyntheticDecoder, SyntheticGenerator};
pub use proxy::{fit_quality_proxy, QualityProxyFit, QualityProxyModel, QualityTargets};
pub use quality::{fit_frame_offset, fit_quantile, DraftQualityModel, QuantileKnot, TailSlopes};

use crate::calibration::Calibration;
use crate::config::GenerationConfig;
use crate::digest::derive_seed;
use crate::engine::Models;

/// Drafter, target, scorer and quality proxy built from one calibration.
/// Immutable and shareable across threads; decoders are per run.
pub struct SyntheticFamily {
    config: GenerationConfig,
    pub drafter: SyntheticGenerator,
    pub target: SyntheticGenerator,
    pub scorer: FidelityScorer,
    pub quality: QualityProxyModel,
}

impl SyntheticFamily {
    /// Draft scores depend on both the calibration seed and the run seed.
    pub fn new(config: &GenerationConfig, calibration: &Calibration) -> Self {
        let q = &calibration.draft_quality;
        let draft = q
            .clone()
            .with_seed(derive_seed(q.rng_seed, &["run", &config.seed.to_string()]));
        Self {
            config: config.clone(),
            drafter: SyntheticGenerator::drafter(config, draft),
            target: SyntheticGenerator::target(config),
            scorer: FidelityScorer,
            quality: calibration.quality_proxy.clone(),
        }
    }

    pub fn models(&self) -> Models<'_> {
        Models {
            drafter: &self.drafter,
            target: &self.target,
            scorer: &self.scorer,
            quality: &self.quality,
        }
    }

    pub fn decoder(&self) -> SyntheticDecoder {
        SyntheticDecoder::new(&self.config)
    }

    pub fn config(&self) -> &GenerationConfig {
        &self.config
    }
}
