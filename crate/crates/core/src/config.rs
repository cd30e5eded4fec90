//! Generation protocol constants.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which decoded frames the router scores.
///
/// `Pixel` scores every decoded pixel frame (9 for the first block, 12 after).
/// `Latent` scores one representative pixel frame per latent frame, giving
/// `latent_frames_per_block` scores per block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScoredFrames {
    #[default]
    Pixel,
    Latent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub num_blocks: usize,
    pub denoise_steps: usize,
    pub timestep_schedule: Vec<u32>,
    pub guidance_scale: f64,
    pub timestep_shift: f64,
    pub latent_frames_per_block: usize,
    /// Desk-scale latent channel count.
    pub latent_channels: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub pixel_frames_first_block: usize,
    pub pixel_frames_later_block: usize,
    pub scored_frames: ScoredFrames,
    /// Score force-rejected drafts anyway (diagnostics only; never changes
    /// the decision).
    pub score_forced_blocks: bool,
    /// Routing threshold: a draft is accepted iff its block score `>=` this.
    pub threshold: f64,
    pub seed: u64,
    /// Metadata only.
    pub resolution: Resolution,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        default_config()
    }
}

/// The reference generation protocol: 9 blocks of 4 denoising steps.
pub fn default_config() -> GenerationConfig {
    GenerationConfig {
        num_blocks: 9,
        denoise_steps: 4,
        timestep_schedule: vec![1000, 937, 833, 625, 0],
        guidance_scale: 3.0,
        timestep_shift: 5.0,
        latent_frames_per_block: 3,
        latent_channels: 4,
        latent_height: 8,
        latent_width: 8,
        pixel_frames_first_block: 9,
        pixel_frames_later_block: 12,
        scored_frames: ScoredFrames::Pixel,
        score_forced_blocks: false,
        threshold: -0.7,
        seed: 42,
        resolution: Resolution {
            width: 832,
            height: 480,
        },
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_blocks == 0 {
            return bad("num_blocks must be >= 1".into());
        }
        if self.denoise_steps == 0 {
            return bad("denoise_steps must be >= 1".into());
        }
        if self.timestep_schedule.len() != self.denoise_steps + 1 {
            return bad(format!(
                "timestep_schedule needs {} entries, has {}",
                self.denoise_steps + 1,
                self.timestep_schedule.len()
            ));
        }
        if !self.timestep_schedule.windows(2).all(|w| w[0] > w[1]) {
            return bad("timestep_schedule must be strictly decreasing".into());
        }
        if self.timestep_schedule.last() != Some(&0) {
            return bad("timestep_schedule must end at 0".into());
        }
        if !(self.guidance_scale > 0.0 && self.guidance_scale.is_finite()) {
            return bad("guidance_scale must be positive".into());
        }
        if !(self.timestep_shift > 0.0 && self.timestep_shift.is_finite()) {
            return bad("timestep_shift must be positive".into());
        }
        if self.latent_frames_per_block == 0
            || self.latent_channels == 0
            || self.latent_height == 0
            || self.latent_width == 0
        {
            return bad("latent dimensions must be positive".into());
        }
        for (name, f) in [
            ("pixel_frames_first_block", self.pixel_frames_first_block),
            ("pixel_frames_later_block", self.pixel_frames_later_block),
        ] {
            if f < self.latent_frames_per_block {
                return bad(format!("{name} must be >= latent_frames_per_block"));
            }
            // Each latent frame stores the fidelity of its pixel frames in one plane.
            if f.div_ceil(self.latent_frames_per_block) > self.latent_height * self.latent_width {
                return bad(format!("{name} too large for the latent plane"));
            }
        }
        if self.threshold.is_nan() {
            return bad("threshold is NaN".into());
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> LatentShape {
        LatentShape {
            frames: self.latent_frames_per_block,
            channels: self.latent_channels,
            height: self.latent_height,
            width: self.latent_width,
        }
    }

    /// Number of scores the router sees for `block_index`.
    pub fn scored_frame_count(&self, block_index: usize) -> Result<usize> {
        let pixel = pixel_frame_count(self, block_index)?;
        Ok(match self.scored_frames {
            ScoredFrames::Pixel => pixel,
            ScoredFrames::Latent => self.latent_frames_per_block,
        })
    }

    pub fn total_pixel_frames(&self) -> usize {
        (0..self.num_blocks)
            .map(|b| pixel_frame_count(self, b).expect("in range"))
            .sum()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentShape {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.plane()
    }

    pub fn len(&self) -> usize {
        self.frames * self.frame_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pixel frames produced by decoding `block_index`.
pub fn pixel_frame_count(config: &GenerationConfig, block_index: usize) -> Result<usize> {
    if block_index >= config.num_blocks {
        return Err(Error::BlockOutOfRange {
            index: block_index,
            num_blocks: config.num_blocks,
        });
    }
    Ok(if block_index == 0 {
        config.pixel_frames_first_block
    } else {
        config.pixel_frames_later_block
    })
}

/// First pixel frame decoded from latent frame `group` when `pixel_frames`
/// pixel frames come from `latent_frames` latent frames.
pub fn group_start(group: usize, pixel_frames: usize, latent_frames: usize) -> usize {
    (group * pixel_frames).div_ceil(latent_frames)
}

/// `(latent frame, offset within its group)` for a pixel frame.
pub fn pixel_to_group(pixel: usize, pixel_frames: usize, latent_frames: usize) -> (usize, usize) {
    let group = pixel * latent_frames / pixel_frames;
    (group, pixel - group_start(group, pixel_frames, latent_frames))
}

/// Pixel frames the router scores: every frame, or the first frame of each
/// latent group.
pub fn scored_pixel_frames(mode: ScoredFrames, pixel_frames: usize, latent_frames: usize) -> Vec<usize> {
    match mode {
        ScoredFrames::Pixel => (0..pixel_frames).collect(),
        ScoredFrames::Latent => (0..latent_frames)
            .map(|g| group_start(g, pixel_frames, latent_frames))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub prompt_id: String,
    pub text: String,
}

impl PromptSpec {
    pub fn new(prompt_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            prompt_id: prompt_id.into(),
            text: text.into(),
        }
    }

    /// Simulated prompt `index` of a run set, `prompt-0000`, `prompt-0001`, ...
    pub fn simulated(index: usize) -> Self {
        Self::new(format!("prompt-{index:04}"), String::new())
    }
}
