//! Deterministic stand-ins for the drafter, target, causal decoder and
//! per-frame reward model.
//!
//! Channel 0 of every latent frame is a fidelity plane: slot `k` holds the
//! reward of the `k`-th pixel frame decoded from that latent frame. The
//! decoder copies it into channel 0 of each pixel frame untouched by temporal
//! blending, and [`FidelityScorer`] reads it back. The remaining channels are
//! seeded noise conditioned on the generator's KV context and are blended
//! across frames through the decode cache.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::caches::{decode_restore, decode_snapshot, DecodeCache, DecodeCacheSnapshot, KvCache};
use crate::config::{pixel_frame_count, pixel_to_group, GenerationConfig, LatentShape, PromptSpec, ScoredFrames};
use crate::digest::Digest;
use crate::engine::{Decoder, Generator, Scorer};
use crate::error::{Error, Result};
use crate::synth::quality::DraftQualityModel;
use crate::types::{DecodedFrames, LatentBlock, Producer};

/// Fidelity written by the synthetic target. Target blocks are never scored
/// by the router; the value only needs to be finite.
pub const TARGET_FIDELITY: f64 = 1.0;

const CONTEXT_WEIGHT: f64 = 0.25;

pub struct SyntheticGenerator {
    producer: Producer,
    config: GenerationConfig,
    quality: Option<DraftQualityModel>,
}

impl SyntheticGenerator {
    pub fn drafter(config: &GenerationConfig, quality: DraftQualityModel) -> Self {
        Self {
            producer: Producer::Draft,
            config: config.clone(),
            quality: Some(quality),
        }
    }

    pub fn target(config: &GenerationConfig) -> Self {
        Self {
            producer: Producer::Target,
            config: config.clone(),
            quality: None,
        }
    }

    fn fidelity(&self, prompt: &PromptSpec, block_index: usize) -> Result<Vec<f64>> {
        let pixel = pixel_frame_count(&self.config, block_index)?;
        let Some(q) = &self.quality else {
            return Ok(vec![TARGET_FIDELITY; pixel]);
        };
        let n = self.config.scored_frame_count(block_index)?;
        let v = q.sample_block_score(&prompt.prompt_id, block_index, n).scores;
        let latent = self.config.latent_frames_per_block;
        Ok((0..pixel)
            .map(|i| match self.config.scored_frames {
                ScoredFrames::Pixel => v[i],
                ScoredFrames::Latent => v[pixel_to_group(i, pixel, latent).0],
            })
            .collect())
    }
}

impl Generator for SyntheticGenerator {
    fn producer(&self) -> Producer {
        self.producer
    }

    fn generate(
        &self,
        noise_seed: u64,
        kv: &KvCache,
        block_index: usize,
        prompt: &PromptSpec,
    ) -> Result<LatentBlock> {
        let shape = self.config.latent_shape();
        let amplitude = match self.producer {
            Producer::Draft => 1.0,
            Producer::Target => 0.8,
        };
        let context = kv.last().map_or(0.0, |e| content_mean(e.payload()));
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let mut data = vec![0.0; shape.len()];
        let plane = shape.plane();
        for f in 0..shape.frames {
            for c in 1..shape.channels {
                let start = f * shape.frame_len() + c * plane;
                for v in &mut data[start..start + plane] {
                    *v = amplitude * rng.random_range(-1.0..1.0) + CONTEXT_WEIGHT * context;
                }
            }
        }
        let fid = self.fidelity(prompt, block_index)?;
        let pixel = fid.len();
        for (i, value) in fid.into_iter().enumerate() {
            let (g, off) = pixel_to_group(i, pixel, shape.frames);
            data[g * shape.frame_len() + off] = value;
        }
        Ok(LatentBlock {
            block_index,
            shape,
            data,
            producer: self.producer,
            noise_seed,
        })
    }
}

fn content_mean(block: &LatentBlock) -> f64 {
    let s = block.shape;
    let mut sum = 0.0;
    let mut n = 0usize;
    for f in 0..s.frames {
        for c in 1..s.channels {
            sum += block.plane(f, c).iter().sum::<f64>();
            n += s.plane();
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub struct SyntheticDecoder {
    config: GenerationConfig,
    shape: LatentShape,
    cache: DecodeCache,
}

impl SyntheticDecoder {
    pub fn new(config: &GenerationConfig) -> Self {
        let shape = config.latent_shape();
        Self {
            config: config.clone(),
            shape,
            cache: DecodeCache::new(shape.frame_len()),
        }
    }

    pub fn cache(&self) -> &DecodeCache {
        &self.cache
    }
}

impl Decoder for SyntheticDecoder {
    fn decode(&mut self, latent: &LatentBlock) -> Result<DecodedFrames> {
        if latent.shape != self.shape {
            return Err(Error::Format(format!(
                "latent shape {:?} does not match decoder {:?}",
                latent.shape, self.shape
            )));
        }
        if latent.block_index != self.cache.next_block {
            return Err(Error::Format(format!(
                "decoder expects block {}, got {}",
                self.cache.next_block, latent.block_index
            )));
        }
        let s = self.shape;
        let plane = s.plane();
        let pixel = pixel_frame_count(&self.config, latent.block_index)?;
        let frames = (0..pixel)
            .map(|i| {
                let (g, off) = pixel_to_group(i, pixel, s.frames);
                let group_len = pixel_to_group_len(g, pixel, s.frames);
                let alpha = (off + 1) as f64 / group_len as f64;
                let mut frame = vec![latent.plane(g, 0)[off]; plane];
                frame.resize(s.frame_len(), 0.0);
                for c in 1..s.channels {
                    let cur = latent.plane(g, c);
                    let prev: &[f64] = if g > 0 {
                        latent.plane(g - 1, c)
                    } else if self.cache.history.is_empty() {
                        cur
                    } else {
                        &self.cache.history[c * plane..(c + 1) * plane]
                    };
                    for p in 0..plane {
                        frame[c * plane + p] = prev[p] + alpha * (cur[p] - prev[p]);
                    }
                }
                frame
            })
            .collect();
        let last = s.frames - 1;
        self.cache.history = latent.data[last * s.frame_len()..].to_vec();
        self.cache.next_block += 1;
        Ok(DecodedFrames {
            block_index: latent.block_index,
            frames,
        })
    }

    fn snapshot(&self) -> DecodeCacheSnapshot {
        decode_snapshot(&self.cache)
    }

    fn restore(&mut self, snapshot: &DecodeCacheSnapshot) -> Result<()> {
        decode_restore(&mut self.cache, snapshot)
    }

    fn state_digest(&self) -> Digest {
        self.cache.digest()
    }
}

fn pixel_to_group_len(group: usize, pixel: usize, latent: usize) -> usize {
    use crate::config::group_start;
    let end = if group + 1 == latent { pixel } else { group_start(group + 1, pixel, latent) };
    end - group_start(group, pixel, latent)
}

/// Reads the fidelity probe (first element of channel 0).
pub struct FidelityScorer;

impl Scorer for FidelityScorer {
    fn score(&self, frame: &[f64], _prompt: &PromptSpec) -> Result<f64> {
        match frame.first() {
            Some(v) if v.is_finite() => Ok(*v),
            Some(_) => Err(Error::NonFiniteScore),
            None => Err(Error::EmptyScores),
        }
    }
}
