//! The per-block inference loop.
//!
//! For each block `b`:
//!
//! 1. derive `noise_seed(b)` from the master seed, prompt id and `b`;
//! 2. the drafter generates a candidate, which is committed to the drafter
//!    KV cache unconditionally;
//! 3. the decode cache is snapshotted, the candidate decoded and every
//!    scored frame rewarded; the block score is the aggregate;
//! 4. on accept the candidate goes to the target KV cache and its frames are
//!    emitted;
//! 5. on reject the decode cache is restored, the target regenerates the
//!    block from the same noise seed, commits it and its frames are emitted.
//!
//! Forced rejections skip steps 3's decode and scoring unless
//! `score_forced_blocks` is set.

use serde::{Deserialize, Serialize};

use crate::caches::{CacheOwner, DecodeCacheSnapshot, KvCache};
use crate::config::{scored_pixel_frames, GenerationConfig, PromptSpec};
use crate::costmodel::{simulate_time, LatencyParams};
use crate::digest::{noise_seed, Digest};
use crate::error::{Error, Result};
use crate::router::{aggregate_slice, AggregationMode, Router};
use crate::types::{
    accept_rate_excl_block0, BlockTrace, DecodedFrames, FrameScoreVector, LatentBlock, Producer,
    RunSummary,
};

/// A block generator (drafter or target). Must be deterministic in
/// `(noise_seed, kv contents, block_index, prompt)`.
pub trait Generator: Sync {
    fn producer(&self) -> Producer;

    fn generate(
        &self,
        noise_seed: u64,
        kv: &KvCache,
        block_index: usize,
        prompt: &PromptSpec,
    ) -> Result<LatentBlock>;
}

/// Causal decoder with restorable temporal state.
pub trait Decoder {
    fn decode(&mut self, latent: &LatentBlock) -> Result<DecodedFrames>;
    fn snapshot(&self) -> DecodeCacheSnapshot;
    fn restore(&mut self, snapshot: &DecodeCacheSnapshot) -> Result<()>;
    fn state_digest(&self) -> Digest;
}

/// Per-frame reward model. Must be deterministic per `(frame, prompt)`.
pub trait Scorer: Sync {
    fn score(&self, frame: &[f64], prompt: &PromptSpec) -> Result<f64>;
}

/// Maps a finished run to a scalar quality figure.
pub trait QualityEstimator: Sync {
    fn run_quality(&self, num_blocks: usize, traces: &[BlockTrace]) -> f64;
}

/// Reports quality as 0 for every run.
pub struct NoQuality;

impl QualityEstimator for NoQuality {
    fn run_quality(&self, _: usize, _: &[BlockTrace]) -> f64 {
        0.0
    }
}

#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub drafter: &'a dyn Generator,
    pub target: &'a dyn Generator,
    pub scorer: &'a dyn Scorer,
    pub quality: &'a dyn QualityEstimator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub aggregation: AggregationMode,
    pub latency: LatencyParams,
}

/// Everything a run produced, for auditing.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub summary: RunSummary,
    pub drafter_kv: KvCache,
    pub target_kv: KvCache,
    pub emitted: Vec<DecodedFrames>,
    pub noise_seeds: Vec<u64>,
}

impl RunArtifacts {
    pub fn emitted_frame_count(&self) -> usize {
        self.emitted.iter().map(DecodedFrames::len).sum()
    }
}

pub fn run_video(
    config: &GenerationConfig,
    prompt: &PromptSpec,
    models: Models<'_>,
    decoder: &mut dyn Decoder,
    router: &mut Router,
    options: &RunOptions,
) -> Result<RunSummary> {
    run_video_detailed(config, prompt, models, decoder, router, options).map(|a| a.summary)
}

pub fn run_video_detailed(
    config: &GenerationConfig,
    prompt: &PromptSpec,
    models: Models<'_>,
    decoder: &mut dyn Decoder,
    router: &mut Router,
    options: &RunOptions,
) -> Result<RunArtifacts> {
    config.validate()?;
    router.policy().validate()?;
    options.latency.validate()?;

    let policy = router.policy().clone();
    let draft_charged = policy.can_accept();
    let mut drafter_kv = KvCache::new(CacheOwner::Drafter);
    let mut target_kv = KvCache::new(CacheOwner::Target);
    let mut emitted = Vec::with_capacity(config.num_blocks);
    let mut traces = Vec::with_capacity(config.num_blocks);
    let mut seeds = Vec::with_capacity(config.num_blocks);

    for b in 0..config.num_blocks {
        let seed = noise_seed(config.seed, &prompt.prompt_id, b);
        seeds.push(seed);

        let draft = models
            .drafter
            .generate(seed, &drafter_kv, b, prompt)
            .map_err(|e| component("drafter", b, e))?;
        check_block(&draft, b, "drafter")?;
        drafter_kv.commit(draft.clone())?;

        let forced = policy.forces_reject(b);
        let score_it = !forced || config.score_forced_blocks;
        let mut scored = None;
        if score_it {
            let snapshot = decoder.snapshot();
            let frames = decoder.decode(&draft).map_err(|e| component("decoder", b, e))?;
            let expected = crate::config::pixel_frame_count(config, b)?;
            if frames.len() != expected {
                return Err(component(
                    "decoder",
                    b,
                    Error::Format(format!("decoded {} frames, expected {expected}", frames.len())),
                ));
            }
            let idx = scored_pixel_frames(config.scored_frames, frames.len(), config.latent_frames_per_block);
            let scores = idx
                .iter()
                .map(|&i| models.scorer.score(&frames.frames[i], prompt))
                .collect::<Result<Vec<f64>>>()
                .map_err(|e| component("scorer", b, e))?;
            let q = aggregate_slice(&scores, options.aggregation).map_err(|e| component("scorer", b, e))?;
            scored = Some((snapshot, frames, FrameScoreVector { block_index: b, scores }, q));
        }

        let decision = router.decide(b, scored.as_ref().map(|s| s.3))?;
        let (frame_scores, aggregate_score) = match &scored {
            Some((_, _, fs, q)) => (Some(fs.clone()), Some(*q)),
            None => (None, None),
        };

        if decision.accepted() {
            // Accepted drafts were always decoded: only forced blocks skip it.
            let (_, frames, _, _) = scored.expect("accepted block was scored");
            target_kv.commit(draft)?;
            emitted.push(frames);
        } else {
            if let Some((snapshot, _, _, _)) = &scored {
                decoder.restore(snapshot).map_err(|e| component("decoder", b, e))?;
            }
            let regenerated = models
                .target
                .generate(seed, &target_kv, b, prompt)
                .map_err(|e| component("target", b, e))?;
            check_block(&regenerated, b, "target")?;
            let frames = decoder
                .decode(&regenerated)
                .map_err(|e| component("decoder", b, e))?;
            target_kv.commit(regenerated)?;
            emitted.push(frames);
        }

        let score_charged = policy.consults_scores() && aggregate_score.is_some();
        let timing = options
            .latency
            .block_timing(draft_charged, score_charged, !decision.accepted());
        traces.push(BlockTrace {
            block_index: b,
            aggregate_score,
            frame_scores,
            decision,
            draft_charged,
            score_charged,
            draft_time_s: timing.draft_s,
            score_time_s: timing.score_s,
            target_time_s: timing.target_s,
            decode_time_s: timing.decode_s,
        });
    }

    let total_time_s = simulate_time(&traces, &options.latency)?;
    let summary = RunSummary {
        prompt_id: prompt.prompt_id.clone(),
        accept_rate_excl_block0: accept_rate_excl_block0(&traces),
        total_time_s,
        quality_proxy: models.quality.run_quality(config.num_blocks, &traces),
        block_traces: traces,
    };
    Ok(RunArtifacts {
        summary,
        drafter_kv,
        target_kv,
        emitted,
        noise_seeds: seeds,
    })
}

fn component(name: &'static str, block: usize, e: Error) -> Error {
    match e {
        e @ Error::Component { .. } => e,
        e => Error::Component {
            component: name,
            block,
            message: e.to_string(),
        },
    }
}

fn check_block(block: &LatentBlock, b: usize, name: &'static str) -> Result<()> {
    if block.block_index != b {
        return Err(component(
            name,
            b,
            Error::Format(format!("produced block {}", block.block_index)),
        ));
    }
    if !block.is_finite() {
        return Err(component(name, b, Error::Format("non-finite latent".into())));
    }
    Ok(())
}
