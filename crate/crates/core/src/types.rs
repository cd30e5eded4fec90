//! Payloads and records flowing through the pipeline.

use serde::{Deserialize, Serialize};

use crate::config::LatentShape;
use crate::digest::{Digest, Hasher};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Producer {
    Draft,
    Target,
}

/// One generated block of latent frames, laid out frame-major then
/// channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentBlock {
    pub block_index: usize,
    pub shape: LatentShape,
    pub data: Vec<f64>,
    pub producer: Producer,
    pub noise_seed: u64,
}

impl LatentBlock {
    pub fn digest(&self) -> Digest {
        let mut h = Hasher::new("specvid.latent");
        h.u64(self.block_index as u64)
            .str(match self.producer {
                Producer::Draft => "draft",
                Producer::Target => "target",
            })
            .u64(self.noise_seed)
            .u64(self.shape.frames as u64)
            .u64(self.shape.channels as u64)
            .u64(self.shape.height as u64)
            .u64(self.shape.width as u64)
            .f64s(&self.data);
        h.finish()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Slice of latent frame `frame`, channel `channel`.
    pub fn plane(&self, frame: usize, channel: usize) -> &[f64] {
        let start = frame * self.shape.frame_len() + channel * self.shape.plane();
        &self.data[start..start + self.shape.plane()]
    }
}

/// Pixel-space proxies for one decoded block. Each frame is a
/// `channels x height x width` tensor, channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedFrames {
    pub block_index: usize,
    pub frames: Vec<Vec<f64>>,
}

impl DecodedFrames {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn digest(&self) -> Digest {
        let mut h = Hasher::new("specvid.frames");
        h.u64(self.block_index as u64).u64(self.frames.len() as u64);
        for f in &self.frames {
            h.f64s(f);
        }
        h.finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScoreVector {
    pub block_index: usize,
    pub scores: Vec<f64>,
}

impl FrameScoreVector {
    pub fn min(&self) -> Option<f64> {
        self.scores.iter().copied().reduce(f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reason {
    AboveThreshold,
    BelowThreshold,
    ForcedFirstBlock,
    /// Random routing; the verdict depends on the draw.
    RandomAccept,
    RandomReject,
    AlwaysAccept,
    AlwaysReject,
}

impl Reason {
    pub fn verdict(self) -> Verdict {
        match self {
            Reason::AboveThreshold | Reason::RandomAccept | Reason::AlwaysAccept => Verdict::Accept,
            _ => Verdict::Reject,
        }
    }
}

/// Router verdict. Built from a [`Reason`] so the verdict can never disagree
/// with it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub verdict: Verdict,
    pub reason: Reason,
}

impl RoutingDecision {
    pub fn new(reason: Reason) -> Self {
        Self {
            verdict: reason.verdict(),
            reason,
        }
    }

    pub fn accepted(&self) -> bool {
        self.verdict == Verdict::Accept
    }
}

/// Per-block audit record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockTrace {
    pub block_index: usize,
    /// Absent when scoring was skipped (forced rejections by default).
    pub aggregate_score: Option<f64>,
    pub frame_scores: Option<FrameScoreVector>,
    pub decision: RoutingDecision,
    /// Whether the draft path (drafter + decode) counts toward latency.
    pub draft_charged: bool,
    /// Whether scoring counts toward latency.
    pub score_charged: bool,
    pub draft_time_s: f64,
    pub score_time_s: f64,
    pub target_time_s: f64,
    pub decode_time_s: f64,
}

impl BlockTrace {
    pub fn time_s(&self) -> f64 {
        self.draft_time_s + self.score_time_s + self.target_time_s + self.decode_time_s
    }

    /// Worst-frame score, used for quality accounting regardless of the
    /// aggregation mode that drove routing.
    pub fn worst_frame(&self) -> Option<f64> {
        self.frame_scores.as_ref().and_then(FrameScoreVector::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub prompt_id: String,
    /// Accepted fraction of blocks `1..B`; 0 when `B = 1`.
    pub accept_rate_excl_block0: f64,
    pub total_time_s: f64,
    pub quality_proxy: f64,
    pub block_traces: Vec<BlockTrace>,
}

impl RunSummary {
    pub fn decisions(&self) -> Vec<RoutingDecision> {
        self.block_traces.iter().map(|t| t.decision).collect()
    }
}

/// Accepted fraction of blocks after block 0.
pub fn accept_rate_excl_block0(traces: &[BlockTrace]) -> f64 {
    if traces.len() <= 1 {
        return 0.0;
    }
    let accepted = traces[1..].iter().filter(|t| t.decision.accepted()).count();
    accepted as f64 / (traces.len() - 1) as f64
}
