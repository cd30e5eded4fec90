//! Linear per-block latency model.
//!
//! A run costs `c_draft + c_decode` for every block whose draft path is used,
//! `c_score * overlap_factor` for every block whose score is consulted, and
//! `c_target` for every rejected block. Decoding the target's regenerated
//! block is folded into `c_target`. A run that never consults the drafter
//! (target-only) pays only `B * c_target`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnls::nnls;
use crate::types::BlockTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OverlapMode {
    /// Scoring runs on a separate device and stream; only
    /// `overlap_residue` of its cost is on the critical path.
    #[default]
    ScoringOverlapped,
    FullySequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyParams {
    pub c_draft: f64,
    pub c_target: f64,
    pub c_decode: f64,
    pub c_score: f64,
    pub overlap_mode: OverlapMode,
    #[serde(default)]
    pub overlap_residue: f64,
}

impl LatencyParams {
    pub fn overlap_factor(&self) -> f64 {
        match self.overlap_mode {
            OverlapMode::ScoringOverlapped => self.overlap_residue,
            OverlapMode::FullySequential => 1.0,
        }
    }

    pub fn draft_path(&self) -> f64 {
        self.c_draft + self.c_decode
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.c_draft,
            self.c_target,
            self.c_decode,
            self.c_score,
            self.overlap_residue,
        ];
        if all.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::Calibration(
                "latency components must be finite and non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap_residue) {
            return Err(Error::Calibration("overlap_residue must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn block_timing(&self, draft_charged: bool, score_charged: bool, rejected: bool) -> BlockTiming {
        let on = |b: bool, c: f64| if b { c } else { 0.0 };
        BlockTiming {
            draft_s: on(draft_charged, self.c_draft),
            decode_s: on(draft_charged, self.c_decode),
            score_s: on(score_charged, self.c_score * self.overlap_factor()),
            target_s: on(rejected, self.c_target),
        }
    }

    /// Expected time of a routed run with block 0 forced and the given
    /// accept rate over blocks `1..B`.
    pub fn expected_routed_time(&self, num_blocks: usize, accept_rate: f64) -> f64 {
        let b = num_blocks as f64;
        let rejected = 1.0 + (b - 1.0) * (1.0 - accept_rate);
        b * self.draft_path() + (b - 1.0) * self.c_score * self.overlap_factor() + rejected * self.c_target
    }

    pub fn target_only_time(&self, num_blocks: usize) -> f64 {
        num_blocks as f64 * self.c_target
    }

    pub fn draft_only_time(&self, num_blocks: usize) -> f64 {
        num_blocks as f64 * self.draft_path()
    }

    pub fn predict(&self, num_blocks: usize, kind: &TimingKind) -> f64 {
        match kind {
            TimingKind::TargetOnly => self.target_only_time(num_blocks),
            TimingKind::DraftOnly => self.draft_only_time(num_blocks),
            TimingKind::Routed { accept_rate } => self.expected_routed_time(num_blocks, *accept_rate),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BlockTiming {
    pub draft_s: f64,
    pub decode_s: f64,
    pub score_s: f64,
    pub target_s: f64,
}

impl BlockTiming {
    pub fn total(&self) -> f64 {
        self.draft_s + self.decode_s + self.score_s + self.target_s
    }
}

/// Total seconds for a complete trace (blocks `0..n`, in order).
pub fn simulate_time(trace: &[BlockTrace], params: &LatencyParams) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::IncompleteTrace("no blocks".into()));
    }
    let mut total = 0.0;
    for (i, t) in trace.iter().enumerate() {
        if t.block_index != i {
            return Err(Error::IncompleteTrace(format!(
                "expected block {i}, found {}",
                t.block_index
            )));
        }
        total += params
            .block_timing(t.draft_charged, t.score_charged, !t.decision.accepted())
            .total();
    }
    Ok(total)
}

pub fn speedup(t: f64, t_target_only: f64) -> Result<f64> {
    for v in [t, t_target_only] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::NonPositiveTime(v));
        }
    }
    Ok(t_target_only / t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TimingKind {
    TargetOnly,
    DraftOnly,
    /// Routed run with block 0 forced; `accept_rate` excludes block 0.
    Routed { accept_rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub label: String,
    #[serde(flatten)]
    pub kind: TimingKind,
    pub time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyFitOptions {
    pub overlap_mode: OverlapMode,
    pub overlap_residue: f64,
    /// Share of the fitted draft-path cost attributed to decoding. The two
    /// are not separately identifiable from per-video times.
    pub decode_share: f64,
}

impl Default for LatencyFitOptions {
    fn default() -> Self {
        Self {
            overlap_mode: OverlapMode::ScoringOverlapped,
            overlap_residue: 0.0,
            decode_share: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResidual {
    pub label: String,
    pub measured_s: f64,
    pub predicted_s: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyFit {
    pub params: LatencyParams,
    pub residuals: Vec<RowResidual>,
}

impl LatencyFit {
    pub fn max_rel_error(&self) -> f64 {
        self.residuals
            .iter()
            .map(|r| r.rel_error.abs())
            .fold(0.0, f64::max)
    }
}

/// Fit latency components to measured per-video times by non-negative least
/// squares.
pub fn fit_latencies(
    rows: &[TimingRow],
    num_blocks: usize,
    options: &LatencyFitOptions,
) -> Result<LatencyFit> {
    let mut missing = Vec::new();
    if !rows.iter().any(|r| r.kind == TimingKind::TargetOnly) {
        missing.push("target-only");
    }
    if !rows.iter().any(|r| r.kind == TimingKind::DraftOnly) {
        missing.push("draft-only");
    }
    if !missing.is_empty() {
        return Err(Error::Calibration(format!(
            "timing rows missing baselines: {}",
            missing.join(", ")
        )));
    }
    if rows.len() < 4 {
        return Err(Error::Calibration(format!(
            "need at least 4 timing rows, got {}",
            rows.len()
        )));
    }
    for r in rows {
        if !(r.time_s.is_finite() && r.time_s > 0.0) {
            return Err(Error::Calibration(format!("row {}: bad time {}", r.label, r.time_s)));
        }
        if let TimingKind::Routed { accept_rate } = r.kind {
            if !(0.0..=1.0).contains(&accept_rate) {
                return Err(Error::Calibration(format!(
                    "row {}: accept rate {accept_rate} outside [0, 1]",
                    r.label
                )));
            }
        }
    }
    if !(0.0..=1.0).contains(&options.decode_share) {
        return Err(Error::Calibration("decode_share must be in [0, 1]".into()));
    }

    let probe = LatencyParams {
        c_draft: 0.0,
        c_target: 0.0,
        c_decode: 0.0,
        c_score: 0.0,
        overlap_mode: options.overlap_mode,
        overlap_residue: options.overlap_residue,
    };
    let factor = probe.overlap_factor();
    let fit_score = factor > 0.0;
    let b = num_blocks as f64;

    // Columns: drafted blocks, (scored blocks * factor), target blocks.
    let design: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let (drafted, scored, target) = match r.kind {
                TimingKind::TargetOnly => (0.0, 0.0, b),
                TimingKind::DraftOnly => (b, 0.0, 0.0),
                TimingKind::Routed { accept_rate } => {
                    (b, (b - 1.0) * factor, 1.0 + (b - 1.0) * (1.0 - accept_rate))
                }
            };
            if fit_score {
                vec![drafted, scored, target]
            } else {
                vec![drafted, target]
            }
        })
        .collect();
    let times: Vec<f64> = rows.iter().map(|r| r.time_s).collect();
    let (x, _) = nnls(&design, &times);
    if x.iter().all(|v| *v == 0.0) {
        return Err(Error::Calibration("infeasible latency fit (all components zero)".into()));
    }
    let (draft_path, c_score, c_target) = if fit_score {
        (x[0], x[1], x[2])
    } else {
        (x[0], 0.0, x[1])
    };
    if c_target <= 0.0 {
        return Err(Error::Calibration("fitted target cost is zero".into()));
    }
    let params = LatencyParams {
        c_draft: draft_path * (1.0 - options.decode_share),
        c_decode: draft_path * options.decode_share,
        c_target,
        c_score,
        overlap_mode: options.overlap_mode,
        overlap_residue: options.overlap_residue,
    };
    let residuals = rows
        .iter()
        .map(|r| {
            let predicted = params.predict(num_blocks, &r.kind);
            RowResidual {
                label: r.label.clone(),
                measured_s: r.time_s,
                predicted_s: predicted,
                rel_error: (predicted - r.time_s) / r.time_s,
            }
        })
        .collect();
    Ok(LatencyFit { params, residuals })
}
