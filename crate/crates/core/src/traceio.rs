//! Line-oriented trace records and counterfactual replay.
//!
//! A trace is JSON Lines: one object per line, one line per (prompt, block).
//!
//! | field               | type             | required |
//! |---------------------|------------------|----------|
//! | `prompt_id`         | string           | yes      |
//! | `block_index`       | integer `0..B`   | yes      |
//! | `frame_scores`      | array of numbers | yes, non-empty, finite |
//! | `draft_time_s`      | number `>= 0`    | no       |
//! | `target_time_s`     | number `>= 0`    | no       |
//! | `decode_time_s`     | number `>= 0`    | no       |
//! | `score_time_s`      | number `>= 0`    | no       |
//! | `producer_observed` | `"draft"` or `"target"` | no |
//!
//! Times are seconds of critical-path latency for that component of that
//! block. Blank lines are ignored; unknown fields are rejected. The canonical
//! form writes fields in the order above, omits absent optionals and uses the
//! shortest round-tripping decimal for numbers.

use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::costmodel::LatencyParams;
use crate::engine::QualityEstimator;
use crate::error::{Error, Result};
use crate::router::{aggregate_slice, AggregationMode, Policy};
use crate::types::{accept_rate_excl_block0, BlockTrace, FrameScoreVector, Producer, RunSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalTraceRecord {
    pub prompt_id: String,
    pub block_index: usize,
    pub frame_scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draft_time_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_time_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode_time_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_time_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub producer_observed: Option<Producer>,
}

impl ExternalTraceRecord {
    pub fn validate(&self, num_blocks: usize) -> std::result::Result<(), String> {
        if self.prompt_id.is_empty() {
            return Err("prompt_id is empty".into());
        }
        if self.block_index >= num_blocks {
            return Err(format!(
                "block_index {} out of range for {num_blocks} blocks",
                self.block_index
            ));
        }
        if self.frame_scores.is_empty() {
            return Err("frame_scores is empty".into());
        }
        if self.frame_scores.iter().any(|s| !s.is_finite()) {
            return Err("frame_scores contains a non-finite value".into());
        }
        for (name, v) in [
            ("draft_time_s", self.draft_time_s),
            ("target_time_s", self.target_time_s),
            ("decode_time_s", self.decode_time_s),
            ("score_time_s", self.score_time_s),
        ] {
            if let Some(v) = v.filter(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    /// Canonical single-line encoding (no trailing newline).
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Streams records from a reader, one per non-blank line.
pub struct TraceReader<R> {
    lines: std::io::Lines<R>,
    line: usize,
    num_blocks: usize,
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(reader: R, num_blocks: usize) -> Self {
        Self {
            lines: reader.lines(),
            line: 0,
            num_blocks,
        }
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<ExternalTraceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let text = match self.lines.next()? {
                Ok(t) => t,
                Err(e) => return Some(Err(e.into())),
            };
            self.line += 1;
            if text.trim().is_empty() {
                continue;
            }
            let line = self.line;
            let rec: ExternalTraceRecord = match serde_json::from_str(&text) {
                Ok(r) => r,
                Err(e) => {
                    return Some(Err(Error::Parse {
                        line,
                        message: e.to_string(),
                    }))
                }
            };
            return Some(
                rec.validate(self.num_blocks)
                    .map(|()| rec)
                    .map_err(|message| Error::Validation { line, message }),
            );
        }
    }
}

pub fn parse_trace<R: BufRead>(reader: R, num_blocks: usize) -> Result<Vec<ExternalTraceRecord>> {
    TraceReader::new(reader, num_blocks).collect()
}

pub fn parse_trace_str(s: &str, num_blocks: usize) -> Result<Vec<ExternalTraceRecord>> {
    parse_trace(s.as_bytes(), num_blocks)
}

/// Canonical encoding, one record per line with a trailing newline.
pub fn serialize_trace(records: &[ExternalTraceRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    s
}

/// Records for one run. Every block must carry frame scores, so runs with
/// forced rejections need `score_forced_blocks` enabled.
pub fn export_trace(summary: &RunSummary) -> Result<Vec<ExternalTraceRecord>> {
    summary
        .block_traces
        .iter()
        .map(|t| {
            let scores = t.frame_scores.as_ref().ok_or_else(|| {
                Error::IncompleteTrace(format!(
                    "prompt {} block {} has no frame scores; enable score_forced_blocks to export",
                    summary.prompt_id, t.block_index
                ))
            })?;
            let accepted = t.decision.accepted();
            Ok(ExternalTraceRecord {
                prompt_id: summary.prompt_id.clone(),
                block_index: t.block_index,
                frame_scores: scores.scores.clone(),
                draft_time_s: t.draft_charged.then_some(t.draft_time_s),
                target_time_s: (!accepted).then_some(t.target_time_s),
                decode_time_s: t.draft_charged.then_some(t.decode_time_s),
                score_time_s: t.score_charged.then_some(t.score_time_s),
                producer_observed: Some(if accepted { Producer::Draft } else { Producer::Target }),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeSource {
    Recorded,
    Modeled,
    NotCharged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockProvenance {
    pub block_index: usize,
    pub draft: TimeSource,
    pub decode: TimeSource,
    pub score: TimeSource,
    pub target: TimeSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRun {
    pub summary: RunSummary,
    pub provenance: Vec<BlockProvenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayOptions {
    pub policy: Policy,
    pub aggregation: AggregationMode,
    pub latency: LatencyParams,
    pub num_blocks: usize,
}

/// Replay one prompt's records (any order, each block exactly once).
pub fn replay_prompt(
    records: &[&ExternalTraceRecord],
    options: &ReplayOptions,
    quality: &dyn QualityEstimator,
) -> Result<ReplayRun> {
    options.policy.validate()?;
    options.latency.validate()?;
    let b = options.num_blocks;
    let prompt_id = records
        .first()
        .map(|r| r.prompt_id.clone())
        .ok_or_else(|| Error::IncompleteTrace("no records".into()))?;
    let mut by_block: Vec<Option<&ExternalTraceRecord>> = vec![None; b];
    for r in records {
        if r.prompt_id != prompt_id {
            return Err(Error::InvalidConfig(format!(
                "mixed prompts {prompt_id:?} and {:?}",
                r.prompt_id
            )));
        }
        let slot = by_block.get_mut(r.block_index).ok_or(Error::BlockOutOfRange {
            index: r.block_index,
            num_blocks: b,
        })?;
        if slot.is_some() {
            return Err(Error::IncompleteTrace(format!(
                "prompt {prompt_id}: duplicate block {}",
                r.block_index
            )));
        }
        *slot = Some(r);
    }
    let missing: Vec<usize> = (0..b).filter(|i| by_block[*i].is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingBlocks { prompt_id, missing });
    }

    let policy = &options.policy;
    let lat = &options.latency;
    let mut router = policy.router(&prompt_id);
    let draft_charged = policy.can_accept();
    let mut traces = Vec::with_capacity(b);
    let mut provenance = Vec::with_capacity(b);
    for (i, rec) in by_block.iter().enumerate() {
        let rec = rec.expect("checked");
        let q = aggregate_slice(&rec.frame_scores, options.aggregation)?;
        let decision = router.decide(i, Some(q))?;
        let score_charged = policy.consults_scores() && !policy.forces_reject(i);
        let rejected = !decision.accepted();
        let pick = |charged: bool, recorded: Option<f64>, modeled: f64| match (charged, recorded) {
            (false, _) => (0.0, TimeSource::NotCharged),
            (true, Some(v)) => (v, TimeSource::Recorded),
            (true, None) => (modeled, TimeSource::Modeled),
        };
        let (draft_s, draft) = pick(draft_charged, rec.draft_time_s, lat.c_draft);
        let (decode_s, decode) = pick(draft_charged, rec.decode_time_s, lat.c_decode);
        let (score_s, score) = pick(score_charged, rec.score_time_s, lat.c_score * lat.overlap_factor());
        let (target_s, target) = pick(rejected, rec.target_time_s, lat.c_target);
        traces.push(BlockTrace {
            block_index: i,
            aggregate_score: Some(q),
            frame_scores: Some(FrameScoreVector {
                block_index: i,
                scores: rec.frame_scores.clone(),
            }),
            decision,
            draft_charged,
            score_charged,
            draft_time_s: draft_s,
            score_time_s: score_s,
            target_time_s: target_s,
            decode_time_s: decode_s,
        });
        provenance.push(BlockProvenance {
            block_index: i,
            draft,
            decode,
            score,
            target,
        });
    }
    let summary = RunSummary {
        prompt_id,
        accept_rate_excl_block0: accept_rate_excl_block0(&traces),
        total_time_s: traces.iter().map(BlockTrace::time_s).sum(),
        quality_proxy: quality.run_quality(b, &traces),
        block_traces: traces,
    };
    Ok(ReplayRun { summary, provenance })
}

/// Replay every prompt in `records`, in order of first appearance.
pub fn replay(
    records: &[ExternalTraceRecord],
    options: &ReplayOptions,
    quality: &dyn QualityEstimator,
) -> Result<Vec<ReplayRun>> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&ExternalTraceRecord>> = HashMap::new();
    for r in records {
        groups
            .entry(r.prompt_id.as_str())
            .or_insert_with(|| {
                order.push(r.prompt_id.as_str());
                Vec::new()
            })
            .push(r);
    }
    order
        .iter()
        .map(|p| replay_prompt(&groups[p], options, quality))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub version: u32,
    pub policy: Policy,
    pub aggregation: AggregationMode,
    pub num_prompts: usize,
    pub mean_accept_rate: f64,
    pub mean_time_s: f64,
    pub mean_quality: f64,
    /// Target-only prediction from the latency model.
    pub target_only_time_s: f64,
    pub speedup: f64,
    pub recorded_components: usize,
    pub modeled_components: usize,
    pub runs: Vec<ReplayRun>,
}

impl ReplayReport {
    pub fn new(runs: Vec<ReplayRun>, options: &ReplayOptions) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::IncompleteTrace("no prompts".into()));
        }
        let n = runs.len() as f64;
        let mean = |f: &dyn Fn(&RunSummary) -> f64| runs.iter().map(|r| f(&r.summary)).sum::<f64>() / n;
        let mean_time_s = mean(&|s| s.total_time_s);
        let t0 = options.latency.target_only_time(options.num_blocks);
        let count = |src: TimeSource| {
            runs.iter()
                .flat_map(|r| &r.provenance)
                .map(|p| [p.draft, p.decode, p.score, p.target].iter().filter(|s| **s == src).count())
                .sum()
        };
        Ok(Self {
            version: 1,
            policy: options.policy.clone(),
            aggregation: options.aggregation,
            num_prompts: runs.len(),
            mean_accept_rate: mean(&|s| s.accept_rate_excl_block0),
            mean_quality: mean(&|s| s.quality_proxy),
            speedup: crate::costmodel::speedup(mean_time_s, t0)?,
            mean_time_s,
            target_only_time_s: t0,
            recorded_components: count(TimeSource::Recorded),
            modeled_components: count(TimeSource::Modeled),
            runs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::OverlapMode;
    use crate::engine::NoQuality;
    use crate::types::{Reason, Verdict};
    use proptest::prelude::*;

    fn lat() -> LatencyParams {
        LatencyParams {
            c_draft: 2.0,
            c_target: 10.0,
            c_decode: 0.5,
            c_score: 0.3,
            overlap_mode: OverlapMode::ScoringOverlapped,
            overlap_residue: 0.0,
        }
    }

    fn rec(p: &str, b: usize, scores: Vec<f64>) -> ExternalTraceRecord {
        ExternalTraceRecord {
            prompt_id: p.into(),
            block_index: b,
            frame_scores: scores,
            draft_time_s: None,
            target_time_s: None,
            decode_time_s: None,
            score_time_s: None,
            producer_observed: None,
        }
    }

    fn nine(p: &str) -> Vec<ExternalTraceRecord> {
        (0..9).map(|b| rec(p, b, vec![-(b as f64) / 4.0, 0.5])).collect()
    }

    fn opts(policy: Policy) -> ReplayOptions {
        ReplayOptions {
            policy,
            aggregation: AggregationMode::MinFrame,
            latency: lat(),
            num_blocks: 9,
        }
    }

    #[test]
    fn parses_nine_block_trace() {
        let text = serialize_trace(&nine("p"));
        assert_eq!(parse_trace_str(&text, 9).unwrap().len(), 9);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let good = nine("p")[0].to_line();
        let text = format!("{good}\n\n{{\"prompt_id\":\"p\",\"block_index\":1,\"frame_scores\":[]}}\n");
        match parse_trace_str(&text, 9) {
            Err(Error::Validation { line: 3, message }) => assert!(message.contains("frame_scores")),
            other => panic!("{other:?}"),
        }
        match parse_trace_str(&format!("{good}\nnot json\n"), 9) {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        let oob = rec("p", 9, vec![0.0]).to_line();
        assert!(matches!(parse_trace_str(&oob, 9), Err(Error::Validation { line: 1, .. })));
        let unknown = "{\"prompt_id\":\"p\",\"block_index\":0,\"frame_scores\":[1],\"extra\":1}";
        assert!(matches!(parse_trace_str(unknown, 9), Err(Error::Parse { line: 1, .. })));
        let neg = "{\"prompt_id\":\"p\",\"block_index\":0,\"frame_scores\":[1],\"draft_time_s\":-1}";
        assert!(matches!(parse_trace_str(neg, 9), Err(Error::Validation { .. })));
    }

    #[test]
    fn infinite_thresholds() {
        let r = nine("p");
        let all = replay(&r, &opts(Policy::threshold(f64::NEG_INFINITY)), &NoQuality).unwrap();
        let d = all[0].summary.decisions();
        assert_eq!(d[0].reason, Reason::ForcedFirstBlock);
        assert!(d[1..].iter().all(|d| d.verdict == Verdict::Accept));

        let none = replay(&r, &opts(Policy::threshold(f64::INFINITY)), &NoQuality).unwrap();
        assert!(none[0].summary.decisions().iter().all(|d| !d.accepted()));
        assert_eq!(none[0].summary.total_time_s, lat().target_only_time(9));
    }

    #[test]
    fn missing_blocks_are_listed() {
        let mut r = nine("p");
        r.retain(|x| x.block_index != 3 && x.block_index != 7);
        match replay(&r, &opts(Policy::threshold(-1.0)), &NoQuality) {
            Err(Error::MissingBlocks { prompt_id, missing }) => {
                assert_eq!(prompt_id, "p");
                assert_eq!(missing, vec![3, 7]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn recorded_times_take_precedence() {
        let mut r = nine("p");
        for x in &mut r {
            x.target_time_s = Some(20.0);
        }
        let run = &replay(&r, &opts(Policy::threshold(f64::INFINITY)), &NoQuality).unwrap()[0];
        assert_eq!(run.summary.total_time_s, 180.0);
        assert!(run.provenance.iter().all(|p| p.target == TimeSource::Recorded));
        assert!(run.provenance.iter().all(|p| p.draft == TimeSource::NotCharged));

        let mixed = &replay(&r, &opts(Policy::threshold(-1.0)), &NoQuality).unwrap()[0];
        assert!(mixed.provenance.iter().all(|p| p.draft == TimeSource::Modeled));
    }

    #[test]
    fn groups_prompts_in_first_appearance_order() {
        let mut r = nine("b");
        r.extend(nine("a"));
        r.swap(0, 12);
        let runs = replay(&r, &opts(Policy::threshold(-1.0)), &NoQuality).unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[0].summary.prompt_id, "a");
        let rep = ReplayReport::new(runs, &opts(Policy::threshold(-1.0))).unwrap();
        assert_eq!(rep.num_prompts, 2);
        assert_eq!(rep.recorded_components, 0);
    }

    fn arb_record() -> impl Strategy<Value = ExternalTraceRecord> {
        let t = || prop::option::of(0.0..100.0f64);
        (
            "[a-z0-9-]{1,12}",
            0usize..9,
            prop::collection::vec(-1e6..1e6f64, 1..13),
            (t(), t(), t(), t()),
            prop::option::of(prop_oneof![Just(Producer::Draft), Just(Producer::Target)]),
        )
            .prop_map(|(p, b, s, (d, tg, dc, sc), po)| ExternalTraceRecord {
                prompt_id: p,
                block_index: b,
                frame_scores: s,
                draft_time_s: d,
                target_time_s: tg,
                decode_time_s: dc,
                score_time_s: sc,
                producer_observed: po,
            })
    }

    /// Independent rendering with reversed key order and extra whitespace.
    fn scrambled(r: &ExternalTraceRecord) -> String {
        let v = serde_json::to_value(r).unwrap();
        let obj = v.as_object().unwrap();
        let parts: Vec<String> = obj
            .iter()
            .rev()
            .map(|(k, v)| format!("  \"{k}\" : {}", serde_json::to_string_pretty(v).unwrap().replace('\n', " ")))
            .collect();
        format!("{{{}}}", parts.join(" ,"))
    }

    proptest! {
        #[test]
        fn round_trip_is_canonical(recs in prop::collection::vec(arb_record(), 0..6)) {
            let canonical = serialize_trace(&recs);
            let noisy: String = recs.iter().map(|r| scrambled(r) + "\n\n").collect();
            let parsed = parse_trace_str(&noisy, 9).unwrap();
            prop_assert_eq!(&parsed, &recs);
            prop_assert_eq!(serialize_trace(&parsed), canonical.clone());
            prop_assert_eq!(serialize_trace(&parse_trace_str(&canonical, 9).unwrap()), canonical);
        }

        #[test]
        fn replay_is_pure(taus in prop::collection::vec(-3.0..1.0f64, 1..4)) {
            let r = nine("p");
            for tau in taus {
                let a = replay(&r, &opts(Policy::threshold(tau)), &NoQuality).unwrap();
                let b = replay(&r, &opts(Policy::threshold(tau)), &NoQuality).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
