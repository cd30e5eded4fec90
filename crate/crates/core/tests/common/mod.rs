//! Algorithm invariants checked against full engine runs. Shared by the
//! property tests and the acceptance suite.
#![allow(dead_code)]

use proptest::prelude::*;

use specvid::caches::{CacheOwner, KvCache};
use specvid::calibration::Calibration;
use specvid::digest::noise_seed;
use specvid::engine::{run_video_detailed, Decoder, Generator, RunArtifacts, RunOptions};
use specvid::router::{AggregationMode, Policy};
use specvid::synth::SyntheticFamily;
use specvid::types::{Producer, Reason, Verdict};
use specvid::{default_config, GenerationConfig, PromptSpec};

#[derive(Debug, Clone)]
pub struct Case {
    pub blocks: usize,
    pub seed: u64,
    pub prompt: usize,
    pub policy: Policy,
    pub aggregation: AggregationMode,
    pub score_forced: bool,
}

pub fn arb_policy() -> impl Strategy<Value = Policy> {
    prop_oneof![
        4 => (-3.0..1.0f64, any::<bool>()).prop_map(|(tau, f)| Policy::Threshold { tau, force_reject_block0: f }),
        1 => prop_oneof![Just(f64::INFINITY), Just(f64::NEG_INFINITY)]
            .prop_map(|tau| Policy::Threshold { tau, force_reject_block0: true }),
        2 => (0.0..=1.0f64, any::<bool>(), any::<u64>()).prop_map(|(p, f, s)| Policy::Random {
            accept_prob: p,
            force_reject_block0: f,
            rng_seed: s,
        }),
        1 => Just(Policy::AlwaysAccept),
        1 => Just(Policy::AlwaysReject),
    ]
}

pub fn arb_case() -> impl Strategy<Value = Case> {
    (
        prop_oneof![Just(1usize), Just(2), Just(9)],
        any::<u64>(),
        0usize..1000,
        arb_policy(),
        prop_oneof![Just(AggregationMode::MinFrame), Just(AggregationMode::MeanFrame)],
        any::<bool>(),
    )
        .prop_map(|(blocks, seed, prompt, policy, aggregation, score_forced)| Case {
            blocks,
            seed,
            prompt,
            policy,
            aggregation,
            score_forced,
        })
}

pub fn config_for(case: &Case) -> GenerationConfig {
    GenerationConfig {
        num_blocks: case.blocks,
        seed: case.seed,
        score_forced_blocks: case.score_forced,
        ..default_config()
    }
}

pub fn run(cal: &Calibration, config: &GenerationConfig, prompt: &PromptSpec, policy: &Policy, aggregation: AggregationMode) -> RunArtifacts {
    let family = SyntheticFamily::new(config, cal);
    let mut decoder = family.decoder();
    let mut router = policy.router(&prompt.prompt_id);
    let options = RunOptions {
        aggregation,
        latency: cal.latency.clone(),
    };
    run_video_detailed(config, prompt, family.models(), &mut decoder, &mut router, &options).expect("run succeeds")
}

fn ensure(cond: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what())
    }
}

fn accepted_set(a: &RunArtifacts) -> Vec<bool> {
    a.summary.block_traces.iter().map(|t| t.decision.accepted()).collect()
}

/// Every invariant for one case; the error names the first violation.
#[allow(clippy::needless_range_loop)]
pub fn check_case(cal: &Calibration, case: &Case) -> Result<(), String> {
    let config = config_for(case);
    let prompt = PromptSpec::simulated(case.prompt);
    let family = SyntheticFamily::new(&config, cal);
    let art = run(cal, &config, &prompt, &case.policy, case.aggregation);
    let traces = &art.summary.block_traces;
    let b = case.blocks;

    // Forced first block, even with an infinite score.
    if case.policy.forces_reject(0) {
        ensure(traces[0].decision.reason == Reason::ForcedFirstBlock, || "block 0 not forced".into())?;
        let mut router = case.policy.router("probe");
        let d = router.decide(0, Some(f64::INFINITY)).map_err(|e| e.to_string())?;
        ensure(d.verdict == Verdict::Reject, || "forced block accepted at q=+inf".into())?;
    }

    // Drafter outputs do not depend on routing.
    for other in [Policy::AlwaysAccept, Policy::AlwaysReject, Policy::threshold(0.0)] {
        let o = run(cal, &config, &prompt, &other, case.aggregation);
        ensure(o.drafter_kv.digests() == art.drafter_kv.digests(), || {
            format!("drafter digests differ between {:?} and {other:?}", case.policy)
        })?;
    }

    // Noise seeds and regeneration.
    for blk in 0..b {
        let seed = noise_seed(config.seed, &prompt.prompt_id, blk);
        ensure(art.noise_seeds[blk] == seed, || format!("noise seed mismatch at {blk}"))?;
        let d = art.drafter_kv.entries()[blk].payload();
        ensure(d.noise_seed == seed && d.producer == Producer::Draft, || format!("draft {blk} seed/producer"))?;
        let t = art.target_kv.entries()[blk].payload();
        ensure(t.noise_seed == seed, || format!("committed block {blk} used another seed"))?;
        let accepted = traces[blk].decision.accepted();
        let expect = if accepted { Producer::Draft } else { Producer::Target };
        ensure(t.producer == expect, || format!("block {blk} committed by wrong producer"))?;
        if !accepted {
            let prefix = KvCache::replay(
                CacheOwner::Target,
                art.target_kv.entries()[..blk].iter().map(|e| e.payload().clone()),
            )
            .map_err(|e| e.to_string())?;
            let again = family.target.generate(seed, &prefix, blk, &prompt).map_err(|e| e.to_string())?;
            ensure(again.digest() == t.digest(), || format!("regeneration of block {blk} not reproducible"))?;
        }
    }

    // Committed-path replay through a fresh decoder reproduces emitted frames,
    // and snapshot/restore is an identity on decoder state.
    let mut dec = family.decoder();
    for (blk, entry) in art.target_kv.entries().iter().enumerate() {
        let snap = dec.snapshot();
        let before = dec.state_digest();
        if let Some(draft) = art.drafter_kv.entries().get(blk) {
            dec.decode(draft.payload()).map_err(|e| e.to_string())?;
            dec.restore(&snap).map_err(|e| e.to_string())?;
            ensure(dec.state_digest() == before, || format!("restore not identity at {blk}"))?;
        }
        let frames = dec.decode(entry.payload()).map_err(|e| e.to_string())?;
        ensure(frames.digest() == art.emitted[blk].digest(), || format!("replayed frames differ at {blk}"))?;
    }

    // KV caches: contiguous, append-only, digests intact.
    for kv in [&art.drafter_kv, &art.target_kv] {
        ensure(kv.len() == b, || "kv length".into())?;
        kv.verify().map_err(|e| e.to_string())?;
        ensure(kv.entries().iter().enumerate().all(|(i, e)| e.block_index == i), || "kv order".into())?;
        let mut probe = kv.clone();
        let stale = kv.entries()[0].payload().clone();
        ensure(probe.commit(stale).is_err(), || "kv accepted a stale block".into())?;
        ensure(probe.digests() == kv.digests(), || "failed commit mutated kv".into())?;
    }

    // Emitted frames: first block plus later blocks.
    let expected = config.pixel_frames_first_block + (b - 1) * config.pixel_frames_later_block;
    ensure(art.emitted_frame_count() == expected, || {
        format!("emitted {} frames, expected {expected}", art.emitted_frame_count())
    })?;

    // Threshold monotonicity and min-within-mean dominance.
    if let Policy::Threshold { tau, force_reject_block0 } = case.policy {
        if tau.is_finite() {
            let lower = Policy::Threshold {
                tau: tau - 0.37,
                force_reject_block0,
            };
            let at = run(cal, &config, &prompt, &case.policy, AggregationMode::MinFrame);
            let lo = run(cal, &config, &prompt, &lower, AggregationMode::MinFrame);
            let mean = run(cal, &config, &prompt, &case.policy, AggregationMode::MeanFrame);
            let (a, l, m) = (accepted_set(&at), accepted_set(&lo), accepted_set(&mean));
            for i in 0..b {
                ensure(!a[i] || l[i], || format!("lowering tau dropped block {i}"))?;
                ensure(!a[i] || m[i], || format!("min accepted block {i} that mean rejected"))?;
            }
        }
    }
    Ok(())
}
