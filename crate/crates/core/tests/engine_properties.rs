mod common;

use std::sync::OnceLock;

use proptest::prelude::*;

use specvid::calibration::Calibration;
use specvid::router::{AggregationMode, Policy};
use specvid::PromptSpec;

use common::{arb_case, check_case, config_for, run, Case};

fn cal() -> &'static Calibration {
    static CAL: OnceLock<Calibration> = OnceLock::new();
    CAL.get_or_init(|| Calibration::bundled().unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn engine_invariants_hold(case in arb_case()) {
        if let Err(e) = check_case(cal(), &case) {
            prop_assert!(false, "{e} in {case:?}");
        }
    }

    #[test]
    fn runs_are_deterministic(case in arb_case()) {
        let config = config_for(&case);
        let p = PromptSpec::simulated(case.prompt);
        let a = run(cal(), &config, &p, &case.policy, case.aggregation);
        let b = run(cal(), &config, &p, &case.policy, case.aggregation);
        prop_assert_eq!(a.summary, b.summary);
        prop_assert_eq!(a.target_kv.digests(), b.target_kv.digests());
    }
}

#[test]
fn default_run_emits_105_frames() {
    let case = Case {
        blocks: 9,
        seed: 42,
        prompt: 0,
        policy: Policy::threshold(-0.7),
        aggregation: AggregationMode::MinFrame,
        score_forced: false,
    };
    let a = run(cal(), &config_for(&case), &PromptSpec::simulated(0), &case.policy, case.aggregation);
    assert_eq!(a.emitted_frame_count(), 105);
    assert!(a.summary.block_traces[0].aggregate_score.is_none());
}

#[test]
fn single_block_video_has_zero_accept_rate() {
    let case = Case {
        blocks: 1,
        seed: 1,
        prompt: 3,
        policy: Policy::AlwaysAccept,
        aggregation: AggregationMode::MinFrame,
        score_forced: false,
    };
    let a = run(cal(), &config_for(&case), &PromptSpec::simulated(3), &case.policy, case.aggregation);
    assert!(a.summary.block_traces[0].decision.accepted());
    assert_eq!(a.summary.accept_rate_excl_block0, 0.0);
    assert_eq!(a.emitted_frame_count(), 9);
}

#[test]
fn always_reject_time_is_target_only() {
    let cal = cal();
    let case = Case {
        blocks: 9,
        seed: 5,
        prompt: 1,
        policy: Policy::AlwaysReject,
        aggregation: AggregationMode::MinFrame,
        score_forced: false,
    };
    let a = run(cal, &config_for(&case), &PromptSpec::simulated(1), &case.policy, case.aggregation);
    assert_eq!(a.summary.total_time_s, cal.latency.target_only_time(9));
    assert_eq!(a.summary.quality_proxy, cal.quality_proxy.base_quality);
}
