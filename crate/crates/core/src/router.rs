//! Score aggregation and routing policies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::derive_seed;
use crate::error::{Error, Result};
use crate::types::{FrameScoreVector, Reason, RoutingDecision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    /// Worst frame decides.
    #[default]
    MinFrame,
    #[serde(rename = "avg-frame", alias = "mean-frame")]
    MeanFrame,
}

impl AggregationMode {
    pub fn label(self) -> &'static str {
        match self {
            AggregationMode::MinFrame => "min-frame",
            AggregationMode::MeanFrame => "avg-frame",
        }
    }
}

/// Collapse per-frame rewards into one block score.
pub fn aggregate(scores: &FrameScoreVector, mode: AggregationMode) -> Result<f64> {
    aggregate_slice(&scores.scores, mode)
}

pub fn aggregate_slice(scores: &[f64], mode: AggregationMode) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFiniteScore);
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(match mode {
        AggregationMode::MinFrame => min,
        // Summation rounding can land an ulp below the minimum.
        AggregationMode::MeanFrame => (scores.iter().sum::<f64>() / scores.len() as f64).max(min),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Policy {
    Threshold {
        tau: f64,
        force_reject_block0: bool,
    },
    Random {
        accept_prob: f64,
        force_reject_block0: bool,
        rng_seed: u64,
    },
    AlwaysAccept,
    AlwaysReject,
}

impl Policy {
    /// Fixed threshold with forced first-block rejection.
    pub fn threshold(tau: f64) -> Self {
        Policy::Threshold {
            tau,
            force_reject_block0: true,
        }
    }

    pub fn forces_reject(&self, block_index: usize) -> bool {
        block_index == 0
            && matches!(
                self,
                Policy::Threshold {
                    force_reject_block0: true,
                    ..
                } | Policy::Random {
                    force_reject_block0: true,
                    ..
                }
            )
    }

    /// Whether the decision depends on the block score.
    pub fn consults_scores(&self) -> bool {
        matches!(self, Policy::Threshold { .. })
    }

    /// Whether any draft can ever be accepted. A policy that cannot accept
    /// never needs the draft path.
    pub fn can_accept(&self) -> bool {
        match self {
            Policy::Threshold { tau, .. } => *tau != f64::INFINITY,
            Policy::Random { accept_prob, .. } => *accept_prob > 0.0,
            Policy::AlwaysAccept => true,
            Policy::AlwaysReject => false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Policy::Threshold { tau, .. } if tau.is_nan() => {
                Err(Error::InvalidConfig("threshold is NaN".into()))
            }
            Policy::Random { accept_prob, .. } if !(0.0..=1.0).contains(accept_prob) => {
                Err(Error::InvalidProbability(*accept_prob))
            }
            _ => Ok(()),
        }
    }

    /// Router for one run. Random policies draw from a stream keyed by the
    /// policy seed and `stream_key` (the prompt id), so runs are reproducible
    /// independently of execution order.
    pub fn router(&self, stream_key: &str) -> Router {
        let rng = match self {
            Policy::Random { rng_seed, .. } => Some(ChaCha8Rng::seed_from_u64(derive_seed(
                *rng_seed,
                &["router", stream_key],
            ))),
            _ => None,
        };
        Router {
            policy: self.clone(),
            rng,
        }
    }
}

/// Random policy accepting with the reference accept rate.
pub fn matched_random_policy(
    reference_accept_rate: f64,
    seed: u64,
    force_reject_block0: bool,
) -> Result<Policy> {
    let p = Policy::Random {
        accept_prob: reference_accept_rate,
        force_reject_block0,
        rng_seed: seed,
    };
    p.validate()?;
    Ok(p)
}

/// A policy bound to its per-run random stream.
#[derive(Debug, Clone)]
pub struct Router {
    policy: Policy,
    rng: Option<ChaCha8Rng>,
}

impl Router {
    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn decide(&mut self, block_index: usize, q: Option<f64>) -> Result<RoutingDecision> {
        decide(&self.policy, self.rng.as_mut(), block_index, q)
    }
}

/// Route one block. `rng` is required for random policies.
pub fn decide(
    policy: &Policy,
    rng: Option<&mut ChaCha8Rng>,
    block_index: usize,
    q: Option<f64>,
) -> Result<RoutingDecision> {
    if policy.forces_reject(block_index) {
        return Ok(RoutingDecision::new(Reason::ForcedFirstBlock));
    }
    let reason = match policy {
        Policy::Threshold { tau, .. } => {
            let q = q.ok_or(Error::MissingScore(block_index))?;
            if q.is_nan() {
                return Err(Error::NonFiniteScore);
            }
            if q >= *tau {
                Reason::AboveThreshold
            } else {
                Reason::BelowThreshold
            }
        }
        Policy::Random { accept_prob, .. } => {
            let rng = rng.ok_or_else(|| {
                Error::InvalidConfig("random policy used without its stream".into())
            })?;
            if rng.random::<f64>() < *accept_prob {
                Reason::RandomAccept
            } else {
                Reason::RandomReject
            }
        }
        Policy::AlwaysAccept => Reason::AlwaysAccept,
        Policy::AlwaysReject => Reason::AlwaysReject,
    };
    Ok(RoutingDecision::new(reason))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Verdict;
    use proptest::prelude::*;

    fn fsv(v: &[f64]) -> FrameScoreVector {
        FrameScoreVector {
            block_index: 1,
            scores: v.to_vec(),
        }
    }

    #[test]
    fn min_and_mean() {
        let v = fsv(&[0.5, -0.3, 0.1]);
        assert_eq!(aggregate(&v, AggregationMode::MinFrame).unwrap(), -0.3);
        let one = fsv(&[0.7]);
        assert_eq!(aggregate(&one, AggregationMode::MinFrame).unwrap(), 0.7);
        assert_eq!(aggregate(&one, AggregationMode::MeanFrame).unwrap(), 0.7);
        assert!(matches!(
            aggregate(&fsv(&[]), AggregationMode::MinFrame),
            Err(Error::EmptyScores)
        ));
        assert!(matches!(
            aggregate(&fsv(&[0.0, f64::NAN]), AggregationMode::MeanFrame),
            Err(Error::NonFiniteScore)
        ));
    }

    #[test]
    fn forced_first_block() {
        let p = Policy::threshold(-0.7);
        for q in [Some(5.0), Some(f64::INFINITY), None] {
            let d = p.router("x").decide(0, q).unwrap();
            assert_eq!(d, RoutingDecision::new(Reason::ForcedFirstBlock));
        }
    }

    #[test]
    fn threshold_boundary_is_inclusive() {
        let mut r = Policy::threshold(-0.7).router("x");
        assert_eq!(r.decide(3, Some(-0.7)).unwrap().verdict, Verdict::Accept);
        assert_eq!(
            r.decide(3, Some(-0.71)).unwrap(),
            RoutingDecision::new(Reason::BelowThreshold)
        );
        assert!(matches!(r.decide(3, None), Err(Error::MissingScore(3))));
    }

    #[test]
    fn unforced_threshold_needs_score_at_block0() {
        let p = Policy::Threshold {
            tau: 0.0,
            force_reject_block0: false,
        };
        assert!(matches!(
            p.router("x").decide(0, None),
            Err(Error::MissingScore(0))
        ));
        assert!(p.router("x").decide(0, Some(0.0)).unwrap().accepted());
    }

    #[test]
    fn matched_random_policy_bounds() {
        let p = matched_random_policy(0.731, 7, false).unwrap();
        assert!(matches!(p, Policy::Random { accept_prob, .. } if accept_prob == 0.731));
        assert!(matched_random_policy(1.2, 7, false).is_err());
        assert!(matched_random_policy(-0.1, 7, false).is_err());
        let mut never = matched_random_policy(0.0, 7, false).unwrap().router("p");
        for b in 0..1000 {
            assert!(!never.decide(b, None).unwrap().accepted());
        }
    }

    #[test]
    fn random_accept_rate_matches_binomial() {
        // 10^5 draws; binomial sd = sqrt(p(1-p)/n) ~ 0.0014, tolerance 0.005.
        let p = matched_random_policy(0.731, 42, false).unwrap();
        let n = 100_000;
        let mut accepted = 0usize;
        for prompt in 0..(n / 10) {
            let mut r = p.router(&format!("prompt-{prompt}"));
            for b in 0..10 {
                accepted += r.decide(b, None).unwrap().accepted() as usize;
            }
        }
        let rate = accepted as f64 / n as f64;
        assert!((rate - 0.731).abs() < 0.005, "rate {rate}");
    }

    #[test]
    fn random_stream_is_reproducible_and_score_independent() {
        let p = matched_random_policy(0.5, 3, true).unwrap();
        let a: Vec<_> = {
            let mut r = p.router("k");
            (0..50).map(|b| r.decide(b, Some(-10.0)).unwrap()).collect()
        };
        let b: Vec<_> = {
            let mut r = p.router("k");
            (0..50).map(|b| r.decide(b, Some(10.0)).unwrap()).collect()
        };
        assert_eq!(a, b);
        assert_eq!(a[0].reason, Reason::ForcedFirstBlock);
    }

    #[test]
    fn can_accept() {
        assert!(!Policy::threshold(f64::INFINITY).can_accept());
        assert!(Policy::threshold(f64::NEG_INFINITY).can_accept());
        assert!(!Policy::AlwaysReject.can_accept());
        assert!(!matched_random_policy(0.0, 1, false).unwrap().can_accept());
    }

    proptest! {
        #[test]
        fn min_never_exceeds_mean(v in prop::collection::vec(-5.0f64..5.0, 12)) {
            let direct_min = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let direct_mean = v.iter().sum::<f64>() / v.len() as f64;
            let min = aggregate_slice(&v, AggregationMode::MinFrame).unwrap();
            let mean = aggregate_slice(&v, AggregationMode::MeanFrame).unwrap();
            prop_assert_eq!(min, direct_min);
            prop_assert!((mean - direct_mean).abs() < 1e-12);
            prop_assert!(min <= mean);
        }

        #[test]
        fn threshold_accept_sets_are_nested(
            qs in prop::collection::vec(-4.0f64..4.0, 1..40),
            t1 in -4.0f64..4.0,
            dt in 0.0f64..4.0,
        ) {
            let t2 = t1 + dt;
            let mut r1 = Policy::threshold(t1).router("x");
            let mut r2 = Policy::threshold(t2).router("x");
            for (i, q) in qs.iter().enumerate() {
                let b = i + 1;
                let a1 = r1.decide(b, Some(*q)).unwrap().accepted();
                let a2 = r2.decide(b, Some(*q)).unwrap().accepted();
                prop_assert!(!a2 || a1);
            }
        }

        #[test]
        fn min_accept_set_within_mean_accept_set(
            blocks in prop::collection::vec(prop::collection::vec(-4.0f64..4.0, 1..13), 1..20),
            tau in -4.0f64..4.0,
        ) {
            let mut r = Policy::threshold(tau).router("x");
            for (i, v) in blocks.iter().enumerate() {
                let b = i + 1;
                let min = aggregate_slice(v, AggregationMode::MinFrame).unwrap();
                let mean = aggregate_slice(v, AggregationMode::MeanFrame).unwrap();
                let a_min = r.decide(b, Some(min)).unwrap().accepted();
                let a_mean = r.decide(b, Some(mean)).unwrap().accepted();
                prop_assert!(!a_min || a_mean);
            }
        }
    }
}
