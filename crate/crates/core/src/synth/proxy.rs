//! Run-level quality proxy.
//!
//! This is a curve-fit calibration device: it maps a routing trace to a
//! number on the same scale as the reference video-quality column so the
//! quality/speed frontier can be reproduced. It does not emulate any video
//! quality metric.
//!
//! `quality = base - (1/B) * sum over accepted drafts of penalty(worst frame)`,
//! plus an extra `first_block_penalty` when block 0's draft is accepted. The
//! penalty is piecewise-constant on score segments and never increases with
//! the score, so accepting a lower-scoring draft never helps.

use serde::{Deserialize, Serialize};

use crate::engine::QualityEstimator;
use crate::error::{Error, Result};
use crate::nnls::nnls;
use crate::synth::quality::DraftQualityModel;
use crate::types::BlockTrace;

/// Default tolerance on reproduced quality values.
pub const QUALITY_TOLERANCE: f64 = 0.0005;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityProxyModel {
    /// Quality of a run in which every block comes from the target.
    pub base_quality: f64,
    /// Segment boundaries, descending.
    pub boundaries: Vec<f64>,
    /// One penalty per segment (`boundaries.len() + 1`), non-decreasing:
    /// segment 0 is `q >= boundaries[0]`, the last is `q < boundaries[last]`.
    pub penalties: Vec<f64>,
    pub first_block_penalty: f64,
}

impl QualityProxyModel {
    pub fn segment(&self, q: f64) -> usize {
        self.boundaries.iter().take_while(|&&b| q < b).count()
    }

    pub fn penalty(&self, q: f64) -> f64 {
        self.penalties[self.segment(q)]
    }

    /// Quality of one run from its trace.
    pub fn evaluate(&self, num_blocks: usize, traces: &[BlockTrace]) -> f64 {
        let mut drop = 0.0;
        for t in traces.iter().filter(|t| t.decision.accepted()) {
            let worst = t.worst_frame().unwrap_or(f64::NEG_INFINITY);
            drop += self.penalty(worst);
            if t.block_index == 0 {
                drop += self.first_block_penalty;
            }
        }
        self.base_quality - drop / num_blocks.max(1) as f64
    }

    /// Expected penalty of one draft whose worst-frame score is at least
    /// `tau`, weighted by the probability of that event.
    fn expected_penalty_above(&self, model: &DraftQualityModel, tau: f64) -> f64 {
        let mut total = 0.0;
        let n = self.penalties.len();
        for j in 0..n {
            let upper = if j == 0 { f64::INFINITY } else { self.boundaries[j - 1] };
            let lower = if j == n - 1 { f64::NEG_INFINITY } else { self.boundaries[j] };
            if tau >= upper {
                continue;
            }
            let mass = model.accept_rate(tau.max(lower)) - model.accept_rate(upper);
            total += self.penalties[j] * mass.max(0.0);
        }
        total
    }

    /// Expected quality for a threshold run with block 0 forced.
    pub fn expected_threshold_quality(&self, model: &DraftQualityModel, num_blocks: usize, tau: f64) -> f64 {
        let b = num_blocks as f64;
        self.base_quality - (b - 1.0) / b * self.expected_penalty_above(model, tau)
    }

    pub fn expected_draft_only_quality(&self, model: &DraftQualityModel, num_blocks: usize) -> f64 {
        let e = self.expected_penalty_above(model, f64::NEG_INFINITY);
        self.base_quality - (self.first_block_penalty / num_blocks as f64 + e)
    }

    pub fn expected_random_quality(
        &self,
        model: &DraftQualityModel,
        num_blocks: usize,
        rate: f64,
        force_reject_block0: bool,
    ) -> f64 {
        let b = num_blocks as f64;
        let e = self.expected_penalty_above(model, f64::NEG_INFINITY);
        if force_reject_block0 {
            self.base_quality - rate * (b - 1.0) / b * e
        } else {
            self.base_quality - rate * (self.first_block_penalty / b + e)
        }
    }
}

impl QualityEstimator for QualityProxyModel {
    fn run_quality(&self, num_blocks: usize, traces: &[BlockTrace]) -> f64 {
        self.evaluate(num_blocks, traces)
    }
}

/// Reference quality values the proxy is fitted to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityTargets {
    pub num_blocks: usize,
    pub target_only: f64,
    pub draft_only: f64,
    /// `(tau, quality)` for forced-block-0 min-frame threshold runs.
    pub thresholds: Vec<(f64, f64)>,
    /// `(accept rate, quality)` for random routing with block 0 forced.
    pub forced_random: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityResidual {
    pub label: String,
    pub reference: f64,
    pub predicted: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityProxyFit {
    pub model: QualityProxyModel,
    pub residuals: Vec<QualityResidual>,
}

impl QualityProxyFit {
    pub fn max_abs_error(&self) -> f64 {
        self.residuals.iter().map(|r| r.error.abs()).fold(0.0, f64::max)
    }

    pub fn within(&self, tol: f64) -> bool {
        self.max_abs_error() <= tol
    }
}

/// Fit penalties so expected run quality matches the targets.
///
/// Segment penalties come from NNLS on non-negative increments, which makes
/// them non-decreasing toward low scores. The lowest segment and the
/// first-block penalty are then chosen so draft-only quality matches exactly;
/// the forced-random row, when given, pins the mean penalty (subject to the
/// monotonicity floor).
pub fn fit_quality_proxy(targets: &QualityTargets, draft: &DraftQualityModel) -> Result<QualityProxyFit> {
    if targets.thresholds.len() < 3 {
        return Err(Error::Calibration(format!(
            "quality fit needs at least 3 threshold rows, got {}",
            targets.thresholds.len()
        )));
    }
    if targets.num_blocks < 2 {
        return Err(Error::Calibration("quality fit needs at least 2 blocks".into()));
    }
    let mut rows = targets.thresholds.clone();
    rows.sort_by(|a, b| b.0.total_cmp(&a.0));
    if rows.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Calibration("duplicate threshold rows".into()));
    }
    let b = targets.num_blocks as f64;
    let w = (b - 1.0) / b;
    let base = targets.target_only;

    // Probability mass of each scored segment: m[0] = S(tau_0), m[j] = S(tau_j) - S(tau_{j-1}).
    let mut masses = Vec::with_capacity(rows.len());
    let mut prev = 0.0;
    for (tau, _) in &rows {
        let s = draft.accept_rate(*tau);
        masses.push(s - prev);
        prev = s;
    }
    let tail_mass = 1.0 - prev;
    if masses.iter().any(|m| *m <= 0.0) || tail_mass <= 0.0 {
        return Err(Error::Calibration("empty score segment in draft model".into()));
    }

    let k = rows.len();
    let design: Vec<Vec<f64>> = (0..k)
        .map(|row| {
            (0..k)
                .map(|i| if i <= row { w * masses[i..=row].iter().sum::<f64>() } else { 0.0 })
                .collect()
        })
        .collect();
    let drops: Vec<f64> = rows.iter().map(|(_, q)| base - q).collect();
    let (increments, _) = nnls(&design, &drops);
    let mut penalties: Vec<f64> = increments
        .iter()
        .scan(0.0, |acc, d| {
            *acc += d;
            Some(*acc)
        })
        .collect();

    let e_top: f64 = penalties.iter().zip(&masses).map(|(p, m)| p * m).sum();
    let last = *penalties.last().expect("k >= 3");
    let floor = e_top + last * tail_mass;
    let mean_penalty = match targets.forced_random {
        Some((rate, q)) if rate > 0.0 => ((base - q) / (rate * w)).max(floor),
        _ => floor,
    };
    // Rounding can land the floor an ulp below the last segment.
    let tail = ((mean_penalty - e_top) / tail_mass).max(last);
    penalties.push(tail);
    let draft_drop = base - targets.draft_only;
    let first_block_penalty = (b * (draft_drop - mean_penalty)).max(0.0);

    let model = QualityProxyModel {
        base_quality: base,
        boundaries: rows.iter().map(|r| r.0).collect(),
        penalties,
        first_block_penalty,
    };

    let n = targets.num_blocks;
    let mut residuals = vec![
        residual("target-only", targets.target_only, model.base_quality),
        residual(
            "draft-only",
            targets.draft_only,
            model.expected_draft_only_quality(draft, n),
        ),
    ];
    for (tau, q) in &rows {
        residuals.push(residual(
            &format!("tau={}", crate::sweep::fmt_tau(*tau)),
            *q,
            model.expected_threshold_quality(draft, n, *tau),
        ));
    }
    Ok(QualityProxyFit { model, residuals })
}

fn residual(label: &str, reference: f64, predicted: f64) -> QualityResidual {
    QualityResidual {
        label: label.to_string(),
        reference,
        predicted,
        error: predicted - reference,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::quality::{fit_quantile, QuantileKnot, TailSlopes};
    use crate::types::{Reason, RoutingDecision};
    use crate::types::FrameScoreVector;

    fn draft() -> DraftQualityModel {
        let knots: Vec<QuantileKnot> = [
            (-0.7, 0.731),
            (-0.8, 0.749),
            (-0.9, 0.764),
            (-1.0, 0.780),
            (-1.5, 0.834),
            (-2.0, 0.875),
            (-2.5, 0.889),
        ]
        .iter()
        .map(|&(tau, accept_rate)| QuantileKnot { tau, accept_rate })
        .collect();
        fit_quantile(&knots, TailSlopes::default()).unwrap()
    }

    fn targets() -> QualityTargets {
        QualityTargets {
            num_blocks: 9,
            target_only: 0.0788,
            draft_only: 0.0644,
            thresholds: vec![
                (-0.7, 0.0773),
                (-0.8, 0.0769),
                (-0.9, 0.0771),
                (-1.0, 0.0764),
                (-1.5, 0.0757),
                (-2.0, 0.0756),
                (-2.5, 0.0754),
            ],
            forced_random: Some((0.703, 0.0771)),
        }
    }

    fn trace(b: usize, accepted: bool, q: f64) -> BlockTrace {
        BlockTrace {
            block_index: b,
            aggregate_score: Some(q),
            frame_scores: Some(FrameScoreVector {
                block_index: b,
                scores: vec![q, q + 1.0],
            }),
            decision: RoutingDecision::new(if accepted {
                Reason::AboveThreshold
            } else {
                Reason::BelowThreshold
            }),
            draft_charged: true,
            score_charged: true,
            draft_time_s: 0.0,
            score_time_s: 0.0,
            target_time_s: 0.0,
            decode_time_s: 0.0,
        }
    }

    #[test]
    fn fit_reproduces_reference_rows() {
        let fit = fit_quality_proxy(&targets(), &draft()).unwrap();
        assert!(fit.within(QUALITY_TOLERANCE), "{:#?}", fit.residuals);
        assert_eq!(fit.model.base_quality, 0.0788);
        let dr = fit.residuals.iter().find(|r| r.label == "draft-only").unwrap();
        assert!(dr.error.abs() < 1e-12);
    }

    #[test]
    fn penalties_are_non_decreasing_toward_low_scores() {
        let m = fit_quality_proxy(&targets(), &draft()).unwrap().model;
        assert!(m.penalties.windows(2).all(|w| w[0] <= w[1]), "{:?}", m.penalties);
        assert!(m.penalties.iter().all(|p| *p >= 0.0));
        assert!(m.first_block_penalty >= 0.0);
        // Evaluated directly on scores.
        let mut last = m.penalty(10.0);
        for i in 0..200 {
            let p = m.penalty(3.0 - i as f64 * 0.03);
            assert!(p >= last);
            last = p;
        }
    }

    #[test]
    fn all_reject_is_exactly_base() {
        let m = fit_quality_proxy(&targets(), &draft()).unwrap().model;
        let t: Vec<_> = (0..9).map(|b| trace(b, false, -5.0)).collect();
        assert_eq!(m.evaluate(9, &t), 0.0788);
    }

    #[test]
    fn adding_lower_scoring_accept_never_helps() {
        let m = fit_quality_proxy(&targets(), &draft()).unwrap().model;
        let mut t: Vec<_> = (0..9).map(|b| trace(b, b % 2 == 1, 0.5)).collect();
        let before = m.evaluate(9, &t);
        t[2] = trace(2, true, -3.0);
        assert!(m.evaluate(9, &t) <= before);
    }

    #[test]
    fn forced_random_row_is_floored_by_monotonicity() {
        let d = draft();
        let fit = fit_quality_proxy(&targets(), &d).unwrap();
        let m = &fit.model;
        let tail = m.penalties[m.penalties.len() - 1];
        let prev = m.penalties[m.penalties.len() - 2];
        // The reference forced-random row would need a tail penalty below
        // the previous segment, so the floor binds.
        assert!((tail - prev).abs() < 1e-12);
        let q = m.expected_random_quality(&d, 9, 0.70, false);
        for (tau, _) in targets().thresholds {
            assert!(q < m.expected_threshold_quality(&d, 9, tau));
        }
    }

    #[test]
    fn refit_on_own_predictions_is_a_fixed_point() {
        let d = draft();
        let m = fit_quality_proxy(&targets(), &d).unwrap().model;
        let synthetic = QualityTargets {
            num_blocks: 9,
            target_only: m.base_quality,
            draft_only: m.expected_draft_only_quality(&d, 9),
            thresholds: targets()
                .thresholds
                .iter()
                .map(|(t, _)| (*t, m.expected_threshold_quality(&d, 9, *t)))
                .collect(),
            forced_random: Some((0.703, m.expected_random_quality(&d, 9, 0.703, true))),
        };
        let again = fit_quality_proxy(&synthetic, &d).unwrap();
        assert!(again.max_abs_error() < 1e-12);
        for (a, b) in again.model.penalties.iter().zip(&m.penalties) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert!((again.model.first_block_penalty - m.first_block_penalty).abs() < 1e-9);
    }

    #[test]
    fn needs_three_threshold_rows() {
        let mut t = targets();
        t.thresholds.truncate(2);
        assert!(matches!(fit_quality_proxy(&t, &draft()), Err(Error::Calibration(_))));
    }
}
