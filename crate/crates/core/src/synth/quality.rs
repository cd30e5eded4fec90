//! Calibrated distribution of draft block scores.
//!
//! The model is a survival function `S(tau) = P(q >= tau)` over worst-frame
//! scores, piecewise-linear through `(tau, accept_rate)` knots and extended
//! linearly past the outer knots. Sampling inverts `S` so sampled minima
//! reproduce the knot accept rates in expectation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::derive_seed;
use crate::error::{Error, Result};
use crate::types::FrameScoreVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileKnot {
    pub tau: f64,
    pub accept_rate: f64,
}

/// Tail slopes (accept rate per unit score). `None` extends the adjacent
/// segment's slope.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TailSlopes {
    pub upper: Option<f64>,
    pub lower: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftQualityModel {
    /// Sorted by `tau` descending; accept rates strictly increasing.
    pub knots: Vec<QuantileKnot>,
    /// Slope of `S` above the highest knot.
    pub upper_tail_slope: f64,
    /// Slope of `S` below the lowest knot.
    pub lower_tail_slope: f64,
    /// Mean offset of each non-minimum frame above the block minimum.
    pub frame_offset_mean: f64,
    pub rng_seed: u64,
}

/// Build the survival model through `knots`.
pub fn fit_quantile(knots: &[QuantileKnot], tails: TailSlopes) -> Result<DraftQualityModel> {
    let mut k = knots.to_vec();
    if k.is_empty() {
        return Err(Error::InvalidKnots("no knots".into()));
    }
    if k.iter().any(|k| !k.tau.is_finite()) {
        return Err(Error::InvalidKnots("knot thresholds must be finite".into()));
    }
    k.sort_by(|a, b| b.tau.total_cmp(&a.tau));
    for w in k.windows(2) {
        if w[0].tau == w[1].tau {
            return Err(Error::InvalidKnots(format!("duplicate tau {}", w[0].tau)));
        }
        if w[1].accept_rate <= w[0].accept_rate {
            return Err(Error::InvalidKnots(format!(
                "accept rate must increase as tau decreases: {} at {} vs {} at {}",
                w[0].accept_rate, w[0].tau, w[1].accept_rate, w[1].tau
            )));
        }
    }
    if k.iter().any(|k| !(k.accept_rate > 0.0 && k.accept_rate < 1.0)) {
        return Err(Error::InvalidKnots("accept rates must lie in (0, 1)".into()));
    }
    let seg_slope = |a: &QuantileKnot, b: &QuantileKnot| (b.accept_rate - a.accept_rate) / (a.tau - b.tau);
    let upper = match (tails.upper, k.len()) {
        (Some(s), _) => s,
        (None, n) if n >= 2 => seg_slope(&k[0], &k[1]),
        _ => return Err(Error::InvalidKnots("one knot needs explicit tail slopes".into())),
    };
    let lower = match (tails.lower, k.len()) {
        (Some(s), _) => s,
        (None, n) if n >= 2 => seg_slope(&k[n - 2], &k[n - 1]),
        _ => return Err(Error::InvalidKnots("one knot needs explicit tail slopes".into())),
    };
    if !(upper > 0.0 && upper.is_finite() && lower > 0.0 && lower.is_finite()) {
        return Err(Error::InvalidKnots("tail slopes must be positive".into()));
    }
    Ok(DraftQualityModel {
        knots: k,
        upper_tail_slope: upper,
        lower_tail_slope: lower,
        frame_offset_mean: 0.0,
        rng_seed: 42,
    })
}

impl DraftQualityModel {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn with_frame_offset_mean(mut self, mean: f64) -> Self {
        self.frame_offset_mean = mean;
        self
    }

    /// `P(q >= tau)` for the worst-frame score `q`.
    pub fn accept_rate(&self, tau: f64) -> f64 {
        let k = &self.knots;
        let (first, last) = (k[0], k[k.len() - 1]);
        let s = if tau >= first.tau {
            first.accept_rate - self.upper_tail_slope * (tau - first.tau)
        } else if tau <= last.tau {
            last.accept_rate + self.lower_tail_slope * (last.tau - tau)
        } else {
            let i = k.iter().position(|kn| kn.tau <= tau).expect("bracketed");
            let (hi, lo) = (k[i - 1], k[i]);
            let t = (hi.tau - tau) / (hi.tau - lo.tau);
            hi.accept_rate + t * (lo.accept_rate - hi.accept_rate)
        };
        s.clamp(0.0, 1.0)
    }

    /// Inverse of [`accept_rate`](Self::accept_rate): the score `q` with
    /// `S(q) = u`, for `u` in `[0, 1]`.
    pub fn score_at_rate(&self, u: f64) -> f64 {
        let k = &self.knots;
        let (first, last) = (k[0], k[k.len() - 1]);
        if u <= first.accept_rate {
            first.tau + (first.accept_rate - u) / self.upper_tail_slope
        } else if u >= last.accept_rate {
            last.tau - (u - last.accept_rate) / self.lower_tail_slope
        } else {
            let i = k.iter().position(|kn| kn.accept_rate >= u).expect("bracketed");
            let (hi, lo) = (k[i - 1], k[i]);
            let t = (u - hi.accept_rate) / (lo.accept_rate - hi.accept_rate);
            hi.tau + t * (lo.tau - hi.tau)
        }
    }

    /// Per-frame scores for one drafted block: the minimum is drawn from the
    /// calibrated distribution, every other frame sits a uniform
    /// `[0, 2 * frame_offset_mean]` offset above it. Deterministic in
    /// `(rng_seed, prompt_id, block_index, frames)`.
    pub fn sample_block_score(&self, prompt_id: &str, block_index: usize, frames: usize) -> FrameScoreVector {
        let seed = derive_seed(
            self.rng_seed,
            &["draft-quality", prompt_id, &block_index.to_string()],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = self.score_at_rate(rng.random::<f64>());
        let frames = frames.max(1);
        let worst = rng.random_range(0..frames);
        let scores = (0..frames)
            .map(|i| {
                let off = rng.random::<f64>() * 2.0 * self.frame_offset_mean;
                if i == worst {
                    q
                } else {
                    q + off
                }
            })
            .collect();
        FrameScoreVector {
            block_index,
            scores,
        }
    }

    /// Expected mean-frame accept rate at `tau`, approximating the mean as
    /// the minimum shifted by its expected gap.
    pub fn mean_frame_accept_rate(&self, tau: f64, frames: usize) -> f64 {
        let gap = self.frame_offset_mean * (frames.saturating_sub(1)) as f64 / frames.max(1) as f64;
        self.accept_rate(tau - gap)
    }
}

/// Least-squares fit of `frame_offset_mean` to mean-frame accept rates
/// `(tau, rate)` observed with `frames` scored frames per block.
pub fn fit_frame_offset(model: &DraftQualityModel, rows: &[(f64, f64)], frames: usize) -> f64 {
    if rows.is_empty() || frames < 2 {
        return 0.0;
    }
    let loss = |g: f64| {
        let m = model.clone().with_frame_offset_mean(g);
        rows.iter()
            .map(|(tau, r)| (m.mean_frame_accept_rate(*tau, frames) - r).powi(2))
            .sum::<f64>()
    };
    // Coarse grid, then golden-section refinement around the best cell.
    let (lo, hi, n) = (0.0, 5.0, 5000);
    let step = (hi - lo) / n as f64;
    let best = (0..=n)
        .map(|i| lo + step * i as f64)
        .min_by(|a, b| loss(*a).total_cmp(&loss(*b)))
        .expect("non-empty grid");
    let (mut a, mut b) = ((best - step).max(0.0), best + step);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if loss(c) <= loss(d) {
            b = d;
        } else {
            a = c;
        }
    }
    (a + b) / 2.0
}
