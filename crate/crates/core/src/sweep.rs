//! Threshold sweeps, baselines and ablation arms over simulated prompts.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{Calibration, ReferenceArms};
use crate::config::{GenerationConfig, PromptSpec};
use crate::costmodel::speedup;
use crate::digest::derive_seed;
use crate::engine::{run_video, RunOptions};
use crate::error::{Error, Result};
use crate::router::{AggregationMode, Policy};
use crate::synth::SyntheticFamily;
use crate::table::{ReferenceTable, RowKind};

pub const CSV_HEADER: &str = "label,quality,time_s,speedup,accept_rate";
pub const REPORT_VERSION: u32 = 1;
/// Default band on quality non-monotonicity tolerated by [`pareto_check`].
pub const PARETO_QUALITY_TOLERANCE: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArmKind {
    TargetOnly,
    DraftOnly,
    Threshold,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub label: String,
    pub kind: ArmKind,
    /// Random policies get their stream seed from the sweep seed and label.
    pub policy: Policy,
    pub aggregation: AggregationMode,
}

impl Arm {
    pub fn target_only() -> Self {
        Self {
            label: "target-only".into(),
            kind: ArmKind::TargetOnly,
            policy: Policy::AlwaysReject,
            aggregation: AggregationMode::MinFrame,
        }
    }

    pub fn draft_only() -> Self {
        Self {
            label: "draft-only".into(),
            kind: ArmKind::DraftOnly,
            policy: Policy::AlwaysAccept,
            aggregation: AggregationMode::MinFrame,
        }
    }

    pub fn threshold(tau: f64, aggregation: AggregationMode) -> Self {
        let label = match aggregation {
            AggregationMode::MinFrame => format!("tau={}", fmt_tau(tau)),
            AggregationMode::MeanFrame => format!("avg-frame tau={}", fmt_tau(tau)),
        };
        Self {
            label,
            kind: ArmKind::Threshold,
            policy: Policy::threshold(tau),
            aggregation,
        }
    }

    pub fn random(accept_prob: f64, force_reject_block0: bool) -> Self {
        Self {
            label: if force_reject_block0 { "force-reject+random".into() } else { "random".into() },
            kind: ArmKind::Random,
            policy: Policy::Random {
                accept_prob,
                force_reject_block0,
                rng_seed: 0,
            },
            aggregation: AggregationMode::MinFrame,
        }
    }

    pub fn tau(&self) -> Option<f64> {
        match self.policy {
            Policy::Threshold { tau, .. } => Some(tau),
            _ => None,
        }
    }

    fn seeded_policy(&self, master: u64) -> Policy {
        match &self.policy {
            Policy::Random {
                accept_prob,
                force_reject_block0,
                ..
            } => Policy::Random {
                accept_prob: *accept_prob,
                force_reject_block0: *force_reject_block0,
                rng_seed: derive_seed(master, &["arm", &self.label]),
            },
            p => p.clone(),
        }
    }
}

/// `-1.0` rather than `-1`, matching how thresholds are usually written.
pub fn fmt_tau(tau: f64) -> String {
    if tau.is_finite() && tau.fract() == 0.0 {
        format!("{tau:.1}")
    } else {
        format!("{tau}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub num_prompts: usize,
    pub seed: u64,
    pub arms: Vec<Arm>,
    /// Worker cap; `None` uses every core.
    #[serde(default)]
    pub jobs: Option<usize>,
}

impl SweepSpec {
    /// Target-only, one min-frame arm per threshold, draft-only.
    pub fn threshold_sweep(thresholds: &[f64], num_prompts: usize, seed: u64) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::InvalidSweep("no thresholds".into()));
        }
        let mut arms = vec![Arm::target_only()];
        arms.extend(thresholds.iter().map(|&t| Arm::threshold(t, AggregationMode::MinFrame)));
        arms.push(Arm::draft_only());
        let spec = Self {
            num_prompts,
            seed,
            arms,
            jobs: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Target-only, the default min-frame arm, mean-frame arms, both random
    /// routing arms, draft-only.
    pub fn ablation(arms: &ReferenceArms, default_tau: f64, num_prompts: usize, seed: u64) -> Result<Self> {
        let mut v = vec![Arm::target_only(), Arm::threshold(default_tau, AggregationMode::MinFrame)];
        v.extend(
            arms.avg_frame_thresholds
                .iter()
                .map(|&t| Arm::threshold(t, AggregationMode::MeanFrame)),
        );
        if let Some(r) = arms.forced_random_rate {
            v.push(Arm::random(r, true));
        }
        if let Some(r) = arms.random_rate {
            v.push(Arm::random(r, false));
        }
        v.push(Arm::draft_only());
        let spec = Self {
            num_prompts,
            seed,
            arms: v,
            jobs: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_jobs(mut self, jobs: Option<usize>) -> Self {
        self.jobs = jobs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_prompts == 0 {
            return Err(Error::InvalidSweep("num_prompts must be at least 1".into()));
        }
        if self.arms.iter().filter(|a| a.kind == ArmKind::TargetOnly).count() != 1 {
            return Err(Error::InvalidSweep("exactly one target-only arm required".into()));
        }
        if !self.arms.iter().any(|a| a.kind == ArmKind::Threshold) && self.arms.len() > 2 {
            return Err(Error::InvalidSweep("no threshold arms".into()));
        }
        let mut labels: Vec<&str> = self.arms.iter().map(|a| a.label.as_str()).collect();
        labels.sort_unstable();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidSweep(format!("duplicate arm label {:?}", w[0])));
        }
        if self.jobs == Some(0) {
            return Err(Error::InvalidSweep("jobs must be at least 1".into()));
        }
        for a in &self.arms {
            a.policy.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub kind: ArmKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub aggregation: AggregationMode,
    pub quality: f64,
    pub time_s: f64,
    pub speedup: f64,
    pub accept_rate: f64,
    pub quality_se: f64,
    pub time_se: f64,
    pub accept_rate_se: f64,
}

impl SweepRow {
    /// Rows of a reference table, for [`pareto_check`]. Rows without a
    /// quality, time or accept rate are skipped.
    pub fn from_reference(table: &ReferenceTable) -> Vec<SweepRow> {
        let t0 = table.target_only().and_then(|r| r.time_s);
        table
            .rows
            .iter()
            .filter_map(|r| {
                let (kind, tau, aggregation) = match r.kind {
                    RowKind::TargetOnly => (ArmKind::TargetOnly, None, AggregationMode::MinFrame),
                    RowKind::DraftOnly => (ArmKind::DraftOnly, None, AggregationMode::MinFrame),
                    RowKind::Threshold { tau, aggregation } => (ArmKind::Threshold, Some(tau), aggregation),
                    RowKind::Random { .. } => (ArmKind::Random, None, AggregationMode::MinFrame),
                };
                let time_s = r.time_s?;
                let accept_rate = match kind {
                    ArmKind::TargetOnly => 0.0,
                    ArmKind::DraftOnly => 1.0,
                    _ => r.accept_rate?,
                };
                Some(SweepRow {
                    label: r.label.clone(),
                    kind,
                    tau,
                    aggregation,
                    quality: r.quality?,
                    time_s,
                    speedup: r.speedup.or(t0.map(|t| t / time_s))?,
                    accept_rate,
                    quality_se: 0.0,
                    time_se: 0.0,
                    accept_rate_se: 0.0,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub metric: String,
    pub from_label: String,
    pub to_label: String,
    pub from: f64,
    pub to: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoReport {
    pub passed: bool,
    pub rows_checked: usize,
    pub quality_tolerance: f64,
    pub violations: Vec<Violation>,
}

/// Checks that, as tau decreases within each aggregation mode, accept rate
/// and speedup never decrease and quality never rises by more than
/// `quality_tolerance`. Non-threshold rows are ignored.
pub fn pareto_check(rows: &[SweepRow], quality_tolerance: f64) -> ParetoReport {
    let mut violations = Vec::new();
    let mut checked = 0;
    for mode in [AggregationMode::MinFrame, AggregationMode::MeanFrame] {
        let mut group: Vec<&SweepRow> = rows
            .iter()
            .filter(|r| r.kind == ArmKind::Threshold && r.aggregation == mode && r.tau.is_some())
            .collect();
        group.sort_by(|a, b| {
            b.tau
                .unwrap()
                .total_cmp(&a.tau.unwrap())
                .then_with(|| a.label.cmp(&b.label))
        });
        checked += group.len();
        for w in group.windows(2) {
            let (a, b) = (w[0], w[1]);
            let mut flag = |metric: &str, from: f64, to: f64, ok: bool| {
                if !ok {
                    violations.push(Violation {
                        metric: metric.into(),
                        from_label: a.label.clone(),
                        to_label: b.label.clone(),
                        from,
                        to,
                    });
                }
            };
            flag("accept_rate", a.accept_rate, b.accept_rate, b.accept_rate >= a.accept_rate);
            flag("speedup", a.speedup, b.speedup, b.speedup >= a.speedup);
            flag(
                "quality",
                a.quality,
                b.quality,
                b.quality <= a.quality + quality_tolerance,
            );
        }
    }
    ParetoReport {
        passed: violations.is_empty(),
        rows_checked: checked,
        quality_tolerance,
        violations,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub version: u32,
    pub num_prompts: usize,
    pub num_blocks: usize,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
    pub pareto: ParetoReport,
}

impl SweepReport {
    pub fn row(&self, label: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        to_csv(&self.rows)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

pub fn to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let label = if r.label.contains([',', '"']) {
            format!("\"{}\"", r.label.replace('"', "\"\""))
        } else {
            r.label.clone()
        };
        writeln!(
            s,
            "{label},{:.6},{:.4},{:.4},{:.6}",
            r.quality, r.time_s, r.speedup, r.accept_rate
        )
        .expect("string write");
    }
    s
}

struct PromptResult {
    quality: f64,
    time_s: f64,
    accept_rate: f64,
}

/// Mean is taken as an offset from the first value, so a constant column
/// averages to exactly that constant.
fn mean_se(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let x0 = xs.clone().next().unwrap_or(0.0);
    let mean = x0 + xs.clone().map(|x| x - x0).sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn run_arm(
    arm: &Arm,
    spec: &SweepSpec,
    config: &GenerationConfig,
    family: &SyntheticFamily,
    options: &RunOptions,
) -> Result<Vec<PromptResult>> {
    let policy = arm.seeded_policy(spec.seed);
    let options = RunOptions {
        aggregation: arm.aggregation,
        latency: options.latency.clone(),
    };
    (0..spec.num_prompts)
        .into_par_iter()
        .map(|i| {
            let prompt = PromptSpec::simulated(i);
            let mut decoder = family.decoder();
            let mut router = policy.router(&prompt.prompt_id);
            let s = run_video(config, &prompt, family.models(), &mut decoder, &mut router, &options)?;
            Ok(PromptResult {
                quality: s.quality_proxy,
                time_s: s.total_time_s,
                accept_rate: s.accept_rate_excl_block0,
            })
        })
        .collect()
}

/// Run every arm over `spec.num_prompts` simulated prompts. Prompts run in
/// parallel; means are reduced in prompt order, so results do not depend on
/// scheduling.
pub fn run_sweep(spec: &SweepSpec, config: &GenerationConfig, calibration: &Calibration) -> Result<SweepReport> {
    spec.validate()?;
    let config = GenerationConfig {
        seed: spec.seed,
        ..config.clone()
    };
    config.validate()?;
    if config.num_blocks != calibration.num_blocks {
        log::warn!(
            "calibration fitted for {} blocks, simulating {}",
            calibration.num_blocks,
            config.num_blocks
        );
    }
    let family = SyntheticFamily::new(&config, calibration);
    let options = RunOptions {
        aggregation: AggregationMode::MinFrame,
        latency: calibration.latency.clone(),
    };
    let work = || -> Result<Vec<Vec<PromptResult>>> {
        spec.arms
            .iter()
            .map(|arm| {
                log::info!("arm {} ({} prompts)", arm.label, spec.num_prompts);
                run_arm(arm, spec, &config, &family, &options)
            })
            .collect()
    };
    let results = match spec.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidSweep(e.to_string()))?
            .install(work)?,
        None => work()?,
    };

    let t0_idx = spec
        .arms
        .iter()
        .position(|a| a.kind == ArmKind::TargetOnly)
        .expect("validated");
    let t0 = mean_se(results[t0_idx].iter().map(|r| r.time_s)).0;
    let mut rows = Vec::with_capacity(spec.arms.len());
    for (arm, res) in spec.arms.iter().zip(&results) {
        let (quality, quality_se) = mean_se(res.iter().map(|r| r.quality));
        let (time_s, time_se) = mean_se(res.iter().map(|r| r.time_s));
        let (accept_rate, accept_rate_se) = mean_se(res.iter().map(|r| r.accept_rate));
        rows.push(SweepRow {
            label: arm.label.clone(),
            kind: arm.kind,
            tau: arm.tau(),
            aggregation: arm.aggregation,
            quality,
            time_s,
            speedup: speedup(time_s, t0)?,
            accept_rate,
            quality_se,
            time_se,
            accept_rate_se,
        });
    }
    let pareto = pareto_check(&rows, PARETO_QUALITY_TOLERANCE);
    Ok(SweepReport {
        version: REPORT_VERSION,
        num_prompts: spec.num_prompts,
        num_blocks: config.num_blocks,
        seed: spec.seed,
        rows,
        pareto,
    })
}
