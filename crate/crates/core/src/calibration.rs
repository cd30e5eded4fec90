//! Fitting the synthetic family and latency model to a reference table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{default_config, GenerationConfig};
use crate::costmodel::{fit_latencies, LatencyFitOptions, LatencyParams, RowResidual, TimingKind};
use crate::error::{Error, Result};
use crate::router::AggregationMode;
use crate::synth::proxy::{fit_quality_proxy, QualityProxyModel, QualityResidual, QualityTargets, QUALITY_TOLERANCE};
use crate::synth::quality::{fit_frame_offset, fit_quantile, DraftQualityModel, QuantileKnot, TailSlopes};
use crate::table::{ReferenceRow, ReferenceTable, RowKind};

pub const CALIBRATION_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    #[serde(default)]
    pub latency: LatencyFitOptions,
    #[serde(default)]
    pub tails: TailSlopes,
    /// Seed of the synthetic draft-score stream.
    pub rng_seed: u64,
    /// Frames averaged per routed block when fitting the mean-frame offset.
    pub mean_frames: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self::for_config(&default_config())
    }
}

impl FitOptions {
    pub fn for_config(config: &GenerationConfig) -> Self {
        let later = if config.num_blocks > 1 { 1 } else { 0 };
        Self {
            latency: LatencyFitOptions::default(),
            tails: TailSlopes::default(),
            rng_seed: 42,
            mean_frames: config.scored_frame_count(later).unwrap_or(1),
        }
    }
}

/// Arms present in the reference table, kept so sweeps and ablations can
/// rerun them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReferenceArms {
    pub thresholds: Vec<f64>,
    pub avg_frame_thresholds: Vec<f64>,
    pub forced_random_rate: Option<f64>,
    pub random_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub version: u32,
    pub num_blocks: usize,
    pub draft_quality: DraftQualityModel,
    pub latency: LatencyParams,
    pub quality_proxy: QualityProxyModel,
    pub arms: ReferenceArms,
    pub fit_options: FitOptions,
}

impl Calibration {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Format(format!("calibration: {e}")))?;
        if c.version != CALIBRATION_VERSION {
            return Err(Error::Calibration(format!(
                "unsupported calibration version {} (expected {CALIBRATION_VERSION})",
                c.version
            )));
        }
        c.latency.validate()?;
        fit_quantile(
            &c.draft_quality.knots,
            TailSlopes {
                upper: Some(c.draft_quality.upper_tail_slope),
                lower: Some(c.draft_quality.lower_tail_slope),
            },
        )?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Fit of the bundled reference table.
    pub fn bundled() -> Result<Self> {
        Ok(fit_calibration(&ReferenceTable::bundled(), &FitOptions::default())?.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptResidual {
    pub label: String,
    pub reference: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub latency: Vec<RowResidual>,
    pub latency_max_rel_error: f64,
    pub quality: Vec<QualityResidual>,
    pub quality_max_abs_error: f64,
    pub quality_within_tolerance: bool,
    pub mean_frame_accept: Vec<AcceptResidual>,
    pub notes: Vec<String>,
}

impl FitReport {
    pub fn render(&self) -> String {
        let mut s = String::from("latency residuals:\n");
        for r in &self.latency {
            s += &format!(
                "  {:<22} measured {:>7.2} s  predicted {:>7.2} s  {:+.2}%\n",
                r.label,
                r.measured_s,
                r.predicted_s,
                100.0 * r.rel_error
            );
        }
        s += "quality residuals:\n";
        for r in &self.quality {
            s += &format!(
                "  {:<22} reference {:.4}  predicted {:.5}  {:+.5}\n",
                r.label, r.reference, r.predicted, r.error
            );
        }
        if !self.mean_frame_accept.is_empty() {
            s += "mean-frame accept rates:\n";
            for r in &self.mean_frame_accept {
                s += &format!(
                    "  {:<22} reference {:.3}  predicted {:.3}\n",
                    r.label, r.reference, r.predicted
                );
            }
        }
        for n in &self.notes {
            s += &format!("note: {n}\n");
        }
        s
    }
}

fn required(row: &ReferenceRow, field: &str, v: Option<f64>) -> Result<f64> {
    v.ok_or_else(|| Error::InvalidTable(format!("row {:?} has no {field}", row.label)))
}

/// Fit draft-score distribution, latency components and quality proxy.
/// A quality fit outside tolerance is reported, not raised.
pub fn fit_calibration(table: &ReferenceTable, options: &FitOptions) -> Result<(Calibration, FitReport)> {
    table.validate()?;
    table.require_baselines()?;
    if table.num_blocks < 2 {
        return Err(Error::Calibration("calibration needs at least 2 blocks per video".into()));
    }
    let b = table.num_blocks;

    let min_rows = table.threshold_rows(AggregationMode::MinFrame);
    let knots = min_rows
        .iter()
        .filter_map(|(tau, r)| r.accept_rate.map(|accept_rate| QuantileKnot { tau: *tau, accept_rate }))
        .collect::<Vec<_>>();
    if knots.is_empty() {
        return Err(Error::Calibration("no min-frame threshold rows with accept rates".into()));
    }
    let base = fit_quantile(&knots, options.tails)?.with_seed(options.rng_seed);

    let avg_rows: Vec<(f64, f64)> = table
        .threshold_rows(AggregationMode::MeanFrame)
        .iter()
        .filter_map(|(tau, r)| r.accept_rate.map(|a| (*tau, a)))
        .collect();
    let offset = fit_frame_offset(&base, &avg_rows, options.mean_frames);
    let draft = base.with_frame_offset_mean(offset);
    let mean_frame_accept = table
        .threshold_rows(AggregationMode::MeanFrame)
        .iter()
        .filter_map(|(tau, r)| {
            r.accept_rate.map(|reference| AcceptResidual {
                label: r.label.clone(),
                reference,
                predicted: draft.mean_frame_accept_rate(*tau, options.mean_frames),
            })
        })
        .collect();

    let latency = fit_latencies(&table.timing_rows(), b, &options.latency)?;

    let target_only = table.target_only().expect("checked");
    let draft_only = table.draft_only().expect("checked");
    let forced_random = match table.random_row(true) {
        Some(r) => match (r.accept_rate, r.quality) {
            (Some(a), Some(q)) => Some((a, q)),
            _ => None,
        },
        None => None,
    };
    let targets = QualityTargets {
        num_blocks: b,
        target_only: required(target_only, "quality", target_only.quality)?,
        draft_only: required(draft_only, "quality", draft_only.quality)?,
        thresholds: min_rows
            .iter()
            .filter_map(|(tau, r)| r.quality.map(|q| (*tau, q)))
            .collect(),
        forced_random,
    };
    let quality = fit_quality_proxy(&targets, &draft)?;

    let mut notes = vec![
        "per-prompt fixed costs (text encoding, setup) are not modeled separately; the linear fit absorbs them".to_string(),
        format!(
            "c_draft and c_decode are not separately identifiable; split by decode_share = {}",
            options.latency.decode_share
        ),
        "the quality proxy is a curve fit to reference quality values, not an emulation of a video-quality metric".to_string(),
    ];
    if let Some((rate, q)) = forced_random {
        let predicted = quality.model.expected_random_quality(&draft, b, rate, true);
        if (predicted - q).abs() > QUALITY_TOLERANCE {
            notes.push(format!(
                "forced-first-block random row ({q}) is not reachable with a monotone penalty; model predicts {predicted:.4}"
            ));
        }
    }
    let within = quality.within(QUALITY_TOLERANCE);
    if !within {
        log::warn!(
            "quality proxy residual {:.5} exceeds tolerance {QUALITY_TOLERANCE}",
            quality.max_abs_error()
        );
    }

    let arms = ReferenceArms {
        thresholds: min_rows.iter().map(|(t, _)| *t).collect(),
        avg_frame_thresholds: avg_rows.iter().map(|(t, _)| *t).collect(),
        forced_random_rate: table.random_row(true).and_then(|r| r.accept_rate),
        random_rate: table.random_row(false).and_then(|r| r.accept_rate),
    };
    let report = FitReport {
        latency_max_rel_error: latency.max_rel_error(),
        latency: latency.residuals,
        quality_max_abs_error: quality.max_abs_error(),
        quality_within_tolerance: within,
        quality: quality.residuals,
        mean_frame_accept,
        notes,
    };
    let cal = Calibration {
        version: CALIBRATION_VERSION,
        num_blocks: b,
        draft_quality: draft,
        latency: latency.params,
        quality_proxy: quality.model,
        arms,
        fit_options: options.clone(),
    };
    Ok((cal, report))
}

/// The reference table a calibration predicts for its own arms.
pub fn synthetic_table(cal: &Calibration) -> ReferenceTable {
    let b = cal.num_blocks;
    let d = &cal.draft_quality;
    let q = &cal.quality_proxy;
    let lat = &cal.latency;
    let t0 = lat.target_only_time(b);
    let row = |label: String, kind: RowKind, quality: Option<f64>, time_s: f64, accept_rate: Option<f64>| ReferenceRow {
        label,
        kind,
        quality,
        time_s: Some(time_s),
        speedup: Some(t0 / time_s),
        accept_rate,
    };
    let mut rows = vec![row("target-only".into(), RowKind::TargetOnly, Some(q.base_quality), t0, None)];
    for &tau in &cal.arms.thresholds {
        let a = d.accept_rate(tau);
        rows.push(row(
            format!("tau={}", crate::sweep::fmt_tau(tau)),
            RowKind::Threshold {
                tau,
                aggregation: AggregationMode::MinFrame,
            },
            Some(q.expected_threshold_quality(d, b, tau)),
            lat.predict(b, &TimingKind::Routed { accept_rate: a }),
            Some(a),
        ));
    }
    rows.push(row(
        "draft-only".into(),
        RowKind::DraftOnly,
        Some(q.expected_draft_only_quality(d, b)),
        lat.draft_only_time(b),
        None,
    ));
    for &tau in &cal.arms.avg_frame_thresholds {
        let a = d.mean_frame_accept_rate(tau, cal.fit_options.mean_frames);
        rows.push(row(
            format!("avg-frame tau={}", crate::sweep::fmt_tau(tau)),
            RowKind::Threshold {
                tau,
                aggregation: AggregationMode::MeanFrame,
            },
            None,
            lat.predict(b, &TimingKind::Routed { accept_rate: a }),
            Some(a),
        ));
    }
    for (force, rate) in [(true, cal.arms.forced_random_rate), (false, cal.arms.random_rate)] {
        let Some(rate) = rate else { continue };
        rows.push(ReferenceRow {
            label: if force { "force-reject+random".into() } else { "random".into() },
            kind: RowKind::Random {
                force_reject_block0: force,
            },
            quality: Some(q.expected_random_quality(d, b, rate, force)),
            time_s: None,
            speedup: None,
            accept_rate: Some(rate),
        });
    }
    ReferenceTable {
        num_blocks: b,
        num_prompts: 1003,
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn bundled_fit_meets_tolerances() {
        let (cal, report) = fit_calibration(&ReferenceTable::bundled(), &FitOptions::default()).unwrap();
        assert!(report.latency_max_rel_error < 0.05, "{}", report.render());
        assert!(report.quality_within_tolerance, "{}", report.render());
        assert_eq!(cal.quality_proxy.base_quality, 0.0788);
        assert_eq!(cal.arms.thresholds.len(), 7);
        assert_eq!(cal.arms.avg_frame_thresholds, vec![-0.2, -0.5, -0.7]);
        for r in &report.mean_frame_accept {
            assert!((r.predicted - r.reference).abs() < 0.01, "{r:?}");
        }
    }

    #[test]
    fn toml_round_trip() {
        let cal = Calibration::bundled().unwrap();
        let again = Calibration::from_toml(&cal.to_toml().unwrap()).unwrap();
        assert_eq!(again, cal);
    }

    #[test]
    fn refit_of_synthetic_table_is_a_fixed_point() {
        let cal = Calibration::bundled().unwrap();
        let table = synthetic_table(&cal);
        let (again, report) = fit_calibration(&table, &cal.fit_options).unwrap();
        assert!(report.latency_max_rel_error < 1e-9);
        assert!(report.quality_max_abs_error < 1e-12);
        let l = (&cal.latency, &again.latency);
        for (a, b) in [
            (l.0.c_draft, l.1.c_draft),
            (l.0.c_decode, l.1.c_decode),
            (l.0.c_target, l.1.c_target),
            (l.0.c_score, l.1.c_score),
        ] {
            assert!(close(a, b, 1e-9), "{a} vs {b}");
        }
        assert_eq!(again.draft_quality.knots.len(), cal.draft_quality.knots.len());
        for (a, b) in again.draft_quality.knots.iter().zip(&cal.draft_quality.knots) {
            assert!(close(a.accept_rate, b.accept_rate, 1e-12));
        }
        assert!(close(again.draft_quality.frame_offset_mean, cal.draft_quality.frame_offset_mean, 1e-6));
        for (a, b) in again.quality_proxy.penalties.iter().zip(&cal.quality_proxy.penalties) {
            assert!(close(*a, *b, 1e-9), "{a} vs {b}");
        }
        assert!(close(
            again.quality_proxy.first_block_penalty,
            cal.quality_proxy.first_block_penalty,
            1e-9
        ));
    }

    #[test]
    fn missing_baselines_fail() {
        let mut t = ReferenceTable::bundled();
        t.rows.retain(|r| r.kind != RowKind::DraftOnly);
        let e = fit_calibration(&t, &FitOptions::default()).unwrap_err();
        assert!(e.to_string().contains("draft-only"));
    }

    #[test]
    fn rejects_unknown_version() {
        let mut cal = Calibration::bundled().unwrap();
        cal.version = 99;
        assert!(matches!(
            Calibration::from_toml(&cal.to_toml().unwrap()),
            Err(Error::Calibration(_))
        ));
    }
}
