//! Reference measurement tables used as calibration input.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::costmodel::{TimingKind, TimingRow};
use crate::error::{Error, Result};
use crate::router::AggregationMode;

/// Bundled reference measurements (TOML).
pub const BUNDLED_TABLE: &str = include_str!("../data/reference_table.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RowKind {
    TargetOnly,
    DraftOnly,
    /// Threshold routing with block 0 forced.
    Threshold {
        tau: f64,
        #[serde(default)]
        aggregation: AggregationMode,
    },
    Random {
        #[serde(default)]
        force_reject_block0: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub label: String,
    #[serde(flatten)]
    pub kind: RowKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speedup: Option<f64>,
    /// Excludes block 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accept_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTable {
    pub num_blocks: usize,
    #[serde(default = "default_prompts")]
    pub num_prompts: usize,
    pub rows: Vec<ReferenceRow>,
}

fn default_prompts() -> usize {
    1003
}

impl ReferenceTable {
    pub fn bundled() -> Self {
        Self::from_toml(BUNDLED_TABLE).expect("bundled table is valid")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let t: Self = toml::from_str(s).map_err(|e| Error::Format(format!("reference table: {e}")))?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Structural checks. Baseline presence is checked separately by
    /// [`ReferenceTable::require_baselines`] since partial tables are useful
    /// for inspection.
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::InvalidTable("num_blocks must be positive".into()));
        }
        if self.rows.is_empty() {
            return Err(Error::InvalidTable("no rows".into()));
        }
        let mut seen = HashSet::new();
        for r in &self.rows {
            if !seen.insert(r.label.as_str()) {
                return Err(Error::InvalidTable(format!("duplicate label {:?}", r.label)));
            }
            let bad = |what: &str, v: f64| Error::InvalidTable(format!("row {:?}: bad {what} {v}", r.label));
            if let RowKind::Threshold { tau, .. } = r.kind {
                if tau.is_nan() {
                    return Err(bad("tau", tau));
                }
            }
            for (what, v) in [("quality", r.quality), ("speedup", r.speedup)] {
                if let Some(v) = v.filter(|v| !v.is_finite()) {
                    return Err(bad(what, v));
                }
            }
            if let Some(t) = r.time_s.filter(|t| !(t.is_finite() && *t > 0.0)) {
                return Err(bad("time_s", t));
            }
            if let Some(a) = r.accept_rate.filter(|a| !(0.0..=1.0).contains(a)) {
                return Err(bad("accept_rate", a));
            }
        }
        Ok(())
    }

    /// Error naming every missing baseline row.
    pub fn require_baselines(&self) -> Result<()> {
        let mut missing = Vec::new();
        if self.target_only().is_none() {
            missing.push("target-only");
        }
        if self.draft_only().is_none() {
            missing.push("draft-only");
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidTable(format!("missing baseline rows: {}", missing.join(", "))))
        }
    }

    pub fn target_only(&self) -> Option<&ReferenceRow> {
        self.rows.iter().find(|r| r.kind == RowKind::TargetOnly)
    }

    pub fn draft_only(&self) -> Option<&ReferenceRow> {
        self.rows.iter().find(|r| r.kind == RowKind::DraftOnly)
    }

    /// Threshold rows with the given aggregation, sorted by tau descending.
    pub fn threshold_rows(&self, aggregation: AggregationMode) -> Vec<(f64, &ReferenceRow)> {
        let mut v: Vec<_> = self
            .rows
            .iter()
            .filter_map(|r| match r.kind {
                RowKind::Threshold { tau, aggregation: a } if a == aggregation => Some((tau, r)),
                _ => None,
            })
            .collect();
        v.sort_by(|a, b| b.0.total_cmp(&a.0));
        v
    }

    pub fn random_row(&self, force_reject_block0: bool) -> Option<&ReferenceRow> {
        self.rows.iter().find(|r| {
            r.kind
                == RowKind::Random {
                    force_reject_block0,
                }
        })
    }

    /// Baselines plus min-frame threshold rows that carry a time.
    pub fn timing_rows(&self) -> Vec<TimingRow> {
        let mut out = Vec::new();
        for r in &self.rows {
            let Some(time_s) = r.time_s else { continue };
            let kind = match (&r.kind, r.accept_rate) {
                (RowKind::TargetOnly, _) => TimingKind::TargetOnly,
                (RowKind::DraftOnly, _) => TimingKind::DraftOnly,
                (
                    RowKind::Threshold {
                        aggregation: AggregationMode::MinFrame,
                        ..
                    },
                    Some(accept_rate),
                ) => TimingKind::Routed { accept_rate },
                _ => continue,
            };
            out.push(TimingRow {
                label: r.label.clone(),
                kind,
                time_s,
            });
        }
        out
    }
}
