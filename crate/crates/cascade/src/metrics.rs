//! Per-level metrics rows written as TSV.

use std::fmt::Write as _;

use structcascade_core::ensemble::GridLevelMetrics;
use structcascade_core::threshold::LossMeasure;
use structcascade_core::training::LevelMetrics;

pub const HEADER: &str =
    "level\talpha\tfilter_loss\tefficiency_loss\tdensity\ttoken_accuracy\tsequence_accuracy\twall_ms";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    /// Level index, or `final` for the final predictor.
    pub level: String,
    /// `None` where no threshold applies.
    pub alpha: Option<f64>,
    pub filter_loss: f64,
    pub efficiency_loss: f64,
    pub density: f64,
    pub token_accuracy: f64,
    pub sequence_accuracy: f64,
    pub wall_ms: u64,
}

impl MetricsRow {
    /// A sequence level; `filter_loss` follows the level's tuning measure.
    pub fn from_level(level: usize, m: &LevelMetrics, measure: LossMeasure) -> Self {
        Self {
            level: level.to_string(),
            alpha: Some(m.alpha),
            filter_loss: match measure {
                LossMeasure::Bound => m.filter_loss,
                LossMeasure::Pruned => m.pruned_loss,
            },
            efficiency_loss: m.efficiency_loss,
            density: m.density,
            token_accuracy: m.token_accuracy,
            sequence_accuracy: m.sequence_accuracy,
            wall_ms: 0,
        }
    }

    /// The final predictor: no threshold, nothing filtered.
    pub fn final_row(m: &LevelMetrics) -> Self {
        Self {
            level: "final".into(),
            alpha: None,
            filter_loss: 0.0,
            efficiency_loss: 1.0,
            density: m.density,
            token_accuracy: m.token_accuracy,
            sequence_accuracy: m.sequence_accuracy,
            wall_ms: 0,
        }
    }

    /// A grid level: node accuracy as token accuracy, whole-grid accuracy as sequence accuracy.
    pub fn from_grid_level(level: usize, m: &GridLevelMetrics) -> Self {
        Self {
            level: level.to_string(),
            alpha: Some(m.alpha),
            filter_loss: m.filter_loss,
            efficiency_loss: m.efficiency_loss,
            density: m.density,
            token_accuracy: m.node_accuracy,
            sequence_accuracy: m.grid_accuracy,
            wall_ms: 0,
        }
    }
}

pub fn to_tsv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for r in rows {
        let alpha = r.alpha.map_or_else(|| "-".to_owned(), |a| a.to_string());
        writeln!(
            out,
            "{}\t{alpha}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.level,
            r.filter_loss,
            r.efficiency_loss,
            r.density,
            r.token_accuracy,
            r.sequence_accuracy,
            r.wall_ms
        )
        .expect("writing to a String");
    }
    out
}
