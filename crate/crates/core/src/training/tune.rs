//! Choosing `α` on a development set: lowest efficiency loss subject to a
//! filtering-loss tolerance.
//!
//! Both losses are step functions of `α`. Example `i` starts losing its
//! truth at `α*_i = (s_i − mean_i)/(max_i − mean_i)` and unit `u` is pruned
//! from `β_u = (m_u − mean_i)/(max_i − mean_i)` on, so sweeping the sorted
//! breakpoints finds the exact optimum.

use alloc::vec::Vec;

use super::LatticeExample;
use crate::inference::max_marginals;
use crate::losses::truth_score;
use crate::model::LinearModel;
use crate::threshold::{cutoff, FilterTarget, FilterUnits, LossMeasure};
use crate::{Error, Result};

const TIE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaChoice {
    pub alpha: f64,
    /// Mean filtering loss on the tuning set at `alpha`.
    pub filter_loss: f64,
    /// Mean efficiency loss on the tuning set at `alpha`.
    pub efficiency_loss: f64,
}

struct Stats {
    max: f64,
    mean: f64,
    /// The truth is lost iff this value is at or below `τ`; `None` if it is
    /// already outside the lattice.
    critical: Option<f64>,
    units: Vec<f64>,
}

impl Stats {
    fn degenerate(&self) -> bool {
        self.mean >= self.max
    }

    fn losses(&self, alpha: f64) -> (f64, f64) {
        let cut = cutoff(self.max, self.mean, alpha);
        let lf = match self.critical {
            None => 1.0,
            Some(_) if cut.degenerate => 0.0,
            Some(r) => f64::from(u8::from(r <= cut.tau)),
        };
        let le = if cut.degenerate {
            1.0
        } else {
            self.units.iter().filter(|&&m| m > cut.tau).count() as f64 / self.units.len() as f64
        };
        (lf, le)
    }
}

fn collect_stats(
    model: &LinearModel,
    data: &[LatticeExample],
    target: FilterTarget,
    measure: LossMeasure,
) -> Result<Vec<Stats>> {
    data.iter()
        .map(|ex| {
            let table = max_marginals(model, &ex.input, &ex.lattice)?;
            let units = FilterUnits::new(&table, target);
            let critical = match measure {
                LossMeasure::Bound => truth_score(model, &ex.input, &ex.truth, &ex.lattice)?,
                LossMeasure::Pruned => ex
                    .lattice
                    .path_of(&ex.truth)
                    .map(|path| units.path_min(&table, &path)),
            };
            Ok(Stats {
                max: table.global_max(),
                mean: units.mean(),
                critical,
                units: units.marginals,
            })
        })
        .collect()
}

fn mean_losses(stats: &[Stats], alpha: f64) -> (f64, f64) {
    let (lf, le) = stats.iter().fold((0.0, 0.0), |(f, e), s| {
        let (a, b) = s.losses(alpha);
        (f + a, e + b)
    });
    (lf / stats.len() as f64, le / stats.len() as f64)
}

/// Mean filtering and efficiency loss of `model` at `alpha`.
pub fn evaluate_alpha(
    model: &LinearModel,
    data: &[LatticeExample],
    alpha: f64,
    target: FilterTarget,
    measure: LossMeasure,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    Ok(mean_losses(
        &collect_stats(model, data, target, measure)?,
        alpha,
    ))
}

enum Event {
    LosesTruth,
    Prunes(f64),
}

/// `α ∈ [0, 1)` minimizing mean efficiency loss subject to mean filtering
/// loss `≤ epsilon`; the smallest such `α` on ties and `0` if nothing is
/// feasible. `candidates` are always examined in addition to the breakpoints.
pub fn tune_alpha(
    model: &LinearModel,
    dev: &[LatticeExample],
    candidates: &[f64],
    epsilon: f64,
    target: FilterTarget,
    measure: LossMeasure,
) -> Result<AlphaChoice> {
    if dev.is_empty() {
        return Err(Error::Empty("development set".into()));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Config(alloc::format!(
            "tolerance {epsilon} outside [0, 1]"
        )));
    }
    if let Some(c) = candidates.iter().find(|c| !(0.0..1.0).contains(*c)) {
        return Err(Error::Config(alloc::format!(
            "alpha candidate {c} outside [0, 1)"
        )));
    }
    let stats = collect_stats(model, dev, target, measure)?;
    let n = stats.len() as f64;

    let mut events: Vec<(f64, Event)> = Vec::new();
    let mut lost = 0usize;
    for s in &stats {
        if s.degenerate() {
            continue;
        }
        let span = s.max - s.mean;
        match s.critical {
            None => lost += 1,
            Some(r) => events.push(((r - s.mean) / span, Event::LosesTruth)),
        }
        let w = 1.0 / (n * s.units.len() as f64);
        events.extend(
            s.units
                .iter()
                .map(|&m| ((m - s.mean) / span, Event::Prunes(w))),
        );
    }
    lost += stats
        .iter()
        .filter(|s| s.degenerate() && s.critical.is_none())
        .count();
    events.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut points: Vec<f64> = core::iter::once(0.0)
        .chain(candidates.iter().copied())
        .chain(
            events
                .iter()
                .map(|e| e.0)
                .filter(|p| (0.0..1.0).contains(p)),
        )
        .collect();
    points.sort_by(f64::total_cmp);
    points.dedup();

    // Sweep: state after applying every event at or below each point.
    let mut swept: Vec<(f64, f64, f64)> = Vec::with_capacity(points.len());
    let mut next = 0;
    let mut losing = lost;
    let mut efficiency = 1.0;
    for &p in &points {
        while next < events.len() && events[next].0 <= p {
            match events[next].1 {
                Event::LosesTruth => losing += 1,
                Event::Prunes(w) => efficiency -= w,
            }
            next += 1;
        }
        swept.push((p, losing as f64 / n, efficiency));
    }

    let mut feasible: Vec<usize> = (0..swept.len())
        .filter(|&i| swept[i].1 <= epsilon)
        .collect();
    while !feasible.is_empty() {
        let best_le = feasible
            .iter()
            .map(|&i| swept[i].2)
            .fold(f64::INFINITY, f64::min);
        let pick = *feasible
            .iter()
            .find(|&&i| swept[i].2 <= best_le + TIE)
            .expect("nonempty");
        let start = swept[pick].0;
        let end = swept.get(pick + 1).map_or(1.0, |s| s.0);
        // The breakpoint itself can round either way; just inside the
        // interval the swept losses hold exactly.
        let inside = (start + 1e-9 * (end - start).max(f64::EPSILON)).min(0.5 * (start + end));
        for alpha in [start, inside, 0.5 * (start + end)] {
            let (lf, le) = mean_losses(&stats, alpha);
            if lf <= epsilon && le <= swept[pick].2 + TIE {
                return Ok(AlphaChoice {
                    alpha,
                    filter_loss: lf,
                    efficiency_loss: le,
                });
            }
        }
        feasible.retain(|&i| i != pick);
    }
    let (lf, le) = mean_losses(&stats, 0.0);
    Ok(AlphaChoice {
        alpha: 0.0,
        filter_loss: lf,
        efficiency_loss: le,
    })
}
