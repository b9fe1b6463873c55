//! Max-mean-max thresholds and max-marginal filtering.

use alloc::vec::Vec;

use crate::inference::{LogMarginalTable, MaxMarginalTable};
use crate::lattice::SparseLattice;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdParams {
    alpha: f64,
}

impl ThresholdParams {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Config(alloc::format!(
                "alpha {alpha} outside [0, 1)"
            )));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Which clique assignments a level scores against the threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum FilterTarget {
    /// The level's own `d`-gram cliques.
    #[default]
    Clique,
    /// The `(d-1)`-gram sub-cliques; a `d`-gram survives iff both of its
    /// sub-cliques do. Falls back to `Clique` for `d == 1`.
    SubClique,
}

/// What counts as losing the truth when a filtering loss is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum LossMeasure {
    /// `1[score(y) ≤ τ]`, the sufficient condition bounded by the hinge.
    #[default]
    Bound,
    /// Some filtering unit of the truth is at or below `τ`.
    Pruned,
}

/// The threshold actually applied to one example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cutoff {
    pub tau: f64,
    /// Every max-marginal equals the max; everything is kept.
    pub degenerate: bool,
}

impl Cutoff {
    pub fn keeps(&self, max_marginal: f64) -> bool {
        self.degenerate || max_marginal > self.tau
    }
}

/// `α·max + (1-α)·mean`.
pub fn mean_max(max: f64, mean: f64, alpha: f64) -> f64 {
    alpha * max + (1.0 - alpha) * mean
}

/// Threshold with the degenerate and rounding cases resolved.
///
/// When `mean == max` nothing can be separated and everything is kept. When
/// rounding lifts `τ` to `max` for a non-degenerate table, `τ` is lowered to
/// the float just below `max` so the maximizing assignments survive.
pub fn cutoff(max: f64, mean: f64, alpha: f64) -> Cutoff {
    if mean >= max {
        log::debug!("all max-marginals equal ({max}); keeping every assignment");
        return Cutoff {
            tau: max,
            degenerate: true,
        };
    }
    let tau = mean_max(max, mean, alpha);
    Cutoff {
        tau: if tau >= max { max.next_down() } else { tau },
        degenerate: false,
    }
}

/// The max-mean-max threshold over every surviving assignment of the table.
pub fn mean_max_threshold(table: &MaxMarginalTable, params: ThresholdParams) -> Result<f64> {
    if table.is_empty() {
        return Err(Error::Empty("max-marginal table".into()));
    }
    Ok(mean_max(table.global_max(), table.mean(), params.alpha()))
}

/// Keeps exactly the assignments whose max-marginal is strictly above `tau`.
pub fn filter(
    lattice: &SparseLattice,
    table: &MaxMarginalTable,
    tau: f64,
) -> Result<SparseLattice> {
    check_table(lattice, table)?;
    if tau >= table.global_max() {
        return Err(Error::PrunesEverything {
            tau,
            max: table.global_max(),
        });
    }
    let keep: Vec<Vec<bool>> = (0..table.num_anchors())
        .map(|j| table.values(j).iter().map(|&m| m > tau).collect())
        .collect();
    lattice.restrict(&keep)
}

fn check_table(lattice: &SparseLattice, table: &MaxMarginalTable) -> Result<()> {
    let same = lattice.num_anchors() == table.num_anchors()
        && (0..lattice.num_anchors()).all(|j| lattice.codes(j) == table.codes(j));
    if !same {
        return Err(Error::Shape(
            "max-marginal table was not computed on this lattice".into(),
        ));
    }
    Ok(())
}

/// Filtering units of a table: the quantities compared against `τ`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterUnits {
    /// Max-marginal of each unit.
    pub marginals: Vec<f64>,
    /// Flat table node whose witness realizes each unit's max-marginal.
    pub witness_node: Vec<usize>,
    /// For sub-clique units: the (prefix, suffix) unit of every table node.
    sub_of_node: Option<Vec<(usize, usize)>>,
}

impl FilterUnits {
    pub fn new(table: &MaxMarginalTable, target: FilterTarget) -> Self {
        if target == FilterTarget::Clique || table.order() < 2 {
            return Self {
                marginals: table.all_values().to_vec(),
                witness_node: (0..table.len()).collect(),
                sub_of_node: None,
            };
        }
        let k = table.num_states() as u64;
        let suffix_mod = k.pow(table.order() as u32 - 1);
        let anchors = table.num_anchors();
        // Sub-anchor i collects prefixes of d-grams at i and suffixes of d-grams at i - 1.
        let mut per_anchor: Vec<Vec<(u64, f64, usize)>> = alloc::vec![Vec::new(); anchors + 1];
        let mut node = 0usize;
        for j in 0..anchors {
            for (a, &code) in table.codes(j).iter().enumerate() {
                let m = table.max_marginal(j, a);
                per_anchor[j].push((code / k, m, node));
                per_anchor[j + 1].push((code % suffix_mod, m, node));
                node += 1;
            }
        }
        let mut marginals = Vec::new();
        let mut witness_node = Vec::new();
        let mut unit_ids: Vec<Vec<(u64, usize)>> = Vec::with_capacity(anchors + 1);
        for mut entries in per_anchor {
            // Stable sort keeps table order within equal codes, so the first
            // strictly larger marginal wins ties deterministically.
            entries.sort_by_key(|&(c, _, _)| c);
            let mut ids = Vec::new();
            for (code, m, n) in entries {
                match ids.last() {
                    Some(&(c, u)) if c == code => {
                        if m > marginals[u] {
                            marginals[u] = m;
                            witness_node[u] = n;
                        }
                    }
                    _ => {
                        ids.push((code, marginals.len()));
                        marginals.push(m);
                        witness_node.push(n);
                    }
                }
            }
            unit_ids.push(ids);
        }
        let lookup = |i: usize, code: u64| {
            let ids = &unit_ids[i];
            ids[ids
                .binary_search_by_key(&code, |&(c, _)| c)
                .expect("sub-clique present")]
            .1
        };
        let mut sub_of_node = Vec::with_capacity(table.len());
        for j in 0..anchors {
            for &code in table.codes(j) {
                sub_of_node.push((lookup(j, code / k), lookup(j + 1, code % suffix_mod)));
            }
        }
        Self {
            marginals,
            witness_node,
            sub_of_node: Some(sub_of_node),
        }
    }

    pub fn len(&self) -> usize {
        self.marginals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marginals.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.marginals.iter().sum::<f64>() / self.marginals.len() as f64
    }

    /// Fraction of units kept by `cut`.
    pub fn survival_rate(&self, cut: Cutoff) -> f64 {
        self.marginals.iter().filter(|&&m| cut.keeps(m)).count() as f64
            / self.marginals.len() as f64
    }

    /// Smallest unit max-marginal touched by a full path (one assignment
    /// index per anchor); the path survives `cut` iff this value is kept.
    pub fn path_min(&self, table: &MaxMarginalTable, path: &[usize]) -> f64 {
        let mut lowest = f64::INFINITY;
        for (j, &a) in path.iter().enumerate() {
            let node = table.node_of(j, a);
            match &self.sub_of_node {
                None => lowest = lowest.min(self.marginals[node]),
                Some(subs) => {
                    let (p, s) = subs[node];
                    lowest = lowest.min(self.marginals[p]).min(self.marginals[s]);
                }
            }
        }
        lowest
    }

    /// Per-table-node keep flags under `cut`.
    pub fn keep_flags(&self, table: &MaxMarginalTable, cut: Cutoff) -> Vec<Vec<bool>> {
        let mut node = 0usize;
        (0..table.num_anchors())
            .map(|j| {
                table
                    .codes(j)
                    .iter()
                    .map(|_| {
                        let keep = match &self.sub_of_node {
                            None => cut.keeps(self.marginals[node]),
                            Some(subs) => {
                                let (p, s) = subs[node];
                                cut.keeps(self.marginals[p]) && cut.keeps(self.marginals[s])
                            }
                        };
                        node += 1;
                        keep
                    })
                    .collect()
            })
            .collect()
    }
}

/// Threshold and filter in one step, with the degenerate case handled.
pub fn filter_mean_max(
    lattice: &SparseLattice,
    table: &MaxMarginalTable,
    params: ThresholdParams,
    target: FilterTarget,
) -> Result<(SparseLattice, Cutoff)> {
    check_table(lattice, table)?;
    let units = FilterUnits::new(table, target);
    let cut = cutoff(table.global_max(), units.mean(), params.alpha());
    let keep = units.keep_flags(table, cut);
    Ok((lattice.restrict(&keep)?, cut))
}

/// CRF baseline: keep assignments whose posterior exceeds `alpha`.
///
/// There is no safe-lattice guarantee here; an emptied position surfaces as
/// [`Error::BrokenLattice`].
pub fn crf_filter(
    lattice: &SparseLattice,
    posteriors: &LogMarginalTable,
    alpha: f64,
) -> Result<SparseLattice> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(alloc::format!(
            "alpha {alpha} outside [0, 1)"
        )));
    }
    let same = lattice.num_anchors() == posteriors.num_anchors()
        && (0..lattice.num_anchors()).all(|j| lattice.codes(j) == posteriors.codes(j));
    if !same {
        return Err(Error::Shape(
            "posterior table was not computed on this lattice".into(),
        ));
    }
    let keep: Vec<Vec<bool>> = (0..lattice.num_anchors())
        .map(|j| {
            posteriors
                .posteriors(j)
                .iter()
                .map(|&p| p > alpha)
                .collect()
        })
        .collect();
    lattice.restrict(&keep)
}
