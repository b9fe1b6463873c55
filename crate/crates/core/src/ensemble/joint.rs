//! Summed max-marginals, joint thresholds and the joint filtering loss.

use alloc::vec::Vec;

use super::tree::{tree_max_marginals, TreePotentials, TreeTable};
use super::{GridModel, NodeStates};
use crate::model::State;
use crate::threshold::{cutoff, mean_max, Cutoff};
use crate::{Error, Result};

/// Max-marginals of every sub-model on shared node states, and their sum.
#[derive(Clone, Debug)]
pub struct EnsembleTable {
    tables: Vec<TreeTable>,
    summed: Vec<Vec<f64>>,
}

impl EnsembleTable {
    pub fn num_models(&self) -> usize {
        self.tables.len()
    }

    pub fn table(&self, p: usize) -> &TreeTable {
        &self.tables[p]
    }

    pub fn states(&self) -> &NodeStates {
        self.tables[0].states()
    }

    /// `Σ_p m_p` of `node`, aligned with `states().states(node)`.
    pub fn summed(&self, node: usize) -> &[f64] {
        &self.summed[node]
    }

    /// `τ_p(α)` of sub-model `p`.
    pub fn sub_threshold(&self, p: usize, alpha: f64) -> f64 {
        mean_max(self.tables[p].global_max(), self.tables[p].mean(), alpha)
    }

    /// `Σ_p τ_p(α)`.
    pub fn joint_threshold(&self, alpha: f64) -> f64 {
        (0..self.tables.len())
            .map(|p| self.sub_threshold(p, alpha))
            .sum()
    }

    pub fn max_sum(&self) -> f64 {
        self.tables.iter().map(TreeTable::global_max).sum()
    }

    pub fn mean_sum(&self) -> f64 {
        self.tables.iter().map(TreeTable::mean).sum()
    }

    /// The joint threshold with degenerate and rounding cases resolved.
    pub fn cutoff(&self, alpha: f64) -> Cutoff {
        let (max, mean) = (self.max_sum(), self.mean_sum());
        let mut cut = cutoff(max, mean, alpha);
        if !cut.degenerate {
            let tau = self.joint_threshold(alpha);
            cut.tau = if tau >= max { max.next_down() } else { tau };
        }
        cut
    }

    /// Smallest summed max-marginal over the node-states of `y`, or `None`
    /// when `y` has a node-state that no longer survives.
    pub fn min_on(&self, y: &[State]) -> Option<f64> {
        let states = self.states();
        if !states.contains(y) {
            return None;
        }
        Some(
            y.iter()
                .enumerate()
                .map(|(v, &s)| self.summed[v][states.index_of(v, s).expect("checked")])
                .fold(f64::INFINITY, f64::min),
        )
    }

    /// Per-node argmax of the summed max-marginals.
    pub fn decode(&self) -> Vec<State> {
        let states = self.states();
        self.summed
            .iter()
            .enumerate()
            .map(|(v, row)| {
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, &m)| if m > row[b] { i } else { b });
                states.states(v)[best]
            })
            .collect()
    }
}

/// Runs each sub-model independently on `states` and sums the tables in
/// sub-model order.
pub fn ensemble_max_marginals(
    models: &[TreePotentials],
    states: &NodeStates,
) -> Result<EnsembleTable> {
    if models.is_empty() {
        return Err(Error::Empty("sub-model list".into()));
    }
    let shape = models[0].shape;
    if models
        .iter()
        .any(|m| m.shape != shape || m.num_states != models[0].num_states)
    {
        return Err(Error::Shape(
            "sub-models disagree on grid shape or alphabet".into(),
        ));
    }
    let tables = models
        .iter()
        .map(|m| tree_max_marginals(m, states))
        .collect::<Result<Vec<_>>>()?;
    let summed = (0..states.num_nodes())
        .map(|v| {
            (0..states.states(v).len())
                .map(|i| tables.iter().map(|t| t.values(v)[i]).sum())
                .collect()
        })
        .collect();
    Ok(EnsembleTable { tables, summed })
}

/// Keeps the node-states whose summed max-marginal is strictly above
/// `Σ_p τ_p(α)`. A node left with no state is a cascade breakdown.
pub fn joint_filter(table: &EnsembleTable, alpha: f64) -> Result<NodeStates> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(alloc::format!(
            "alpha {alpha} outside [0, 1)"
        )));
    }
    let cut = table.cutoff(alpha);
    let keep: Vec<Vec<bool>> = table
        .summed
        .iter()
        .map(|row| row.iter().map(|&m| cut.keeps(m)).collect())
        .collect();
    table.states().restrict(&keep)
}

/// `1[Σ_p score_p(truth) ≤ Σ_p τ_p(α)]`.
pub fn joint_loss(
    models: &[TreePotentials],
    table: &EnsembleTable,
    truth: &[State],
    alpha: f64,
) -> Result<f64> {
    if models.len() != table.num_models() {
        return Err(Error::Shape(
            "table was built from a different ensemble".into(),
        ));
    }
    let score = models.iter().map(|m| m.score(truth)).sum::<Result<f64>>()?;
    let cut = table.cutoff(alpha);
    Ok(if cut.degenerate || score > cut.tau {
        0.0
    } else {
        1.0
    })
}

/// Exact joint max-marginals of a loopy grid by enumeration.
pub fn brute_force_grid_max_marginals(
    grid: &GridModel,
    states: &NodeStates,
) -> Result<Vec<Vec<f64>>> {
    let n = states.num_nodes();
    let total = (0..n).try_fold(1u128, |acc, v| {
        acc.checked_mul(states.states(v).len() as u128)
    });
    match total {
        Some(t) if t <= 1 << 22 => {}
        other => return Err(Error::TooLarge(other.unwrap_or(u128::MAX))),
    }
    let mut best: Vec<Vec<f64>> = (0..n)
        .map(|v| alloc::vec![f64::NEG_INFINITY; states.states(v).len()])
        .collect();
    let mut idx = alloc::vec![0usize; n];
    let mut y: Vec<State> = (0..n).map(|v| states.states(v)[0]).collect();
    loop {
        let s = grid.score(&y)?;
        for v in 0..n {
            if s > best[v][idx[v]] {
                best[v][idx[v]] = s;
            }
        }
        let mut v = 0;
        while v < n {
            idx[v] += 1;
            if idx[v] < states.states(v).len() {
                y[v] = states.states(v)[idx[v]];
                break;
            }
            idx[v] = 0;
            y[v] = states.states(v)[0];
            v += 1;
        }
        if v == n {
            return Ok(best);
        }
    }
}

impl GridModel {
    /// Coverage-weighted potentials of every comb of this grid.
    pub fn comb_potentials(&self) -> Result<Vec<TreePotentials>> {
        Ok(super::comb_decompose(self.shape.rows, self.shape.cols)?
            .iter()
            .map(|s| s.potentials(self))
            .collect())
    }
}
