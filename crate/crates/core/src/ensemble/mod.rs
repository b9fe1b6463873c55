//! Ensembles of tractable comb-shaped trees for loopy grid models.
//!
//! A grid is split into comb trees that together cover every edge. Each tree
//! is solved exactly; the sum of the trees' max-marginals bounds the joint
//! max-marginal from above, and thresholding that sum is safe for any output
//! whose summed tree score clears the summed thresholds.

mod joint;
mod learn;
mod tree;

pub use joint::{
    brute_force_grid_max_marginals, ensemble_max_marginals, joint_filter, joint_loss, EnsembleTable,
};
pub use learn::{
    grid_coarse_to_fine, joint_sc_step, Decomposition, GridCascade, GridCascadeConfig, GridExample,
    GridInput, GridLevel, GridLevelMetrics, LearnedEnsemble,
};
pub use tree::{tree_max_marginals, TreePotentials, TreeTable};

use alloc::vec::Vec;

use crate::lattice::StateHierarchy;
use crate::model::State;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Orientation {
    Horizontal,
    Vertical,
}

/// An `rows × cols` 4-neighbour grid. Node `(r, c)` has id `r * cols + c`;
/// horizontal edges come first in row-major order, then vertical ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(alloc::format!(
                "grid {rows}x{cols} has no nodes"
            )));
        }
        Ok(Self { rows, cols })
    }

    pub fn num_nodes(&self) -> usize {
        self.rows * self.cols
    }

    pub fn node(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn num_edges(&self) -> usize {
        self.rows * (self.cols - 1) + (self.rows - 1) * self.cols
    }

    fn horizontal(&self, row: usize, col: usize) -> usize {
        row * (self.cols - 1) + col
    }

    fn vertical(&self, row: usize, col: usize) -> usize {
        self.rows * (self.cols - 1) + row * self.cols + col
    }

    /// Endpoints `(u, v)` with `u < v`.
    pub fn edge(&self, id: usize) -> (usize, usize) {
        let h = self.rows * (self.cols - 1);
        if id < h {
            let (r, c) = (id / (self.cols - 1), id % (self.cols - 1));
            (self.node(r, c), self.node(r, c + 1))
        } else {
            let id = id - h;
            let (r, c) = (id / self.cols, id % self.cols);
            (self.node(r, c), self.node(r + 1, c))
        }
    }

    pub fn orientation(&self, id: usize) -> Orientation {
        if id < self.rows * (self.cols - 1) {
            Orientation::Horizontal
        } else {
            Orientation::Vertical
        }
    }
}

/// A pairwise grid MRF in log space.
#[derive(Clone, Debug, PartialEq)]
pub struct GridModel {
    pub shape: GridShape,
    pub num_states: usize,
    /// `unary[node * K + k]`.
    pub unary: Vec<f64>,
    /// `pairwise[edge * K * K + k_u * K + k_v]` for edge `(u, v)`, `u < v`.
    pub pairwise: Vec<f64>,
}

impl GridModel {
    pub fn new(
        shape: GridShape,
        num_states: usize,
        unary: Vec<f64>,
        pairwise: Vec<f64>,
    ) -> Result<Self> {
        let k = num_states;
        if k == 0
            || unary.len() != shape.num_nodes() * k
            || pairwise.len() != shape.num_edges() * k * k
        {
            return Err(Error::Shape(
                "potential tables do not match the grid".into(),
            ));
        }
        if let Some(i) = unary.iter().chain(&pairwise).position(|v| !v.is_finite()) {
            return Err(Error::Range(alloc::format!("potential {i} is not finite")));
        }
        Ok(Self {
            shape,
            num_states,
            unary,
            pairwise,
        })
    }

    pub fn zeros(shape: GridShape, num_states: usize) -> Self {
        let k = num_states;
        Self {
            shape,
            num_states,
            unary: alloc::vec![0.0; shape.num_nodes() * k],
            pairwise: alloc::vec![0.0; shape.num_edges() * k * k],
        }
    }

    pub fn unary(&self, node: usize, state: State) -> f64 {
        self.unary[node * self.num_states + state as usize]
    }

    pub fn pairwise(&self, edge: usize, a: State, b: State) -> f64 {
        let k = self.num_states;
        self.pairwise[edge * k * k + a as usize * k + b as usize]
    }

    fn check(&self, y: &[State]) -> Result<()> {
        if y.len() != self.shape.num_nodes() {
            return Err(Error::Shape(alloc::format!(
                "{} labels for {} nodes",
                y.len(),
                self.shape.num_nodes()
            )));
        }
        if let Some(&s) = y.iter().find(|&&s| s as usize >= self.num_states) {
            return Err(Error::Range(alloc::format!(
                "state {s} outside 0..{}",
                self.num_states
            )));
        }
        Ok(())
    }

    /// Full loopy score: every unary and every edge once.
    pub fn score(&self, y: &[State]) -> Result<f64> {
        self.check(y)?;
        let mut total: f64 = (0..y.len()).map(|v| self.unary(v, y[v])).sum();
        for e in 0..self.shape.num_edges() {
            let (u, v) = self.shape.edge(e);
            total += self.pairwise(e, y[u], y[v]);
        }
        Ok(total)
    }
}

/// A spanning tree of the grid with the coverage divisors of its potentials.
#[derive(Clone, Debug, PartialEq)]
pub struct SubModel {
    pub edges: Vec<usize>,
    /// `1 / (number of sub-models containing each unary)`.
    pub unary_weight: f64,
    /// `1 / (number of sub-models containing the edge)`, aligned with `edges`.
    pub edge_weights: Vec<f64>,
}

impl SubModel {
    /// Coverage-weighted score; summing over a decomposition gives the full score.
    pub fn score(&self, grid: &GridModel, y: &[State]) -> Result<f64> {
        grid.check(y)?;
        let mut total: f64 = (0..y.len())
            .map(|v| self.unary_weight * grid.unary(v, y[v]))
            .sum();
        for (&e, &w) in self.edges.iter().zip(&self.edge_weights) {
            let (u, v) = grid.shape.edge(e);
            total += w * grid.pairwise(e, y[u], y[v]);
        }
        Ok(total)
    }

    /// This tree's share of the grid potentials.
    pub fn potentials(&self, grid: &GridModel) -> TreePotentials {
        let k = grid.num_states;
        TreePotentials {
            shape: grid.shape,
            num_states: k,
            edges: self.edges.clone(),
            unary: grid.unary.iter().map(|u| self.unary_weight * u).collect(),
            pairwise: self
                .edges
                .iter()
                .zip(&self.edge_weights)
                .map(|(&e, &w)| {
                    grid.pairwise[e * k * k..(e + 1) * k * k]
                        .iter()
                        .map(|p| w * p)
                        .collect()
                })
                .collect(),
        }
    }
}

/// Comb trees of an `rows × cols` grid: for every column, all row chains plus
/// that column as the spine, then for every row, all column chains plus that
/// row. `rows + cols` trees; a single chain when either side is 1.
pub fn comb_decompose(rows: usize, cols: usize) -> Result<Vec<SubModel>> {
    let shape = GridShape::new(rows, cols)?;
    if rows == 1 || cols == 1 {
        let edges: Vec<usize> = (0..shape.num_edges()).collect();
        let edge_weights = alloc::vec![1.0; edges.len()];
        return Ok(alloc::vec![SubModel {
            edges,
            unary_weight: 1.0,
            edge_weights
        }]);
    }
    let horizontal: Vec<usize> = (0..rows)
        .flat_map(|r| (0..cols - 1).map(move |c| shape.horizontal(r, c)))
        .collect();
    let vertical: Vec<usize> = (0..rows - 1)
        .flat_map(|r| (0..cols).map(move |c| shape.vertical(r, c)))
        .collect();
    let mut trees: Vec<Vec<usize>> = Vec::with_capacity(rows + cols);
    for c in 0..cols {
        let mut edges = horizontal.clone();
        edges.extend((0..rows - 1).map(|r| shape.vertical(r, c)));
        trees.push(edges);
    }
    for r in 0..rows {
        let mut edges = vertical.clone();
        edges.extend((0..cols - 1).map(|c| shape.horizontal(r, c)));
        trees.push(edges);
    }
    let mut coverage = alloc::vec![0u32; shape.num_edges()];
    for tree in &trees {
        for &e in tree {
            coverage[e] += 1;
        }
    }
    let unary_weight = 1.0 / trees.len() as f64;
    Ok(trees
        .into_iter()
        .map(|mut edges| {
            edges.sort_unstable();
            let edge_weights = edges
                .iter()
                .map(|&e| 1.0 / f64::from(coverage[e]))
                .collect();
            SubModel {
                edges,
                unary_weight,
                edge_weights,
            }
        })
        .collect())
}

/// Surviving states of every grid node, each list sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeStates {
    num_states: usize,
    states: Vec<Vec<State>>,
}

impl NodeStates {
    pub fn full(num_nodes: usize, num_states: usize) -> Self {
        Self {
            num_states,
            states: alloc::vec![(0..num_states as State).collect(); num_nodes],
        }
    }

    pub fn from_sets(num_states: usize, mut states: Vec<Vec<State>>) -> Result<Self> {
        for (node, set) in states.iter_mut().enumerate() {
            set.sort_unstable();
            set.dedup();
            if set.is_empty() {
                return Err(Error::Breakdown { node });
            }
            if let Some(&s) = set.iter().find(|&&s| s as usize >= num_states) {
                return Err(Error::Range(alloc::format!(
                    "state {s} outside 0..{num_states}"
                )));
            }
        }
        Ok(Self { num_states, states })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_nodes(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self, node: usize) -> &[State] {
        &self.states[node]
    }

    pub fn index_of(&self, node: usize, state: State) -> Option<usize> {
        self.states[node].binary_search(&state).ok()
    }

    pub fn contains(&self, y: &[State]) -> bool {
        y.len() == self.states.len()
            && y.iter()
                .enumerate()
                .all(|(v, &s)| self.index_of(v, s).is_some())
    }

    /// Total surviving node-states.
    pub fn len(&self) -> usize {
        self.states.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn density(&self) -> f64 {
        self.len() as f64 / (self.states.len() * self.num_states) as f64
    }

    /// Keeps the flagged states; an emptied node is a cascade breakdown.
    pub fn restrict(&self, keep: &[Vec<bool>]) -> Result<Self> {
        let states = self
            .states
            .iter()
            .zip(keep)
            .map(|(set, flags)| {
                set.iter()
                    .zip(flags)
                    .filter(|(_, &k)| k)
                    .map(|(&s, _)| s)
                    .collect()
            })
            .collect();
        Self::from_sets(self.num_states, states)
    }

    /// Replaces every state with its children.
    pub fn refine(&self, hierarchy: &StateHierarchy) -> Result<Self> {
        if hierarchy.coarse_size() != self.num_states {
            return Err(Error::Config(alloc::format!(
                "hierarchy refines {} states but nodes have {}",
                hierarchy.coarse_size(),
                self.num_states
            )));
        }
        let states = self
            .states
            .iter()
            .map(|set| {
                set.iter()
                    .flat_map(|&s| hierarchy.children(s).iter().copied())
                    .collect()
            })
            .collect();
        Self::from_sets(hierarchy.fine_size(), states)
    }
}
