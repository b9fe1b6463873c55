//! Sparse output spaces for one cascade level.
//!
//! A lattice of order `d` over a sequence of length `ℓ` has one anchor per
//! window `j..j+d` (`ℓ - d + 1` anchors). Each anchor holds the sorted codes
//! of its surviving clique assignments; a code is the base-`K` number whose
//! most significant digit is the first state, so code order is lexicographic
//! tuple order. Two assignments at neighbouring anchors are connected when
//! the left one's last `d - 1` states equal the right one's first `d - 1`.
//!
//! Construction trims every assignment that does not lie on a complete
//! left-to-right path, so each surviving assignment extends to at least one
//! full output and all max-marginals are finite.

use alloc::vec::Vec;

use crate::model::{Output, State};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CliqueAssignment {
    /// Anchor: index of the first position covered by the clique.
    pub position: usize,
    pub states: Vec<State>,
}

impl CliqueAssignment {
    pub fn new(position: usize, states: Vec<State>) -> Self {
        Self { position, states }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseLattice {
    length: usize,
    order: usize,
    num_states: usize,
    valid: Vec<Vec<u64>>,
    // preds[j][a]: indices into valid[j - 1]; empty for j == 0.
    preds: Vec<Vec<Vec<u32>>>,
    // succs[j][a]: indices into valid[j + 1]; empty at the last anchor.
    succs: Vec<Vec<Vec<u32>>>,
}

fn space_size(num_states: usize, order: usize) -> Result<u64> {
    (num_states as u64)
        .checked_pow(order as u32)
        .ok_or_else(|| Error::Config(alloc::format!("K^d overflows: K={num_states}, d={order}")))
}

impl SparseLattice {
    /// Every `K^d` assignment at every anchor.
    pub fn full(length: usize, num_states: usize, order: usize) -> Result<Self> {
        Self::check_shape(length, num_states, order)?;
        let size = space_size(num_states, order)?;
        let valid = (0..length - order + 1)
            .map(|_| (0..size).collect())
            .collect();
        Self::from_codes(length, order, num_states, valid)
    }

    fn check_shape(length: usize, num_states: usize, order: usize) -> Result<()> {
        if order == 0 || num_states == 0 {
            return Err(Error::Shape(alloc::format!(
                "order {order} and K {num_states} must be positive"
            )));
        }
        if order > length {
            return Err(Error::Shape(alloc::format!(
                "order {order} exceeds sequence length {length}"
            )));
        }
        Ok(())
    }

    /// Builds a lattice from per-anchor assignment codes. Codes are sorted and
    /// deduplicated; assignments off every complete path are dropped.
    pub fn from_codes(
        length: usize,
        order: usize,
        num_states: usize,
        mut valid: Vec<Vec<u64>>,
    ) -> Result<Self> {
        Self::check_shape(length, num_states, order)?;
        let size = space_size(num_states, order)?;
        let anchors = length - order + 1;
        if valid.len() != anchors {
            return Err(Error::Shape(alloc::format!(
                "{} anchor sets given, {anchors} expected",
                valid.len()
            )));
        }
        for (j, codes) in valid.iter_mut().enumerate() {
            codes.sort_unstable();
            codes.dedup();
            if codes.last().is_some_and(|&c| c >= size) {
                return Err(Error::Range(alloc::format!(
                    "assignment code out of range at anchor {j}"
                )));
            }
            if codes.is_empty() {
                return Err(Error::BrokenLattice { position: j });
            }
        }
        let lattice = Self::link(length, order, num_states, valid);
        lattice.trimmed()
    }

    /// Builds a lattice from explicit state tuples per anchor.
    pub fn from_assignments(
        length: usize,
        order: usize,
        num_states: usize,
        valid: &[Vec<Vec<State>>],
    ) -> Result<Self> {
        Self::check_shape(length, num_states, order)?;
        let mut codes = Vec::with_capacity(valid.len());
        for tuples in valid {
            let mut at = Vec::with_capacity(tuples.len());
            for t in tuples {
                if t.len() != order || t.iter().any(|&s| s as usize >= num_states) {
                    return Err(Error::Shape(alloc::format!(
                        "assignment {t:?} does not fit order {order}, K {num_states}"
                    )));
                }
                at.push(encode(t, num_states));
            }
            codes.push(at);
        }
        Self::from_codes(length, order, num_states, codes)
    }

    fn link(length: usize, order: usize, num_states: usize, valid: Vec<Vec<u64>>) -> Self {
        let anchors = valid.len();
        let k = num_states as u64;
        let suffix_mod = k.pow(order as u32 - 1);
        let mut preds: Vec<Vec<Vec<u32>>> = valid
            .iter()
            .map(|v| alloc::vec![Vec::new(); v.len()])
            .collect();
        let mut succs: Vec<Vec<Vec<u32>>> = valid
            .iter()
            .map(|v| alloc::vec![Vec::new(); v.len()])
            .collect();
        for j in 0..anchors.saturating_sub(1) {
            let right = &valid[j + 1];
            for (a, &code) in valid[j].iter().enumerate() {
                let lo = (code % suffix_mod) * k;
                let start = right.partition_point(|&b| b < lo);
                let end = right.partition_point(|&b| b < lo + k);
                for b in start..end {
                    succs[j][a].push(b as u32);
                    preds[j + 1][b].push(a as u32);
                }
            }
        }
        Self {
            length,
            order,
            num_states,
            valid,
            preds,
            succs,
        }
    }

    fn trimmed(self) -> Result<Self> {
        let anchors = self.valid.len();
        let mut forward: Vec<Vec<bool>> = self
            .valid
            .iter()
            .map(|v| alloc::vec![false; v.len()])
            .collect();
        forward[0].iter_mut().for_each(|f| *f = true);
        for j in 1..anchors {
            for a in 0..self.valid[j].len() {
                forward[j][a] = self.preds[j][a].iter().any(|&p| forward[j - 1][p as usize]);
            }
        }
        let mut backward: Vec<Vec<bool>> = self
            .valid
            .iter()
            .map(|v| alloc::vec![false; v.len()])
            .collect();
        backward[anchors - 1].iter_mut().for_each(|b| *b = true);
        for j in (0..anchors - 1).rev() {
            for a in 0..self.valid[j].len() {
                backward[j][a] = self.succs[j][a]
                    .iter()
                    .any(|&s| backward[j + 1][s as usize]);
            }
        }
        let mut changed = false;
        let mut kept = Vec::with_capacity(anchors);
        for j in 0..anchors {
            let codes: Vec<u64> = self.valid[j]
                .iter()
                .enumerate()
                .filter(|&(a, _)| forward[j][a] && backward[j][a])
                .map(|(_, &c)| c)
                .collect();
            if codes.is_empty() {
                return Err(Error::BrokenLattice { position: j });
            }
            changed |= codes.len() != self.valid[j].len();
            kept.push(codes);
        }
        if !changed {
            return Ok(self);
        }
        // Every kept assignment lies on a full path, so one pass suffices.
        Ok(Self::link(self.length, self.order, self.num_states, kept))
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_anchors(&self) -> usize {
        self.valid.len()
    }

    /// Sorted assignment codes at an anchor.
    pub fn codes(&self, anchor: usize) -> &[u64] {
        &self.valid[anchor]
    }

    pub fn preds(&self, anchor: usize, index: usize) -> &[u32] {
        &self.preds[anchor][index]
    }

    pub fn succs(&self, anchor: usize, index: usize) -> &[u32] {
        &self.succs[anchor][index]
    }

    /// Number of surviving assignments summed over anchors (`|𝒱|`).
    pub fn num_assignments(&self) -> usize {
        self.valid.iter().map(Vec::len).sum()
    }

    /// Number of materialized transitions between anchor `j` and `j + 1`.
    pub fn num_transitions(&self, anchor: usize) -> usize {
        self.succs[anchor].iter().map(Vec::len).sum()
    }

    pub fn decode(&self, code: u64) -> Vec<State> {
        decode(code, self.order, self.num_states)
    }

    pub fn encode(&self, states: &[State]) -> u64 {
        encode(states, self.num_states)
    }

    pub fn assignment(&self, anchor: usize, index: usize) -> CliqueAssignment {
        CliqueAssignment::new(anchor, self.decode(self.valid[anchor][index]))
    }

    pub fn assignments(&self, anchor: usize) -> impl Iterator<Item = CliqueAssignment> + '_ {
        (0..self.valid[anchor].len()).map(move |a| self.assignment(anchor, a))
    }

    /// Index of `states` at `anchor`, if it survives.
    pub fn index_of(&self, anchor: usize, states: &[State]) -> Option<usize> {
        if states.len() != self.order || states.iter().any(|&s| s as usize >= self.num_states) {
            return None;
        }
        self.valid[anchor].binary_search(&self.encode(states)).ok()
    }

    /// Indices of the output's cliques at every anchor, or `None` if any was pruned.
    pub fn path_of(&self, output: &Output) -> Option<Vec<usize>> {
        if output.len() != self.length {
            return None;
        }
        (0..self.num_anchors())
            .map(|j| self.index_of(j, &output.labels[j..j + self.order]))
            .collect()
    }

    pub fn contains_output(&self, output: &Output) -> bool {
        self.path_of(output).is_some()
    }

    /// Keeps the assignments flagged in `keep` (one flag per assignment per anchor).
    pub fn restrict(&self, keep: &[Vec<bool>]) -> Result<Self> {
        let valid = self
            .valid
            .iter()
            .zip(keep)
            .map(|(codes, flags)| {
                codes
                    .iter()
                    .zip(flags)
                    .filter(|(_, &k)| k)
                    .map(|(&c, _)| c)
                    .collect()
            })
            .collect();
        Self::from_codes(self.length, self.order, self.num_states, valid)
    }

    /// Lifts an order-`d` lattice to order `d + 1`: a `(d+1)`-gram survives iff
    /// both of its `d`-gram sub-cliques survived, i.e. iff it is a transition.
    pub fn expand(&self) -> Result<Self> {
        if self.order + 1 > self.length {
            return Err(Error::Shape(alloc::format!(
                "cannot expand order {} on a sequence of length {}",
                self.order,
                self.length
            )));
        }
        let k = self.num_states as u64;
        space_size(self.num_states, self.order + 1)?;
        let valid = (0..self.num_anchors() - 1)
            .map(|j| {
                let right = &self.valid[j + 1];
                let mut codes = Vec::with_capacity(self.num_transitions(j));
                for (a, &left) in self.valid[j].iter().enumerate() {
                    codes.extend(
                        self.succs[j][a]
                            .iter()
                            .map(|&b| left * k + right[b as usize] % k),
                    );
                }
                codes
            })
            .collect();
        Self::from_codes(self.length, self.order + 1, self.num_states, valid)
    }

    /// Replaces every state with its children in `hierarchy`.
    pub fn refine(&self, hierarchy: &StateHierarchy) -> Result<Self> {
        if hierarchy.coarse_size() != self.num_states {
            return Err(Error::Config(alloc::format!(
                "hierarchy refines {} states but the lattice has {}",
                hierarchy.coarse_size(),
                self.num_states
            )));
        }
        let fine = hierarchy.fine_size();
        let valid = self
            .valid
            .iter()
            .map(|codes| {
                let mut out = Vec::new();
                for &code in codes {
                    let coarse = self.decode(code);
                    let mut partial: Vec<u64> = alloc::vec![0];
                    for &s in &coarse {
                        let children = hierarchy.children(s);
                        partial = partial
                            .iter()
                            .flat_map(|&p| {
                                children
                                    .iter()
                                    .map(move |&c| p * fine as u64 + u64::from(c))
                            })
                            .collect();
                    }
                    out.extend(partial);
                }
                out
            })
            .collect();
        Self::from_codes(self.length, self.order, fine, valid)
    }

    /// Surviving assignments over the size of the full lattice of the same shape.
    pub fn density(&self) -> f64 {
        let full = self.num_anchors() as f64 * libm::pow(self.num_states as f64, self.order as f64);
        self.num_assignments() as f64 / full
    }
}

pub fn encode(states: &[State], num_states: usize) -> u64 {
    states
        .iter()
        .fold(0u64, |acc, &s| acc * num_states as u64 + u64::from(s))
}

pub fn decode(mut code: u64, order: usize, num_states: usize) -> Vec<State> {
    let k = num_states as u64;
    let mut states = alloc::vec![0; order];
    for slot in states.iter_mut().rev() {
        *slot = (code % k) as State;
        code /= k;
    }
    states
}

/// Coarse-to-fine state refinement map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateHierarchy {
    children: Vec<Vec<State>>,
    parent: Vec<State>,
}

impl StateHierarchy {
    /// `children[s]` lists the fine states of coarse state `s`. Children sets
    /// must be nonempty, disjoint and cover `0..fine_size`.
    pub fn new(children: Vec<Vec<State>>) -> Result<Self> {
        let fine: usize = children.iter().map(Vec::len).sum();
        let mut parent = alloc::vec![State::MAX; fine];
        for (s, kids) in children.iter().enumerate() {
            if kids.is_empty() {
                return Err(Error::Config(alloc::format!("state {s} has no children")));
            }
            for &c in kids {
                let slot = parent
                    .get_mut(c as usize)
                    .ok_or_else(|| Error::Config(alloc::format!("child {c} outside 0..{fine}")))?;
                if *slot != State::MAX {
                    return Err(Error::Config(alloc::format!("child {c} listed twice")));
                }
                *slot = s as State;
            }
        }
        Ok(Self { children, parent })
    }

    pub fn identity(num_states: usize) -> Self {
        Self::new((0..num_states as State).map(|s| alloc::vec![s]).collect())
            .expect("identity hierarchy")
    }

    /// State `s` splits into `2s` and `2s + 1`.
    pub fn binary_split(num_states: usize) -> Self {
        Self::new(
            (0..num_states as State)
                .map(|s| alloc::vec![2 * s, 2 * s + 1])
                .collect(),
        )
        .expect("binary split hierarchy")
    }

    pub fn coarse_size(&self) -> usize {
        self.children.len()
    }

    pub fn fine_size(&self) -> usize {
        self.parent.len()
    }

    pub fn children(&self, state: State) -> &[State] {
        &self.children[state as usize]
    }

    pub fn parent(&self, fine: State) -> State {
        self.parent[fine as usize]
    }
}
