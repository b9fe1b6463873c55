//! Max-sum and sum-product forward-backward over a [`SparseLattice`].
//!
//! Ties are broken toward the smallest assignment code at every max, so
//! witnesses are reproducible. A max-marginal is reported as the
//! left-to-right sum of clique scores along its witness, which makes
//! `score(witness) == max_marginal` hold bit for bit.

use alloc::vec::Vec;

use crate::lattice::{decode, CliqueAssignment, SparseLattice};
use crate::model::FeatureTemplate;
use crate::model::{clique_score_with, LinearModel, Output, SequenceInput, WeightView};
use crate::{Error, Result};

const NONE: u32 = u32::MAX;

/// Outputs allowed in [`brute_force_max_marginals`].
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

/// Per-anchor, per-assignment clique scores `θᵀf_c(x, y_c)`.
pub type CliqueScores = Vec<Vec<f64>>;

fn check_input(input: &SequenceInput, lattice: &SparseLattice) -> Result<()> {
    if input.len() != lattice.length() {
        return Err(Error::Shape(alloc::format!(
            "input length {} but lattice length {}",
            input.len(),
            lattice.length()
        )));
    }
    Ok(())
}

pub(crate) fn clique_scores_with<W: WeightView + ?Sized>(
    weights: &W,
    templates: &[FeatureTemplate],
    dimension: usize,
    input: &SequenceInput,
    lattice: &SparseLattice,
) -> CliqueScores {
    let order = lattice.order();
    let k = lattice.num_states();
    let mut states = alloc::vec![0; order];
    (0..lattice.num_anchors())
        .map(|j| {
            lattice
                .codes(j)
                .iter()
                .map(|&code| {
                    fill_states(&mut states, code, k);
                    clique_score_with(weights, templates, dimension, input, j, &states)
                })
                .collect()
        })
        .collect()
}

fn fill_states(states: &mut [u32], mut code: u64, k: usize) {
    for slot in states.iter_mut().rev() {
        *slot = (code % k as u64) as u32;
        code /= k as u64;
    }
}

pub fn clique_scores(
    model: &LinearModel,
    input: &SequenceInput,
    lattice: &SparseLattice,
) -> Result<CliqueScores> {
    check_input(input, lattice)?;
    Ok(clique_scores_with(
        model.weights(),
        model.templates(),
        model.dimension(),
        input,
        lattice,
    ))
}

/// Max-marginal, witness and global maximum for every surviving assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct MaxMarginalTable {
    length: usize,
    order: usize,
    num_states: usize,
    codes: Vec<Vec<u64>>,
    offsets: Vec<usize>,
    values: Vec<f64>,
    // Flat witness paths: for node n, `paths[n * anchors..(n + 1) * anchors]`
    // holds the assignment index used at every anchor.
    paths: Vec<u32>,
    global_max: f64,
    argmax_node: usize,
}

impl MaxMarginalTable {
    fn anchors(&self) -> usize {
        self.codes.len()
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_anchors(&self) -> usize {
        self.codes.len()
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn codes(&self, anchor: usize) -> &[u64] {
        &self.codes[anchor]
    }

    /// Max-marginals at one anchor, aligned with [`codes`](Self::codes).
    pub fn values(&self, anchor: usize) -> &[f64] {
        &self.values[self.offsets[anchor]..self.offsets[anchor + 1]]
    }

    /// All max-marginals, anchor by anchor.
    pub fn all_values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_marginal(&self, anchor: usize, index: usize) -> f64 {
        self.values[self.offsets[anchor] + index]
    }

    /// `|𝒱|`, the number of surviving clique assignments.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn global_max(&self) -> f64 {
        self.global_max
    }

    pub fn global_argmax(&self) -> Output {
        self.output_of(self.witness_path_flat(self.argmax_node))
    }

    /// Mean max-marginal over every surviving assignment.
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn assignment(&self, anchor: usize, index: usize) -> CliqueAssignment {
        CliqueAssignment::new(
            anchor,
            decode(self.codes[anchor][index], self.order, self.num_states),
        )
    }

    pub fn iter(&self) -> impl Iterator<Item = (CliqueAssignment, f64)> + '_ {
        (0..self.anchors()).flat_map(move |j| {
            (0..self.codes[j].len()).map(move |a| (self.assignment(j, a), self.max_marginal(j, a)))
        })
    }

    fn witness_path_flat(&self, node: usize) -> &[u32] {
        let n = self.anchors();
        &self.paths[node * n..(node + 1) * n]
    }

    /// Assignment index used by the witness of `(anchor, index)` at every anchor.
    pub fn witness_path(&self, anchor: usize, index: usize) -> &[u32] {
        self.witness_path_flat(self.offsets[anchor] + index)
    }

    fn output_of(&self, path: &[u32]) -> Output {
        let mut labels = decode(self.codes[0][path[0] as usize], self.order, self.num_states);
        for (j, &a) in path.iter().enumerate().skip(1) {
            labels.push((self.codes[j][a as usize] % self.num_states as u64) as u32);
        }
        Output::new(labels)
    }

    /// Highest-scoring output containing `(anchor, index)`.
    pub fn witness(&self, anchor: usize, index: usize) -> Output {
        self.output_of(self.witness_path(anchor, index))
    }

    /// For every node, how many witnesses (over all nodes) pass through it.
    pub fn witness_counts(&self) -> Vec<Vec<u32>> {
        let mut counts: Vec<Vec<u32>> =
            self.codes.iter().map(|c| alloc::vec![0; c.len()]).collect();
        for path in self.paths.chunks_exact(self.anchors()) {
            for (j, &a) in path.iter().enumerate() {
                counts[j][a as usize] += 1;
            }
        }
        counts
    }

    /// Flat node id of `(anchor, index)`, in anchor-major order.
    pub fn node_of(&self, anchor: usize, index: usize) -> usize {
        self.offsets[anchor] + index
    }

    /// `(anchor, index)` of a flat node id.
    pub fn locate(&self, node: usize) -> (usize, usize) {
        let anchor = self.offsets.partition_point(|&o| o <= node) - 1;
        (anchor, node - self.offsets[anchor])
    }

    pub fn witness_of_node(&self, node: usize) -> Output {
        self.output_of(self.witness_path_flat(node))
    }

    pub fn witness_path_of_node(&self, node: usize) -> &[u32] {
        self.witness_path_flat(node)
    }

    pub(crate) fn argmax_node(&self) -> usize {
        self.argmax_node
    }
}

fn offsets_of(codes: &[Vec<u64>]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(codes.len() + 1);
    offsets.push(0);
    for c in codes {
        offsets.push(offsets.last().unwrap() + c.len());
    }
    offsets
}

/// Max-sum forward-backward from precomputed clique scores.
pub fn max_marginals_from_scores(
    lattice: &SparseLattice,
    scores: &[Vec<f64>],
) -> Result<MaxMarginalTable> {
    let anchors = lattice.num_anchors();
    if scores.len() != anchors || (0..anchors).any(|j| scores[j].len() != lattice.codes(j).len()) {
        return Err(Error::Shape(
            "clique score table does not match the lattice".into(),
        ));
    }
    // Forward: exact left-to-right prefix sums with backpointers.
    let mut alpha: Vec<Vec<f64>> = Vec::with_capacity(anchors);
    let mut back: Vec<Vec<u32>> = Vec::with_capacity(anchors);
    alpha.push(scores[0].clone());
    back.push(alloc::vec![NONE; scores[0].len()]);
    for j in 1..anchors {
        let mut a_j = Vec::with_capacity(scores[j].len());
        let mut b_j = Vec::with_capacity(scores[j].len());
        for (a, &s) in scores[j].iter().enumerate() {
            let (mut best, mut arg) = (f64::NEG_INFINITY, NONE);
            for &p in lattice.preds(j, a) {
                let v = alpha[j - 1][p as usize];
                if v > best {
                    best = v;
                    arg = p;
                }
            }
            a_j.push(best + s);
            b_j.push(arg);
        }
        alpha.push(a_j);
        back.push(b_j);
    }
    // Backward: best continuation to the right of each node.
    let mut beta: Vec<Vec<f64>> = lattice
        .codes_iter()
        .map(|c| alloc::vec![0.0; c.len()])
        .collect();
    let mut fwd: Vec<Vec<u32>> = lattice
        .codes_iter()
        .map(|c| alloc::vec![NONE; c.len()])
        .collect();
    for j in (0..anchors.saturating_sub(1)).rev() {
        for a in 0..scores[j].len() {
            let (mut best, mut arg) = (f64::NEG_INFINITY, NONE);
            for &q in lattice.succs(j, a) {
                let v = scores[j + 1][q as usize] + beta[j + 1][q as usize];
                if v > best {
                    best = v;
                    arg = q;
                }
            }
            beta[j][a] = best;
            fwd[j][a] = arg;
        }
    }

    let codes: Vec<Vec<u64>> = lattice.codes_iter().map(<[u64]>::to_vec).collect();
    let offsets = offsets_of(&codes);
    let total = *offsets.last().unwrap();
    let mut values = Vec::with_capacity(total);
    let mut paths = alloc::vec![0u32; total * anchors];
    let mut node = 0usize;
    for j in 0..anchors {
        for a in 0..codes[j].len() {
            let path = &mut paths[node * anchors..(node + 1) * anchors];
            path[j] = a as u32;
            let mut cur = a as u32;
            for i in (0..j).rev() {
                cur = back[i + 1][cur as usize];
                path[i] = cur;
            }
            let mut value = alpha[j][a];
            let mut cur = a as u32;
            for i in j..anchors - 1 {
                cur = fwd[i][cur as usize];
                path[i + 1] = cur;
                value += scores[i + 1][cur as usize];
            }
            values.push(value);
            node += 1;
        }
    }
    let (mut global_max, mut argmax_node) = (f64::NEG_INFINITY, 0);
    for (n, &v) in values.iter().enumerate() {
        if v > global_max {
            global_max = v;
            argmax_node = n;
        }
    }
    Ok(MaxMarginalTable {
        length: lattice.length(),
        order: lattice.order(),
        num_states: lattice.num_states(),
        codes,
        offsets,
        values,
        paths,
        global_max,
        argmax_node,
    })
}

/// Forward max-sum only: assignment index of the best path at every anchor.
pub(crate) fn viterbi_path(lattice: &SparseLattice, scores: &[Vec<f64>]) -> Vec<usize> {
    let anchors = lattice.num_anchors();
    let mut alpha = scores[0].clone();
    let mut back: Vec<Vec<u32>> = Vec::with_capacity(anchors);
    back.push(Vec::new());
    for j in 1..anchors {
        let mut next = Vec::with_capacity(scores[j].len());
        let mut b_j = Vec::with_capacity(scores[j].len());
        for (a, &s) in scores[j].iter().enumerate() {
            let (mut best, mut arg) = (f64::NEG_INFINITY, NONE);
            for &p in lattice.preds(j, a) {
                if alpha[p as usize] > best {
                    best = alpha[p as usize];
                    arg = p;
                }
            }
            next.push(best + s);
            b_j.push(arg);
        }
        alpha = next;
        back.push(b_j);
    }
    let mut cur = 0;
    for (a, &v) in alpha.iter().enumerate() {
        if v > alpha[cur] {
            cur = a;
        }
    }
    let mut path = alloc::vec![0usize; anchors];
    path[anchors - 1] = cur;
    for j in (1..anchors).rev() {
        cur = back[j][cur] as usize;
        path[j - 1] = cur;
    }
    path
}

/// Output spelled by one assignment index per anchor.
pub(crate) fn path_output(lattice: &SparseLattice, path: &[usize]) -> Output {
    let (order, k) = (lattice.order(), lattice.num_states());
    let mut labels = decode(lattice.codes(0)[path[0]], order, k);
    for (j, &a) in path.iter().enumerate().skip(1) {
        labels.push((lattice.codes(j)[a] % k as u64) as u32);
    }
    Output::new(labels)
}

/// Max-marginal `m(y_c)` of every surviving assignment, with witnesses.
pub fn max_marginals(
    model: &LinearModel,
    input: &SequenceInput,
    lattice: &SparseLattice,
) -> Result<MaxMarginalTable> {
    let scores = clique_scores(model, input, lattice)?;
    max_marginals_from_scores(lattice, &scores)
}

/// Highest-scoring output in the lattice and its score.
pub fn map_decode(
    model: &LinearModel,
    input: &SequenceInput,
    lattice: &SparseLattice,
) -> Result<(Output, f64)> {
    let table = max_marginals(model, input, lattice)?;
    Ok((table.global_argmax(), table.global_max()))
}

/// Exhaustive max-marginals for small lattices; the oracle for the dynamic program.
///
/// Outputs are enumerated in lexicographic order and only strictly better
/// scores replace a current best, so ties keep the lexicographically
/// smallest witness.
pub fn brute_force_max_marginals(
    model: &LinearModel,
    input: &SequenceInput,
    lattice: &SparseLattice,
) -> Result<MaxMarginalTable> {
    check_input(input, lattice)?;
    let (len, k, order) = (lattice.length(), lattice.num_states(), lattice.order());
    let outputs = (k as u128).checked_pow(len as u32).unwrap_or(u128::MAX);
    if outputs > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(outputs));
    }
    let anchors = lattice.num_anchors();
    let codes: Vec<Vec<u64>> = lattice.codes_iter().map(<[u64]>::to_vec).collect();
    let offsets = offsets_of(&codes);
    let total = *offsets.last().unwrap();
    let mut values = alloc::vec![f64::NEG_INFINITY; total];
    let mut paths = alloc::vec![0u32; total * anchors];
    let (mut global_max, mut argmax_node) = (f64::NEG_INFINITY, 0usize);

    let mut labels = alloc::vec![0u32; len];
    loop {
        let y = Output::new(labels.clone());
        if let Some(path) = lattice.path_of(&y) {
            let mut score = 0.0;
            for j in 0..anchors {
                score += clique_score_with(
                    model.weights(),
                    model.templates(),
                    model.dimension(),
                    input,
                    j,
                    &labels[j..j + order],
                );
            }
            for (j, &a) in path.iter().enumerate() {
                let n = offsets[j] + a;
                if score > values[n] {
                    values[n] = score;
                    for (slot, &p) in paths[n * anchors..(n + 1) * anchors].iter_mut().zip(&path) {
                        *slot = p as u32;
                    }
                }
            }
            if score > global_max {
                global_max = score;
                argmax_node = offsets[0] + path[0];
            }
        }
        // Odometer increment, last position fastest.
        let mut i = len;
        loop {
            if i == 0 {
                let table = MaxMarginalTable {
                    length: len,
                    order,
                    num_states: k,
                    codes,
                    offsets,
                    values,
                    paths,
                    global_max,
                    argmax_node,
                };
                return Ok(table);
            }
            i -= 1;
            labels[i] += 1;
            if (labels[i] as usize) < k {
                break;
            }
            labels[i] = 0;
        }
    }
}

/// Sum-product posteriors `P(y_c | x)` per surviving assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMarginalTable {
    codes: Vec<Vec<u64>>,
    posteriors: Vec<Vec<f64>>,
    log_partition: f64,
}

impl LogMarginalTable {
    pub fn codes(&self, anchor: usize) -> &[u64] {
        &self.codes[anchor]
    }

    pub fn posteriors(&self, anchor: usize) -> &[f64] {
        &self.posteriors[anchor]
    }

    pub fn posterior(&self, anchor: usize, index: usize) -> f64 {
        self.posteriors[anchor][index]
    }

    pub fn num_anchors(&self) -> usize {
        self.codes.len()
    }

    pub fn log_partition(&self) -> f64 {
        self.log_partition
    }

    pub fn len(&self) -> usize {
        self.posteriors.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + libm::log(values.map(|v| libm::exp(v - max)).sum::<f64>())
}

pub fn sum_product_from_scores(
    lattice: &SparseLattice,
    scores: &[Vec<f64>],
) -> Result<LogMarginalTable> {
    let anchors = lattice.num_anchors();
    if scores.len() != anchors || (0..anchors).any(|j| scores[j].len() != lattice.codes(j).len()) {
        return Err(Error::Shape(
            "clique score table does not match the lattice".into(),
        ));
    }
    let mut alpha: Vec<Vec<f64>> = Vec::with_capacity(anchors);
    alpha.push(scores[0].clone());
    for j in 1..anchors {
        let prev = &alpha[j - 1];
        let row = (0..scores[j].len())
            .map(|a| {
                scores[j][a] + log_sum_exp(lattice.preds(j, a).iter().map(|&p| prev[p as usize]))
            })
            .collect();
        alpha.push(row);
    }
    let mut beta: Vec<Vec<f64>> = lattice
        .codes_iter()
        .map(|c| alloc::vec![0.0; c.len()])
        .collect();
    for j in (0..anchors.saturating_sub(1)).rev() {
        for a in 0..scores[j].len() {
            let next = &beta[j + 1];
            let v = log_sum_exp(
                lattice
                    .succs(j, a)
                    .iter()
                    .map(|&q| scores[j + 1][q as usize] + next[q as usize]),
            );
            beta[j][a] = v;
        }
    }
    let log_partition = log_sum_exp(alpha[anchors - 1].iter().copied());
    let posteriors = (0..anchors)
        .map(|j| {
            (0..scores[j].len())
                .map(|a| libm::exp(alpha[j][a] + beta[j][a] - log_partition))
                .collect()
        })
        .collect();
    Ok(LogMarginalTable {
        codes: lattice.codes_iter().map(<[u64]>::to_vec).collect(),
        posteriors,
        log_partition,
    })
}

pub fn sum_product_marginals(
    model: &LinearModel,
    input: &SequenceInput,
    lattice: &SparseLattice,
) -> Result<LogMarginalTable> {
    let scores = clique_scores(model, input, lattice)?;
    sum_product_from_scores(lattice, &scores)
}

impl SparseLattice {
    pub(crate) fn codes_iter(&self) -> impl Iterator<Item = &[u64]> + '_ {
        (0..self.num_anchors()).map(move |j| self.codes(j))
    }
}
