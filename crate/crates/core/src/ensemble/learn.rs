//! Learned grid ensembles: joint subgradient steps and node-centric
//! coarse-to-fine cascades.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::joint::{ensemble_max_marginals, joint_filter, EnsembleTable};
use super::tree::TreePotentials;
use super::{comb_decompose, GridShape, NodeStates, Orientation};
use crate::lattice::StateHierarchy;
use crate::model::{feature_index, FeatureTemplate, State};
use crate::training::{epoch_order, TrainConfig};
use crate::{Error, Result};

/// Raw feature keys of every grid node.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GridInput {
    keys: Vec<Vec<u64>>,
}

impl GridInput {
    pub fn new(keys: Vec<Vec<u64>>) -> Self {
        Self { keys }
    }

    pub fn from_keys<S: AsRef<str>>(nodes: &[Vec<S>]) -> Self {
        Self::new(
            nodes
                .iter()
                .map(|n| n.iter().map(|k| crate::hash_str(k.as_ref())).collect())
                .collect(),
        )
    }

    pub fn num_nodes(&self) -> usize {
        self.keys.len()
    }

    pub fn keys(&self, node: usize) -> &[u64] {
        &self.keys[node]
    }
}

/// A labelled grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridExample {
    pub shape: GridShape,
    pub input: GridInput,
    pub truth: Vec<State>,
}

impl GridExample {
    fn check(&self, num_states: usize) -> Result<()> {
        let n = self.shape.num_nodes();
        if self.input.num_nodes() != n || self.truth.len() != n {
            return Err(Error::Shape(alloc::format!(
                "grid example needs {n} nodes of input and truth"
            )));
        }
        if let Some(&s) = self.truth.iter().find(|&&s| s as usize >= num_states) {
            return Err(Error::Range(alloc::format!(
                "state {s} outside 0..{num_states}"
            )));
        }
        Ok(())
    }
}

/// Which sub-models a learned ensemble uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Decomposition {
    /// One comb per row and per column spine.
    #[default]
    Combs,
    /// A single model with unary features only.
    UnaryOnly,
}

/// Sub-models with their own weights over grid unary and pairwise features.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedEnsemble {
    pub shape: GridShape,
    pub num_states: usize,
    pub dimension: usize,
    /// Grid edge ids of each sub-model.
    pub trees: Vec<Vec<usize>>,
    /// One weight vector of length `dimension` per sub-model.
    pub weights: Vec<Vec<f64>>,
}

struct FeatureCache {
    /// Weight indices firing for `(node, state)`, at `node * K + state`.
    unary: Vec<Vec<usize>>,
    /// Weight index of `(orientation, a, b)`, at `o * K * K + a * K + b`.
    pairwise: Vec<usize>,
}

impl LearnedEnsemble {
    pub fn new(
        shape: GridShape,
        num_states: usize,
        dimension: usize,
        decomposition: Decomposition,
    ) -> Result<Self> {
        if num_states == 0 || dimension == 0 {
            return Err(Error::Config(
                "grid ensembles need states and a feature dimension".into(),
            ));
        }
        let trees: Vec<Vec<usize>> = match decomposition {
            Decomposition::Combs => comb_decompose(shape.rows, shape.cols)?
                .into_iter()
                .map(|s| s.edges)
                .collect(),
            Decomposition::UnaryOnly => alloc::vec![Vec::new()],
        };
        let weights = alloc::vec![alloc::vec![0.0; dimension]; trees.len()];
        Ok(Self {
            shape,
            num_states,
            dimension,
            trees,
            weights,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.trees.is_empty() || self.trees.len() != self.weights.len() {
            return Err(Error::Shape(
                "one weight vector per sub-model is required".into(),
            ));
        }
        if self.weights.iter().any(|w| w.len() != self.dimension) {
            return Err(Error::Shape(
                "weight vector length differs from the dimension".into(),
            ));
        }
        if self
            .trees
            .iter()
            .flatten()
            .any(|&e| e >= self.shape.num_edges())
        {
            return Err(Error::Range("sub-model edge outside the grid".into()));
        }
        Ok(())
    }

    pub fn num_models(&self) -> usize {
        self.trees.len()
    }

    fn cache(&self, input: &GridInput) -> Result<FeatureCache> {
        let (k, dim) = (self.num_states, self.dimension);
        if input.num_nodes() != self.shape.num_nodes() {
            return Err(Error::Shape(alloc::format!(
                "input has {} nodes, grid has {}",
                input.num_nodes(),
                self.shape.num_nodes()
            )));
        }
        let unary = (0..input.num_nodes() * k)
            .map(|vk| {
                let (v, s) = (vk / k, (vk % k) as u64);
                input
                    .keys(v)
                    .iter()
                    .map(|&key| feature_index(FeatureTemplate::GridUnary, &[key, s], dim))
                    .collect()
            })
            .collect();
        let pairwise = (0..2 * k * k)
            .map(|i| {
                let (o, a, b) = ((i / (k * k)) as u64, ((i / k) % k) as u64, (i % k) as u64);
                feature_index(FeatureTemplate::GridPairwise, &[o, a, b], dim)
            })
            .collect();
        Ok(FeatureCache { unary, pairwise })
    }

    fn orientation_offset(&self, edge: usize) -> usize {
        match self.shape.orientation(edge) {
            Orientation::Horizontal => 0,
            Orientation::Vertical => self.num_states * self.num_states,
        }
    }

    fn potentials_with(&self, cache: &FeatureCache) -> Vec<TreePotentials> {
        let k = self.num_states;
        self.trees
            .iter()
            .zip(&self.weights)
            .map(|(edges, w)| TreePotentials {
                shape: self.shape,
                num_states: k,
                edges: edges.clone(),
                unary: cache
                    .unary
                    .iter()
                    .map(|idx| idx.iter().map(|&i| w[i]).sum())
                    .collect(),
                pairwise: edges
                    .iter()
                    .map(|&e| {
                        let off = self.orientation_offset(e);
                        (0..k * k).map(|ab| w[cache.pairwise[off + ab]]).collect()
                    })
                    .collect(),
            })
            .collect()
    }

    /// Log-potentials of every sub-model on `input`.
    pub fn potentials(&self, input: &GridInput) -> Result<Vec<TreePotentials>> {
        Ok(self.potentials_with(&self.cache(input)?))
    }

    /// Sparse features `f_p(x, y)` of sub-model `p`, unsorted with repeats.
    pub fn features(&self, p: usize, input: &GridInput, y: &[State]) -> Result<Vec<(usize, f64)>> {
        let cache = self.cache(input)?;
        let mut counts = Counts::new(self, p);
        counts.add(self, p, y, 1.0);
        Ok(counts.features(self, p, &cache))
    }

    /// Summed max-marginals of the ensemble on `states`.
    pub fn table(&self, input: &GridInput, states: &NodeStates) -> Result<EnsembleTable> {
        ensemble_max_marginals(&self.potentials(input)?, states)
    }
}

/// Per-potential coefficients of a feature combination for one sub-model.
struct Counts {
    unary: Vec<f64>,
    pairwise: Vec<Vec<f64>>,
}

impl Counts {
    fn new(ens: &LearnedEnsemble, p: usize) -> Self {
        let k = ens.num_states;
        Self {
            unary: alloc::vec![0.0; ens.shape.num_nodes() * k],
            pairwise: alloc::vec![alloc::vec![0.0; k * k]; ens.trees[p].len()],
        }
    }

    fn add(&mut self, ens: &LearnedEnsemble, p: usize, y: &[State], c: f64) {
        let k = ens.num_states;
        for (v, &s) in y.iter().enumerate() {
            self.unary[v * k + s as usize] += c;
        }
        for (i, &e) in ens.trees[p].iter().enumerate() {
            let (u, v) = ens.shape.edge(e);
            self.pairwise[i][y[u] as usize * k + y[v] as usize] += c;
        }
    }

    fn features(&self, ens: &LearnedEnsemble, p: usize, cache: &FeatureCache) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        for (vk, &c) in self.unary.iter().enumerate() {
            if c != 0.0 {
                out.extend(cache.unary[vk].iter().map(|&i| (i, c)));
            }
        }
        for (i, &e) in ens.trees[p].iter().enumerate() {
            let off = ens.orientation_offset(e);
            for (ab, &c) in self.pairwise[i].iter().enumerate() {
                if c != 0.0 {
                    out.push((cache.pairwise[off + ab], c));
                }
            }
        }
        out
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(alloc::format!(
            "alpha {alpha} outside [0, 1)"
        )));
    }
    Ok(())
}

/// One joint subgradient step on the example restricted to `states`.
///
/// Every sub-model is shrunk by `1 - ηλ`. If the summed truth score falls
/// short of `Σ_p τ_p + ℓ`, each sub-model also moves along its own
/// `f_p(y) - α f_p(y*_p) - (1-α) mean_u f_p(wit_p(u))`. Returns the joint hinge.
pub fn joint_sc_step(
    ens: &mut LearnedEnsemble,
    ex: &GridExample,
    states: &NodeStates,
    alpha: f64,
    config: &TrainConfig,
    t: u64,
) -> Result<f64> {
    config.validate()?;
    check_alpha(alpha)?;
    ex.check(ens.num_states)?;
    if ex.shape != ens.shape {
        return Err(Error::Shape(
            "example grid differs from the ensemble grid".into(),
        ));
    }
    let cache = ens.cache(&ex.input)?;
    let pots = ens.potentials_with(&cache);
    let table = ensemble_max_marginals(&pots, states)?;
    let score: f64 = pots
        .iter()
        .map(|p| p.score(&ex.truth))
        .sum::<Result<f64>>()?;
    let tau = table.joint_threshold(alpha);
    let hinge = (config.margin_for(ens.shape.num_nodes()) + tau - score).max(0.0);

    let eta = config.step_size(t);
    let shrink = 1.0 - eta * config.lambda;
    for w in &mut ens.weights {
        if shrink != 1.0 {
            w.iter_mut().for_each(|x| *x *= shrink);
        }
    }
    if hinge > 0.0 {
        let units = states.len() as f64;
        for p in 0..ens.num_models() {
            let tree = table.table(p);
            let mut counts = Counts::new(ens, p);
            counts.add(ens, p, &ex.truth, 1.0);
            let (v, i) = tree.argmax();
            counts.add(ens, p, &tree.witness(v, i), -alpha);
            let c = -(1.0 - alpha) / units;
            for node in 0..states.num_nodes() {
                for idx in 0..states.states(node).len() {
                    counts.add(ens, p, &tree.witness(node, idx), c);
                }
            }
            let direction = counts.features(ens, p, &cache);
            let w = &mut ens.weights[p];
            for (i, d) in direction {
                w[i] += eta * d;
                if !w[i].is_finite() {
                    return Err(Error::NonFinite { index: i, step: t });
                }
            }
        }
    }
    Ok(hinge)
}

/// Runs joint steps over `data` for `config.epochs` epochs with a seeded
/// shuffle; returns the averaged or last ensemble.
pub(crate) fn train_ensemble(
    initial: &LearnedEnsemble,
    data: &[(&GridExample, &NodeStates)],
    alpha: f64,
    config: &TrainConfig,
) -> Result<LearnedEnsemble> {
    config.validate()?;
    let mut ens = initial.clone();
    let mut sum: Vec<Vec<f64>> = ens
        .weights
        .iter()
        .map(|w| alloc::vec![0.0; w.len()])
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut t = 0u64;
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for k in epoch_order(data.len(), &mut rng) {
            t += 1;
            let (ex, states) = data[k];
            total += joint_sc_step(&mut ens, ex, states, alpha, config, t)?;
            if config.averaging {
                for (s, w) in sum.iter_mut().zip(&ens.weights) {
                    s.iter_mut().zip(w).for_each(|(a, b)| *a += b);
                }
            }
        }
        log::debug!(
            "grid epoch {epoch}: mean joint hinge {}",
            total / data.len().max(1) as f64
        );
    }
    if config.averaging && t > 0 {
        for s in &mut sum {
            s.iter_mut().for_each(|x| *x /= t as f64);
        }
        ens.weights = sum;
    }
    Ok(ens)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridCascadeConfig {
    /// Alphabet of the last level.
    pub num_states: usize,
    /// Refinements between consecutive levels; empty for a single level.
    pub hierarchies: Vec<StateHierarchy>,
    pub dimension: usize,
    pub decomposition: Decomposition,
    pub train: TrainConfig,
    /// `α` used in the joint training threshold.
    pub train_alpha: f64,
    pub alpha_candidates: Vec<f64>,
    /// Bound on the dev rate of pruned truth node-states.
    pub epsilon: f64,
}

impl GridCascadeConfig {
    pub fn new(num_states: usize, hierarchies: Vec<StateHierarchy>, dimension: usize) -> Self {
        Self {
            num_states,
            hierarchies,
            dimension,
            decomposition: Decomposition::Combs,
            train: TrainConfig::default(),
            train_alpha: 0.2,
            alpha_candidates: alloc::vec![0.0, 0.2, 0.4, 0.6, 0.8],
            epsilon: 0.01,
        }
    }

    /// Alphabet size and fine-to-level label map of every level.
    fn shapes(&self) -> Result<Vec<(usize, Vec<State>)>> {
        self.train.validate()?;
        check_alpha(self.train_alpha)?;
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(alloc::format!(
                "epsilon {} outside [0, 1]",
                self.epsilon
            )));
        }
        if let Some(a) = self
            .alpha_candidates
            .iter()
            .find(|a| !(0.0..1.0).contains(*a))
        {
            return Err(Error::Config(alloc::format!(
                "candidate alpha {a} outside [0, 1)"
            )));
        }
        let mut map: Vec<State> = (0..self.num_states as State).collect();
        let mut size = self.num_states;
        let mut levels = alloc::vec![(size, map.clone())];
        for h in self.hierarchies.iter().rev() {
            if h.fine_size() != size {
                return Err(Error::Config(alloc::format!(
                    "hierarchy refines into {} states, next level has {size}",
                    h.fine_size()
                )));
            }
            map = map.iter().map(|&s| h.parent(s)).collect();
            size = h.coarse_size();
            levels.push((size, map.clone()));
        }
        levels.reverse();
        Ok(levels)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GridLevelMetrics {
    pub alpha: f64,
    /// Dev examples whose truth lost a node-state at this level.
    pub filter_loss: f64,
    /// Mean fraction of entering node-states kept.
    pub efficiency_loss: f64,
    /// Mean surviving fraction of the level's full node-state space.
    pub density: f64,
    /// Per-node argmax of the summed max-marginals against the truth.
    pub node_accuracy: f64,
    /// Dev grids decoded without a single node error.
    pub grid_accuracy: f64,
    pub examples: usize,
    pub breakdowns: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridLevel {
    pub ensemble: LearnedEnsemble,
    pub alpha: f64,
    pub num_states: usize,
    /// Fine label to this level's label.
    pub label_map: Vec<State>,
    pub metrics: GridLevelMetrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridCascade {
    pub shape: GridShape,
    pub levels: Vec<GridLevel>,
    /// Refinements between consecutive levels.
    pub hierarchies: Vec<StateHierarchy>,
}

impl GridCascade {
    /// Surviving node-states after each level.
    pub fn run(&self, input: &GridInput) -> Result<Vec<NodeStates>> {
        let mut states = NodeStates::full(self.shape.num_nodes(), self.levels[0].num_states);
        let mut out = Vec::with_capacity(self.levels.len());
        for (l, level) in self.levels.iter().enumerate() {
            if l > 0 {
                states = states.refine(&self.hierarchies[l - 1])?;
            }
            states = joint_filter(&level.ensemble.table(input, &states)?, level.alpha)?;
            out.push(states.clone());
        }
        Ok(out)
    }

    /// Per-level metrics on labelled grids. `filter_loss` counts grids whose
    /// truth was intact entering a level and lost there; broken-down grids
    /// count as lost and leave the pipeline.
    pub fn evaluate(&self, data: &[GridExample]) -> Result<Vec<GridLevelMetrics>> {
        let n = self.shape.num_nodes();
        let fine = self.levels.last().map_or(0, |l| l.num_states);
        for ex in data {
            ex.check(fine)?;
            if ex.shape != self.shape {
                return Err(Error::Shape(
                    "example shape differs from the cascade".into(),
                ));
            }
        }
        let mut states: Vec<Option<NodeStates>> =
            alloc::vec![Some(NodeStates::full(n, self.levels[0].num_states)); data.len()];
        let mut intact = alloc::vec![true; data.len()];
        let mut out = Vec::with_capacity(self.levels.len());
        for (l, level) in self.levels.iter().enumerate() {
            let mut m = GridLevelMetrics {
                alpha: level.alpha,
                ..GridLevelMetrics::default()
            };
            let (mut lost, mut kept, mut correct, mut exact) = (0usize, 0.0, 0usize, 0usize);
            for (i, ex) in data.iter().enumerate() {
                let Some(s) = states[i].take() else { continue };
                let s = if l > 0 {
                    s.refine(&self.hierarchies[l - 1])?
                } else {
                    s
                };
                let truth: Vec<State> = ex
                    .truth
                    .iter()
                    .map(|&y| level.label_map[y as usize])
                    .collect();
                let table = level.ensemble.table(&ex.input, &s)?;
                let hits = table
                    .decode()
                    .iter()
                    .zip(&truth)
                    .filter(|(a, b)| a == b)
                    .count();
                correct += hits;
                exact += usize::from(hits == n);
                m.examples += 1;
                match joint_filter(&table, level.alpha) {
                    Ok(k) => {
                        kept += k.len() as f64 / s.len() as f64;
                        m.density += k.density();
                        if intact[i] && !k.contains(&truth) {
                            intact[i] = false;
                            lost += 1;
                        }
                        states[i] = Some(k);
                    }
                    Err(Error::Breakdown { .. }) => {
                        m.breakdowns += 1;
                        if intact[i] {
                            intact[i] = false;
                            lost += 1;
                        }
                    }
                    Err(e) => return Err(e),
                }
            }
            if m.examples > 0 {
                let count = m.examples as f64;
                m.filter_loss = lost as f64 / count;
                m.efficiency_loss = kept / count;
                m.density /= count;
                m.node_accuracy = correct as f64 / (count * n as f64);
                m.grid_accuracy = exact as f64 / count;
            }
            out.push(m);
        }
        Ok(out)
    }
}

struct DevStats {
    table: EnsembleTable,
    truth_min: Option<f64>,
}

fn dev_rates(stats: &[Option<DevStats>], alpha: f64) -> (f64, f64) {
    let (mut lost, mut kept) = (0.0, 0.0);
    for s in stats {
        match s {
            None => lost += 1.0,
            Some(s) => {
                let cut = s.table.cutoff(alpha);
                if s.truth_min.is_none_or(|m| !cut.keeps(m)) {
                    lost += 1.0;
                }
                let states = s.table.states();
                let n = (0..states.num_nodes())
                    .map(|v| s.table.summed(v).iter().filter(|&&m| cut.keeps(m)).count())
                    .sum::<usize>();
                kept += n as f64 / states.len() as f64;
            }
        }
    }
    let count = stats.len() as f64;
    (lost / count, kept / count)
}

/// Picks the least efficient-loss `α` whose dev pruned-truth rate is at most
/// `ε`, from the candidates and every example's critical value; `0` if none.
fn tune_grid_alpha(
    stats: &[Option<DevStats>],
    candidates: &[f64],
    epsilon: f64,
) -> (f64, f64, f64) {
    let mut alphas: Vec<f64> = candidates.to_vec();
    alphas.push(0.0);
    for s in stats.iter().flatten() {
        let (max, mean) = (s.table.max_sum(), s.table.mean_sum());
        if let (Some(r), true) = (s.truth_min, max > mean) {
            let critical = (r - mean) / (max - mean);
            let below = critical - 1e-9 * critical.abs().max(1.0);
            if (0.0..1.0).contains(&below) {
                alphas.push(below);
            }
        }
    }
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    let mut best: Option<(f64, f64, f64)> = None;
    for &a in &alphas {
        let (lf, le) = dev_rates(stats, a);
        if lf <= epsilon && best.is_none_or(|(_, _, be)| le < be) {
            best = Some((a, lf, le));
        }
    }
    best.unwrap_or_else(|| {
        let (lf, le) = dev_rates(stats, 0.0);
        (0.0, lf, le)
    })
}

fn relabel(ex: &GridExample, map: &[State]) -> GridExample {
    GridExample {
        shape: ex.shape,
        input: ex.input.clone(),
        truth: ex.truth.iter().map(|&s| map[s as usize]).collect(),
    }
}

/// Trains one joint ensemble per level, tunes its `α` on `dev`, filters both
/// sets and refines their surviving states into the next alphabet.
pub fn grid_coarse_to_fine(
    train: &[GridExample],
    dev: &[GridExample],
    config: &GridCascadeConfig,
) -> Result<GridCascade> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Empty("grid training or dev set".into()));
    }
    let shape = train[0].shape;
    for ex in train.iter().chain(dev) {
        ex.check(config.num_states)?;
        if ex.shape != shape {
            return Err(Error::Shape(
                "every grid example must share one shape".into(),
            ));
        }
    }
    let levels = config.shapes()?;
    let n = shape.num_nodes();
    let mut train_states: Vec<Option<NodeStates>> =
        alloc::vec![Some(NodeStates::full(n, levels[0].0)); train.len()];
    let mut dev_states: Vec<Option<NodeStates>> =
        alloc::vec![Some(NodeStates::full(n, levels[0].0)); dev.len()];
    let mut out = Vec::with_capacity(levels.len());
    for (l, (k, map)) in levels.iter().enumerate() {
        if l > 0 {
            let h = &config.hierarchies[l - 1];
            for s in train_states
                .iter_mut()
                .chain(dev_states.iter_mut())
                .flatten()
            {
                *s = s.refine(h)?;
            }
        }
        let train_l: Vec<GridExample> = train.iter().map(|ex| relabel(ex, map)).collect();
        let dev_l: Vec<GridExample> = dev.iter().map(|ex| relabel(ex, map)).collect();
        let usable: Vec<(&GridExample, &NodeStates)> = train_l
            .iter()
            .zip(&train_states)
            .filter_map(|(ex, s)| {
                s.as_ref()
                    .filter(|s| s.contains(&ex.truth))
                    .map(|s| (ex, s))
            })
            .collect();
        log::info!(
            "grid level {l}: K={k}, training on {} of {} examples",
            usable.len(),
            train.len()
        );
        let initial = LearnedEnsemble::new(shape, *k, config.dimension, config.decomposition)?;
        let ens = train_ensemble(&initial, &usable, config.train_alpha, &config.train)?;

        let mut correct = 0usize;
        let mut nodes = 0usize;
        let mut exact = 0usize;
        let stats: Vec<Option<DevStats>> = dev_l
            .iter()
            .zip(&dev_states)
            .map(|(ex, s)| -> Result<Option<DevStats>> {
                let Some(s) = s else { return Ok(None) };
                let table = ens.table(&ex.input, s)?;
                let hits = table
                    .decode()
                    .iter()
                    .zip(&ex.truth)
                    .filter(|(a, b)| a == b)
                    .count();
                correct += hits;
                exact += usize::from(hits == n);
                nodes += n;
                Ok(Some(DevStats {
                    truth_min: table.min_on(&ex.truth),
                    table,
                }))
            })
            .collect::<Result<_>>()?;
        let (alpha, filter_loss, efficiency_loss) =
            tune_grid_alpha(&stats, &config.alpha_candidates, config.epsilon);

        let mut breakdowns = 0usize;
        let mut density = 0.0;
        for (slot, st) in dev_states.iter_mut().zip(&stats) {
            if let Some(st) = st {
                match joint_filter(&st.table, alpha) {
                    Ok(kept) => {
                        density += kept.density();
                        *slot = Some(kept);
                    }
                    Err(Error::Breakdown { .. }) => {
                        breakdowns += 1;
                        *slot = None;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        for (ex, slot) in train_l.iter().zip(train_states.iter_mut()) {
            if let Some(s) = slot.as_ref() {
                match joint_filter(&ens.table(&ex.input, s)?, alpha) {
                    Ok(kept) => *slot = Some(kept),
                    Err(Error::Breakdown { .. }) => {
                        breakdowns += 1;
                        *slot = None;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        let metrics = GridLevelMetrics {
            alpha,
            filter_loss,
            efficiency_loss,
            density: density / dev.len() as f64,
            node_accuracy: if nodes == 0 {
                0.0
            } else {
                correct as f64 / nodes as f64
            },
            grid_accuracy: if nodes == 0 {
                0.0
            } else {
                exact as f64 / (nodes / n) as f64
            },
            examples: stats.iter().flatten().count(),
            breakdowns,
        };
        log::info!("grid level {l}: {metrics:?}");
        out.push(GridLevel {
            ensemble: ens,
            alpha,
            num_states: *k,
            label_map: map.clone(),
            metrics,
        });
    }
    Ok(GridCascade {
        shape,
        levels: out,
        hierarchies: config.hierarchies.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::StepSchedule;
    use rand::Rng;

    /// Blocky labels; each node shows its coarse group exactly and its exact
    /// label correctly with probability 0.7.
    pub(crate) fn planted(
        seed: u64,
        count: usize,
        rows: usize,
        cols: usize,
        k: usize,
    ) -> Vec<GridExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = GridShape::new(rows, cols).unwrap();
        (0..count)
            .map(|_| {
                let a: State = rng.random_range(0..k as State);
                let b: State = rng.random_range(0..k as State);
                let split = rng.random_range(0..cols);
                let truth: Vec<State> = (0..rows * cols)
                    .map(|v| if v % cols < split { a } else { b })
                    .collect();
                let keys: Vec<Vec<alloc::string::String>> = truth
                    .iter()
                    .map(|&s| {
                        let shown = if rng.random_bool(0.7) {
                            s
                        } else {
                            rng.random_range(0..k as State)
                        };
                        alloc::vec![alloc::format!("g{}", s / 2), alloc::format!("e{shown}")]
                    })
                    .collect();
                GridExample {
                    shape,
                    input: GridInput::from_keys(&keys),
                    truth,
                }
            })
            .collect()
    }

    fn step_config(lambda: f64) -> TrainConfig {
        TrainConfig {
            lambda,
            eta: StepSchedule::Constant(0.5),
            averaging: false,
            ..TrainConfig::default()
        }
    }

    fn random_weights(ens: &mut LearnedEnsemble, rng: &mut ChaCha8Rng) {
        for w in &mut ens.weights {
            w.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        }
    }

    fn enumerate(n: usize, k: usize) -> Vec<Vec<State>> {
        (0..k.pow(n as u32))
            .map(|mut c| {
                (0..n)
                    .map(|_| {
                        let s = (c % k) as State;
                        c /= k;
                        s
                    })
                    .collect()
            })
            .collect()
    }

    fn dense(features: &[(usize, f64)], dim: usize) -> Vec<f64> {
        let mut out = alloc::vec![0.0; dim];
        for &(i, c) in features {
            out[i] += c;
        }
        out
    }

    #[test]
    fn satisfied_margin_only_shrinks() {
        let ex = &planted(1, 1, 2, 2, 2)[0];
        let mut ens = LearnedEnsemble::new(ex.shape, 2, 64, Decomposition::Combs).unwrap();
        // Large weights on the truth features clear any margin.
        for p in 0..ens.num_models() {
            for (i, c) in ens.features(p, &ex.input, &ex.truth).unwrap() {
                ens.weights[p][i] += 50.0 * c;
            }
        }
        let before = ens.clone();
        let states = NodeStates::full(4, 2);
        let hinge = joint_sc_step(&mut ens, ex, &states, 0.5, &step_config(0.1), 1).unwrap();
        assert_eq!(hinge, 0.0);
        for (a, b) in ens
            .weights
            .iter()
            .flatten()
            .zip(before.weights.iter().flatten())
        {
            assert!((a - 0.95 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_model_step_matches_enumeration() {
        // A 1×4 grid has one comb; witnesses and the update come from enumerating all labellings.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ex = &planted(2, 1, 1, 4, 3)[0];
        let mut ens = LearnedEnsemble::new(ex.shape, 3, 97, Decomposition::Combs).unwrap();
        assert_eq!(ens.num_models(), 1);
        random_weights(&mut ens, &mut rng);
        let (alpha, eta) = (0.3, 0.5);
        let states = NodeStates::full(4, 3);
        let ys = enumerate(4, 3);
        let score = |w: &[f64], y: &[State]| -> f64 {
            ens.features(0, &ex.input, y)
                .unwrap()
                .iter()
                .map(|&(i, c)| w[i] * c)
                .sum()
        };
        let w0 = ens.weights[0].clone();
        let scores: Vec<f64> = ys.iter().map(|y| score(&w0, y)).collect();
        let best = (0..ys.len()).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
        let mut mm = Vec::new();
        for v in 0..4 {
            for s in 0..3 {
                let arg =
                    (0..ys.len())
                        .filter(|&i| ys[i][v] == s)
                        .fold(None, |b: Option<usize>, i| match b {
                            Some(b) if scores[b] >= scores[i] => Some(b),
                            _ => Some(i),
                        });
                mm.push(arg.unwrap());
            }
        }
        let mean = mm.iter().map(|&i| scores[i]).sum::<f64>() / mm.len() as f64;
        let tau = alpha * scores[best] + (1.0 - alpha) * mean;
        let hinge = (4.0 + tau - score(&w0, &ex.truth)).max(0.0);
        let mut expected = w0.clone();
        if hinge > 0.0 {
            let mut g = dense(&ens.features(0, &ex.input, &ex.truth).unwrap(), 97);
            for (i, c) in ens.features(0, &ex.input, &ys[best]).unwrap() {
                g[i] -= alpha * c;
            }
            for &j in &mm {
                for (i, c) in ens.features(0, &ex.input, &ys[j]).unwrap() {
                    g[i] -= (1.0 - alpha) * c / 12.0;
                }
            }
            expected.iter_mut().zip(&g).for_each(|(w, g)| *w += eta * g);
        }
        let got = joint_sc_step(&mut ens, ex, &states, alpha, &step_config(0.0), 1).unwrap();
        assert!((got - hinge).abs() < 1e-9);
        for (a, b) in ens.weights[0].iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn update_matches_finite_difference_of_the_joint_hinge() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let examples = planted(3, 6, 2, 3, 2);
        let mut checked = 0;
        for ex in &examples {
            let mut ens = LearnedEnsemble::new(ex.shape, 2, 31, Decomposition::Combs).unwrap();
            random_weights(&mut ens, &mut rng);
            let states = NodeStates::full(6, 2);
            let alpha = 0.4;
            let hinge_at = |e: &LearnedEnsemble| {
                let pots = e.potentials(&ex.input).unwrap();
                let table = ensemble_max_marginals(&pots, &states).unwrap();
                let s: f64 = pots.iter().map(|p| p.score(&ex.truth).unwrap()).sum();
                (6.0 + table.joint_threshold(alpha) - s).max(0.0)
            };
            let mut stepped = ens.clone();
            let eta = 1e-3;
            let cfg = TrainConfig {
                eta: StepSchedule::Constant(eta),
                ..step_config(0.0)
            };
            if joint_sc_step(&mut stepped, ex, &states, alpha, &cfg, 1).unwrap() == 0.0 {
                continue;
            }
            for p in 0..ens.num_models() {
                for i in 0..31 {
                    let update = (stepped.weights[p][i] - ens.weights[p][i]) / eta;
                    let fd = |h: f64| {
                        let (mut a, mut b) = (ens.clone(), ens.clone());
                        a.weights[p][i] += h;
                        b.weights[p][i] -= h;
                        (hinge_at(&a) - hinge_at(&b)) / (2.0 * h)
                    };
                    let (d1, d2) = (fd(1e-6), fd(5e-7));
                    if (d1 - d2).abs() > 1e-6 {
                        continue;
                    }
                    assert!(
                        (update + d1).abs() < 1e-5,
                        "model {p} weight {i}: {update} vs {}",
                        -d1
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn config_levels_and_errors() {
        let cfg = GridCascadeConfig::new(4, alloc::vec![StateHierarchy::binary_split(2)], 64);
        let levels = cfg.shapes().unwrap();
        assert_eq!(levels.len(), 2);
        assert_eq!(levels[0], (2, alloc::vec![0, 0, 1, 1]));
        assert_eq!(levels[1].0, 4);
        let bad = GridCascadeConfig::new(8, alloc::vec![StateHierarchy::binary_split(2)], 64);
        assert!(bad.shapes().is_err());
        let bad_alpha = GridCascadeConfig {
            train_alpha: 1.0,
            ..cfg.clone()
        };
        assert!(bad_alpha.shapes().is_err());
        assert!(grid_coarse_to_fine(&[], &planted(1, 1, 2, 2, 4), &cfg).is_err());
    }

    #[test]
    fn two_level_cascade_keeps_planted_truth() {
        let (rows, cols, k) = (3, 4, 4);
        let train = planted(10, 60, rows, cols, k);
        let dev = planted(11, 30, rows, cols, k);
        let test = planted(12, 40, rows, cols, k);
        let mut cfg =
            GridCascadeConfig::new(k, alloc::vec![StateHierarchy::binary_split(2)], 1 << 10);
        cfg.epsilon = 0.05;
        cfg.train = TrainConfig {
            epochs: 4,
            eta: StepSchedule::Constant(0.05),
            ..TrainConfig::default()
        };
        let cascade = grid_coarse_to_fine(&train, &dev, &cfg).unwrap();
        assert_eq!(cascade.levels.len(), 2);
        assert!(cascade.levels[1].metrics.efficiency_loss < 1.0);
        let mut kept = 0usize;
        for ex in &test {
            let Ok(survivors) = cascade.run(&ex.input) else {
                continue;
            };
            // Refinement gives each coarse survivor exactly two children.
            let coarse = &survivors[0];
            let refined = coarse.refine(&cascade.hierarchies[0]).unwrap();
            assert_eq!(refined.len(), 2 * coarse.len());
            if survivors[1].contains(&ex.truth) {
                kept += 1;
            }
        }
        let recall = kept as f64 / test.len() as f64;
        assert!(recall >= 1.0 - cfg.epsilon - 0.1, "recall {recall}");
        let metrics = cascade.evaluate(&test).unwrap();
        assert_eq!(metrics.len(), 2);
        let lost: f64 = metrics
            .iter()
            .map(|m| m.filter_loss * m.examples as f64)
            .sum();
        assert_eq!(test.len() - lost.round() as usize, kept);
    }

    #[test]
    fn unary_only_ensemble_has_one_model() {
        let ex = &planted(4, 1, 2, 3, 2)[0];
        let ens = LearnedEnsemble::new(ex.shape, 2, 16, Decomposition::UnaryOnly).unwrap();
        assert_eq!(ens.num_models(), 1);
        let table = ens.table(&ex.input, &NodeStates::full(6, 2)).unwrap();
        // Zero weights: every max-marginal is 0.
        assert!((0..6).all(|v| table.summed(v).iter().all(|&m| m == 0.0)));
    }

    #[test]
    fn training_is_deterministic() {
        let train = planted(5, 10, 2, 2, 2);
        let dev = planted(6, 5, 2, 2, 2);
        let cfg = GridCascadeConfig::new(2, Vec::new(), 128);
        let a = grid_coarse_to_fine(&train, &dev, &cfg).unwrap();
        let b = grid_coarse_to_fine(&train, &dev, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
