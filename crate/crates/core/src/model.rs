//! Linear scoring over sparse clique features.
//!
//! Feature indices come from the hashing trick: every template hashes its raw
//! key (token hash, state tuple, ...) together with a fixed template id and
//! folds the result into the model dimension. Collisions are possible and
//! accepted.
//!
//! A chain model of order `d` scores cliques of `d` consecutive labels. To
//! make `score_output` exactly the sum of clique scores, the clique anchored
//! at position 0 owns every feature inside its window, while a clique
//! anchored at `j > 0` only owns the features that end at its last position
//! `j + d - 1`.

use alloc::vec::Vec;

use crate::hash::{hash_str, mix};
use crate::lattice::CliqueAssignment;
use crate::{Error, Result};

pub type State = u32;

/// One label per position (chains) or per node (grids).
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Output {
    pub labels: Vec<State>,
}

impl Output {
    pub fn new(labels: Vec<State>) -> Self {
        Self { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Checks every label is below `num_states`.
    pub fn validate(&self, num_states: usize) -> Result<()> {
        match self.labels.iter().position(|&s| s as usize >= num_states) {
            Some(i) => Err(Error::Range(alloc::format!(
                "label {} at position {i} is not below K={num_states}",
                self.labels[i]
            ))),
            None => Ok(()),
        }
    }
}

impl From<Vec<State>> for Output {
    fn from(labels: Vec<State>) -> Self {
        Self { labels }
    }
}

/// Observed side of a chain example: per position, the hashed raw feature keys.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SequenceInput {
    tokens: Vec<Vec<u64>>,
}

impl SequenceInput {
    pub fn new(tokens: Vec<Vec<u64>>) -> Self {
        Self { tokens }
    }

    pub fn from_keys<S: AsRef<str>>(tokens: &[Vec<S>]) -> Self {
        let tokens = tokens
            .iter()
            .map(|keys| keys.iter().map(|k| hash_str(k.as_ref())).collect())
            .collect();
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, position: usize) -> &[u64] {
        &self.tokens[position]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureTemplate {
    /// Indicator of (raw key at a position, label at that position).
    Emission,
    /// Indicator of `span` consecutive labels. `span == 1` is a label bias.
    Transition { span: usize },
    /// Indicator of (raw key at a grid node, label of that node).
    GridUnary,
    /// Indicator of (edge orientation, label pair) on a grid edge.
    GridPairwise,
}

impl FeatureTemplate {
    /// Stable id mixed into every feature hash of this template.
    pub fn id(&self) -> u64 {
        match *self {
            FeatureTemplate::Emission => 1,
            FeatureTemplate::GridUnary => 2,
            FeatureTemplate::GridPairwise => 3,
            FeatureTemplate::Transition { span } => 0x100 + span as u64,
        }
    }
}

#[inline]
pub(crate) fn hash_start(template: FeatureTemplate) -> u64 {
    hash_step(crate::hash::hash_key(&[]), template.id())
}

#[inline]
pub(crate) fn hash_step(h: u64, part: u64) -> u64 {
    mix(h ^ part.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Weight index of a template feature: `hash(template id, parts...) mod dimension`.
pub fn feature_index(template: FeatureTemplate, parts: &[u64], dimension: usize) -> usize {
    let h = parts
        .iter()
        .fold(hash_start(template), |h, &p| hash_step(h, p));
    (h % dimension as u64) as usize
}

/// Sparse feature vector with strictly increasing indices and no stored zeros.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureVector {
    entries: Vec<(usize, f64)>,
    dimension: usize,
}

impl FeatureVector {
    pub fn empty(dimension: usize) -> Self {
        Self {
            entries: Vec::new(),
            dimension,
        }
    }

    /// Sorts, merges duplicate indices and drops zeros.
    pub fn from_unsorted(mut entries: Vec<(usize, f64)>, dimension: usize) -> Result<Self> {
        if let Some(&(i, _)) = entries.iter().find(|(i, _)| *i >= dimension) {
            return Err(Error::Range(alloc::format!(
                "feature index {i} not below dimension {dimension}"
            )));
        }
        entries.sort_by_key(|&(i, _)| i);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
        for (i, v) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == i => last.1 += v,
                _ => merged.push((i, v)),
            }
        }
        merged.retain(|&(_, v)| v != 0.0);
        Ok(Self {
            entries: merged,
            dimension,
        })
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dot(&self, weights: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, v)| weights[i] * v).sum()
    }

    /// Returns `self + scale * other`.
    pub fn add_scaled(&self, other: &FeatureVector, scale: f64) -> FeatureVector {
        let mut out = Vec::with_capacity(self.entries.len() + other.entries.len());
        let (mut a, mut b) = (
            self.entries.iter().peekable(),
            other.entries.iter().peekable(),
        );
        loop {
            match (a.peek(), b.peek()) {
                (Some(&&(i, x)), Some(&&(j, y))) => {
                    if i == j {
                        out.push((i, x + scale * y));
                        a.next();
                        b.next();
                    } else if i < j {
                        out.push((i, x));
                        a.next();
                    } else {
                        out.push((j, scale * y));
                        b.next();
                    }
                }
                (Some(&&(i, x)), None) => {
                    out.push((i, x));
                    a.next();
                }
                (None, Some(&&(j, y))) => {
                    out.push((j, scale * y));
                    b.next();
                }
                (None, None) => break,
            }
        }
        out.retain(|&(_, v)| v != 0.0);
        FeatureVector {
            entries: out,
            dimension: self.dimension.max(other.dimension),
        }
    }
}

/// Read access to a weight vector, possibly stored in scaled form.
pub trait WeightView {
    fn weight(&self, index: usize) -> f64;
}

impl WeightView for [f64] {
    #[inline]
    fn weight(&self, index: usize) -> f64 {
        self[index]
    }
}

impl WeightView for Vec<f64> {
    #[inline]
    fn weight(&self, index: usize) -> f64 {
        self[index]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    weights: Vec<f64>,
    templates: Vec<FeatureTemplate>,
}

impl LinearModel {
    /// Zero-initialised model over a hashed space of `dimension` features.
    pub fn new(templates: Vec<FeatureTemplate>, dimension: usize) -> Self {
        Self {
            weights: alloc::vec![0.0; dimension],
            templates,
        }
    }

    pub fn from_weights(templates: Vec<FeatureTemplate>, weights: Vec<f64>) -> Self {
        Self { weights, templates }
    }

    /// Emission features plus label n-grams of every span `2..=order`.
    pub fn chain(order: usize, dimension: usize) -> Self {
        Self::new(chain_templates(order), dimension)
    }

    pub fn dimension(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    pub fn templates(&self) -> &[FeatureTemplate] {
        &self.templates
    }

    /// Clique size needed to score every template: the longest label n-gram.
    pub fn order(&self) -> usize {
        self.templates
            .iter()
            .filter_map(|t| match t {
                FeatureTemplate::Transition { span } => Some(*span),
                _ => None,
            })
            .max()
            .unwrap_or(1)
            .max(1)
    }

    pub fn norm_sq(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum()
    }
}

pub fn chain_templates(order: usize) -> Vec<FeatureTemplate> {
    let mut templates = alloc::vec![FeatureTemplate::Emission];
    templates.extend((2..=order).map(|span| FeatureTemplate::Transition { span }));
    templates
}

fn check_clique(input: &SequenceInput, anchor: usize, width: usize) -> Result<()> {
    if width == 0 || anchor + width > input.len() {
        return Err(Error::Range(alloc::format!(
            "clique at {anchor} of width {width} does not fit a sequence of length {}",
            input.len()
        )));
    }
    Ok(())
}

/// Calls `visit` with the index of every indicator feature owned by the clique,
/// in a fixed order. Spans longer than the clique contribute nothing.
#[inline]
pub(crate) fn visit_clique_features(
    input: &SequenceInput,
    anchor: usize,
    states: &[State],
    templates: &[FeatureTemplate],
    dimension: usize,
    mut visit: impl FnMut(usize),
) {
    let width = states.len();
    let first_owned = if anchor == 0 { 0 } else { width - 1 };
    let dim = dimension as u64;
    for local in first_owned..width {
        let position = anchor + local;
        for &template in templates {
            match template {
                FeatureTemplate::Emission => {
                    let start = hash_start(template);
                    let state = u64::from(states[local]);
                    for &key in input.token(position) {
                        let h = hash_step(hash_step(start, key), state);
                        visit((h % dim) as usize);
                    }
                }
                FeatureTemplate::Transition { span } => {
                    if span == 0 || span > local + 1 {
                        continue;
                    }
                    let h = states[local + 1 - span..=local]
                        .iter()
                        .fold(hash_start(template), |h, &s| hash_step(h, u64::from(s)));
                    visit((h % dim) as usize);
                }
                FeatureTemplate::GridUnary | FeatureTemplate::GridPairwise => {}
            }
        }
    }
}

/// Score of one clique under an arbitrary weight view; same summation order as
/// `score_clique`.
#[inline]
pub(crate) fn clique_score_with<W: WeightView + ?Sized>(
    weights: &W,
    templates: &[FeatureTemplate],
    dimension: usize,
    input: &SequenceInput,
    anchor: usize,
    states: &[State],
) -> f64 {
    let mut total = 0.0;
    visit_clique_features(input, anchor, states, templates, dimension, |i| {
        total += weights.weight(i)
    });
    total
}

/// Sparse indicator features owned by `clique` (see module docs for ownership).
pub fn featurize_clique(
    input: &SequenceInput,
    clique: &CliqueAssignment,
    templates: &[FeatureTemplate],
    dimension: usize,
) -> Result<FeatureVector> {
    check_clique(input, clique.position, clique.states.len())?;
    if templates.is_empty() {
        return Ok(FeatureVector::empty(0));
    }
    let mut entries = Vec::new();
    visit_clique_features(
        input,
        clique.position,
        &clique.states,
        templates,
        dimension,
        |i| entries.push((i, 1.0)),
    );
    FeatureVector::from_unsorted(entries, dimension)
}

pub fn score_clique(
    model: &LinearModel,
    input: &SequenceInput,
    clique: &CliqueAssignment,
) -> Result<f64> {
    check_clique(input, clique.position, clique.states.len())?;
    Ok(clique_score_with(
        model.weights(),
        model.templates(),
        model.dimension(),
        input,
        clique.position,
        &clique.states,
    ))
}

fn check_output(input: &SequenceInput, output: &Output) -> Result<()> {
    if output.len() != input.len() {
        return Err(Error::Shape(alloc::format!(
            "output has {} labels but input has {} positions",
            output.len(),
            input.len()
        )));
    }
    if input.is_empty() {
        return Err(Error::Empty("sequence of length 0".into()));
    }
    Ok(())
}

/// Sum of clique scores at clique size `order` (clamped to the sequence length),
/// accumulated left to right.
pub fn score_output_at_order<W: WeightView + ?Sized>(
    weights: &W,
    templates: &[FeatureTemplate],
    dimension: usize,
    input: &SequenceInput,
    output: &Output,
    order: usize,
) -> Result<f64> {
    check_output(input, output)?;
    let width = order.clamp(1, input.len());
    let mut total = 0.0;
    for anchor in 0..=input.len() - width {
        total += clique_score_with(
            weights,
            templates,
            dimension,
            input,
            anchor,
            &output.labels[anchor..anchor + width],
        );
    }
    Ok(total)
}

/// `θᵀ f(x, y)` as the left-to-right sum over the cliques induced by the model order.
pub fn score_output(model: &LinearModel, input: &SequenceInput, output: &Output) -> Result<f64> {
    score_output_at_order(
        model.weights(),
        model.templates(),
        model.dimension(),
        input,
        output,
        model.order(),
    )
}

/// `f(x, y)` accumulated over the cliques of size `order`.
pub fn output_features(
    templates: &[FeatureTemplate],
    dimension: usize,
    input: &SequenceInput,
    output: &Output,
    order: usize,
) -> Result<FeatureVector> {
    check_output(input, output)?;
    let width = order.clamp(1, input.len());
    let mut entries = Vec::new();
    for anchor in 0..=input.len() - width {
        visit_clique_features(
            input,
            anchor,
            &output.labels[anchor..anchor + width],
            templates,
            dimension,
            |i| entries.push((i, 1.0)),
        );
    }
    FeatureVector::from_unsorted(entries, dimension)
}
