//! Level-by-level cascade training and inference.
//!
//! Every level trains one model per `α` candidate, tunes `α` on the
//! development lattices, filters both splits and lifts the survivors into the
//! next level's output space. A structured perceptron is then trained on the
//! final sparse lattices and used for prediction.

use alloc::vec::Vec;

use super::{
    perceptron_train, train_level, tune_alpha, AlphaChoice, Example, LatticeExample, TrainConfig,
};
use crate::inference::{max_marginals, MaxMarginalTable};
use crate::lattice::{SparseLattice, StateHierarchy};
use crate::losses::filtering_loss_from;
use crate::model::{
    chain_templates, score_output_at_order, LinearModel, Output, SequenceInput, State,
};
use crate::threshold::{cutoff, FilterTarget, FilterUnits, LossMeasure, ThresholdParams};
use crate::{Error, Result};

/// How a level's output space is built from the previous level's survivors.
#[derive(Clone, Debug, PartialEq)]
pub enum Expansion {
    /// Lift order-`d` survivors to order `d + 1`.
    IncreaseOrder,
    /// Split every state into its children; the order is unchanged.
    Refine(StateHierarchy),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelConfig {
    /// Ignored for the first level.
    pub expansion: Expansion,
    pub alpha_candidates: Vec<f64>,
    pub epsilon: f64,
    /// Filtering loss held under `epsilon` when tuning `α`.
    pub measure: LossMeasure,
    pub train: TrainConfig,
}

impl LevelConfig {
    pub fn new(expansion: Expansion, train: TrainConfig) -> Self {
        Self {
            expansion,
            alpha_candidates: alloc::vec![0.0, 0.2, 0.4, 0.6, 0.8],
            epsilon: 0.01,
            measure: LossMeasure::Pruned,
            train,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeConfig {
    /// Size of the label alphabet of the data (the last level's alphabet).
    pub num_states: usize,
    /// Clique size of the first level.
    pub initial_order: usize,
    /// Hashed feature dimension of every model.
    pub dimension: usize,
    pub levels: Vec<LevelConfig>,
    /// Trainer of the final predictor.
    pub final_train: TrainConfig,
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("a cascade needs at least one level".into()));
        }
        if self.num_states == 0 || self.initial_order == 0 || self.dimension == 0 {
            return Err(Error::Config(
                "num_states, initial_order and dimension must be positive".into(),
            ));
        }
        for (i, level) in self.levels.iter().enumerate() {
            if level.alpha_candidates.is_empty() {
                return Err(Error::Config(alloc::format!(
                    "level {i} has no alpha candidates"
                )));
            }
            for &a in &level.alpha_candidates {
                ThresholdParams::new(a)?;
            }
            if !(0.0..=1.0).contains(&level.epsilon) {
                return Err(Error::Config(alloc::format!(
                    "level {i} tolerance {} outside [0, 1]",
                    level.epsilon
                )));
            }
            level.train.validate()?;
        }
        self.final_train.validate()?;
        self.shapes().map(|_| ())
    }

    /// `(order, alphabet size, fine-to-level label map)` of every level.
    fn shapes(&self) -> Result<Vec<(usize, usize, Vec<State>)>> {
        let n = self.levels.len();
        let mut maps: Vec<Vec<State>> = alloc::vec![Vec::new(); n];
        let mut sizes = alloc::vec![0usize; n];
        maps[n - 1] = (0..self.num_states as State).collect();
        sizes[n - 1] = self.num_states;
        for i in (1..n).rev() {
            match &self.levels[i].expansion {
                Expansion::IncreaseOrder => {
                    maps[i - 1] = maps[i].clone();
                    sizes[i - 1] = sizes[i];
                }
                Expansion::Refine(h) => {
                    if h.fine_size() != sizes[i] {
                        return Err(Error::Config(alloc::format!(
                            "level {i} refines into {} states but needs {}",
                            h.fine_size(),
                            sizes[i]
                        )));
                    }
                    maps[i - 1] = maps[i].iter().map(|&s| h.parent(s)).collect();
                    sizes[i - 1] = h.coarse_size();
                }
            }
        }
        let mut order = self.initial_order;
        let mut out = Vec::with_capacity(n);
        for (i, (map, size)) in maps.into_iter().zip(sizes).enumerate() {
            if i > 0 && self.levels[i].expansion == Expansion::IncreaseOrder {
                order += 1;
            }
            out.push((order, size, map));
        }
        Ok(out)
    }
}

/// Dataset-level statistics of one level.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LevelMetrics {
    /// Threshold of the level; 0 for the final predictor, which does not filter.
    pub alpha: f64,
    /// Mean `1[score(y) ≤ τ]` over examples whose truth reached the level.
    pub filter_loss: f64,
    /// Fraction of those examples whose truth was actually pruned.
    pub pruned_loss: f64,
    /// Mean fraction of filtering units kept.
    pub efficiency_loss: f64,
    /// Mean size of the filtered lattice relative to the full space of the level.
    pub density: f64,
    /// Accuracy of the level's own MAP decode against the level's labels.
    pub token_accuracy: f64,
    pub sequence_accuracy: f64,
    pub examples: usize,
    /// Examples whose truth is gone after this level, cumulatively.
    pub truth_lost: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedLevel {
    pub model: LinearModel,
    pub alpha: f64,
    pub order: usize,
    pub num_states: usize,
    pub expansion: Expansion,
    pub target: FilterTarget,
    pub measure: LossMeasure,
    /// Fine label to this level's label.
    pub label_map: Vec<State>,
    pub dev: LevelMetrics,
    /// Training examples excluded because an earlier level pruned their truth.
    pub dropped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedCascade {
    pub num_states: usize,
    pub levels: Vec<TrainedLevel>,
    pub final_model: LinearModel,
    pub final_dev: LevelMetrics,
    pub final_dropped: usize,
}

/// One example pushed through every level.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeRun {
    /// Surviving assignments per anchor after each level's filter.
    pub survivors: Vec<Vec<usize>>,
    pub prediction: Output,
    /// Lattice handed to the final predictor.
    pub final_lattice: SparseLattice,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CascadeReport {
    pub levels: Vec<LevelMetrics>,
    pub final_metrics: LevelMetrics,
    pub runs: Vec<CascadeRun>,
}

fn map_output(output: &Output, map: &[State]) -> Output {
    Output::new(output.labels.iter().map(|&l| map[l as usize]).collect())
}

fn initial_lattice(length: usize, num_states: usize, order: usize) -> Result<SparseLattice> {
    if length == 0 {
        return Err(Error::Empty("sequence of length 0".into()));
    }
    SparseLattice::full(length, num_states, order.min(length))
}

fn lift(lattice: &SparseLattice, expansion: &Expansion) -> Result<SparseLattice> {
    match expansion {
        Expansion::IncreaseOrder if lattice.order() >= lattice.length() => Ok(lattice.clone()),
        Expansion::IncreaseOrder => lattice.expand(),
        Expansion::Refine(h) => lattice.refine(h),
    }
}

/// Filtering one example at one level, with the per-example statistics.
struct Pass {
    filtered: SparseLattice,
    map: Output,
    /// `(bound, pruned)` losses when the truth reached the level.
    losses: Option<(f64, f64)>,
    efficiency_loss: f64,
}

fn level_pass(
    model: &LinearModel,
    alpha: f64,
    target: FilterTarget,
    input: &SequenceInput,
    lattice: &SparseLattice,
    truth: Option<&Output>,
) -> Result<Pass> {
    let table: MaxMarginalTable = max_marginals(model, input, lattice)?;
    let units = FilterUnits::new(&table, target);
    let cut = cutoff(table.global_max(), units.mean(), alpha);
    let keep = units.keep_flags(&table, cut);
    let filtered = lattice.restrict(&keep)?;
    let losses = match truth {
        Some(y) if lattice.contains_output(y) => {
            let s = score_output_at_order(
                model.weights(),
                model.templates(),
                model.dimension(),
                input,
                y,
                lattice.order(),
            )?;
            Some((
                filtering_loss_from(Some(s), cut),
                f64::from(u8::from(!filtered.contains_output(y))),
            ))
        }
        _ => None,
    };
    Ok(Pass {
        filtered,
        map: table.global_argmax(),
        losses,
        efficiency_loss: units.survival_rate(cut),
    })
}

#[derive(Default)]
struct Tally {
    lf: f64,
    pruned: f64,
    lf_n: usize,
    le: f64,
    density: f64,
    tokens: usize,
    tokens_right: usize,
    sequences_right: usize,
    n: usize,
    lost: usize,
}

impl Tally {
    fn add_prediction(&mut self, predicted: &Output, truth: &Output) {
        let right = predicted
            .labels
            .iter()
            .zip(&truth.labels)
            .filter(|(a, b)| a == b)
            .count();
        self.tokens += truth.len();
        self.tokens_right += right;
        self.sequences_right += usize::from(right == truth.len());
        self.n += 1;
    }

    fn finish(&self, alpha: f64) -> LevelMetrics {
        let n = self.n.max(1) as f64;
        LevelMetrics {
            alpha,
            filter_loss: if self.lf_n == 0 {
                0.0
            } else {
                self.lf / self.lf_n as f64
            },
            pruned_loss: if self.lf_n == 0 {
                0.0
            } else {
                self.pruned / self.lf_n as f64
            },
            efficiency_loss: self.le / n,
            density: self.density / n,
            token_accuracy: if self.tokens == 0 {
                0.0
            } else {
                self.tokens_right as f64 / self.tokens as f64
            },
            sequence_accuracy: self.sequences_right as f64 / n,
            examples: self.n,
            truth_lost: self.lost,
        }
    }
}

fn check_data(data: &[Example], num_states: usize) -> Result<()> {
    for (i, ex) in data.iter().enumerate() {
        if ex.input.len() != ex.truth.len() {
            return Err(Error::Shape(alloc::format!(
                "example {i}: {} tokens but {} labels",
                ex.input.len(),
                ex.truth.len()
            )));
        }
        if ex.input.is_empty() {
            return Err(Error::Empty(alloc::format!("example {i} has no positions")));
        }
        ex.truth.validate(num_states)?;
    }
    Ok(())
}

/// Runs one trained level over a split, returning the filtered lattices and metrics.
fn apply_level(
    level: &TrainedLevel,
    data: &[Example],
    lattices: &[SparseLattice],
    mut survivors: Option<&mut Vec<Vec<Vec<usize>>>>,
) -> Result<(Vec<SparseLattice>, LevelMetrics)> {
    let mut tally = Tally::default();
    let mut out = Vec::with_capacity(data.len());
    for (i, (ex, lattice)) in data.iter().zip(lattices).enumerate() {
        let truth = map_output(&ex.truth, &level.label_map);
        let pass = level_pass(
            &level.model,
            level.alpha,
            level.target,
            &ex.input,
            lattice,
            Some(&truth),
        )?;
        if let Some((bound, pruned)) = pass.losses {
            tally.lf += bound;
            tally.pruned += pruned;
            tally.lf_n += 1;
        }
        tally.le += pass.efficiency_loss;
        tally.density += pass.filtered.density();
        tally.lost += usize::from(!pass.filtered.contains_output(&truth));
        tally.add_prediction(&pass.map, &truth);
        if let Some(s) = survivors.as_deref_mut() {
            s[i].push(
                (0..pass.filtered.num_anchors())
                    .map(|j| pass.filtered.codes(j).len())
                    .collect(),
            );
        }
        out.push(pass.filtered);
    }
    Ok((out, tally.finish(level.alpha)))
}

fn lattice_examples(
    data: &[Example],
    lattices: &[SparseLattice],
    map: &[State],
) -> (Vec<LatticeExample>, usize) {
    let mut kept = Vec::new();
    let mut dropped = 0;
    for (ex, lattice) in data.iter().zip(lattices) {
        let truth = map_output(&ex.truth, map);
        if lattice.contains_output(&truth) {
            kept.push(LatticeExample {
                input: ex.input.clone(),
                truth,
                lattice: lattice.clone(),
            });
        } else {
            dropped += 1;
        }
    }
    (kept, dropped)
}

/// Trains every level, then the final predictor on the surviving lattices.
pub fn train_cascade(
    train: &[Example],
    dev: &[Example],
    config: &CascadeConfig,
) -> Result<TrainedCascade> {
    config.validate()?;
    check_data(train, config.num_states)?;
    check_data(dev, config.num_states)?;
    if dev.is_empty() {
        return Err(Error::Empty("development set".into()));
    }
    let shapes = config.shapes()?;
    let (order0, k0, _) = &shapes[0];
    let init = |data: &[Example]| -> Result<Vec<SparseLattice>> {
        data.iter()
            .map(|ex| initial_lattice(ex.input.len(), *k0, *order0))
            .collect()
    };
    let mut train_lat = init(train)?;
    let mut dev_lat = init(dev)?;
    let mut levels: Vec<TrainedLevel> = Vec::with_capacity(config.levels.len());

    for (i, (level_cfg, (order, k, map))) in config.levels.iter().zip(shapes).enumerate() {
        if i > 0 {
            train_lat = train_lat
                .iter()
                .map(|l| lift(l, &level_cfg.expansion))
                .collect::<Result<_>>()?;
            dev_lat = dev_lat
                .iter()
                .map(|l| lift(l, &level_cfg.expansion))
                .collect::<Result<_>>()?;
        }
        let (train_ex, dropped) = lattice_examples(train, &train_lat, &map);
        let (dev_ex, _) = lattice_examples(dev, &dev_lat, &map);
        if dropped > 0 {
            log::info!(
                "level {i}: {dropped} training examples lost their truth earlier and are dropped"
            );
        }
        let target = level_cfg.train.target;
        let zero = LinearModel::new(chain_templates(order), config.dimension);
        let mut best: Option<(LinearModel, AlphaChoice)> = None;
        for &candidate in &level_cfg.alpha_candidates {
            let params = ThresholdParams::new(candidate)?;
            let model = train_level(&zero, &train_ex, params, &level_cfg.train)?;
            let choice = if dev_ex.is_empty() {
                AlphaChoice {
                    alpha: 0.0,
                    filter_loss: 0.0,
                    efficiency_loss: 1.0,
                }
            } else {
                tune_alpha(
                    &model,
                    &dev_ex,
                    &level_cfg.alpha_candidates,
                    level_cfg.epsilon,
                    target,
                    level_cfg.measure,
                )?
            };
            log::info!(
                "level {i}, trained at alpha {candidate}: tuned alpha {:.4}, dev filter {:.4}, efficiency {:.4}",
                choice.alpha,
                choice.filter_loss,
                choice.efficiency_loss
            );
            let better = match &best {
                None => true,
                Some((_, b)) => {
                    let feasible = choice.filter_loss <= level_cfg.epsilon;
                    let best_feasible = b.filter_loss <= level_cfg.epsilon;
                    match (feasible, best_feasible) {
                        (true, false) => true,
                        (false, true) => false,
                        (true, true) => choice.efficiency_loss < b.efficiency_loss,
                        (false, false) => choice.filter_loss < b.filter_loss,
                    }
                }
            };
            if better {
                best = Some((model, choice));
            }
        }
        let (model, choice) = best.expect("at least one candidate");
        let mut level = TrainedLevel {
            model,
            alpha: choice.alpha,
            order,
            num_states: k,
            expansion: level_cfg.expansion.clone(),
            target,
            measure: level_cfg.measure,
            label_map: map,
            dev: LevelMetrics::default(),
            dropped,
        };
        let (filtered_dev, dev_metrics) = apply_level(&level, dev, &dev_lat, None)?;
        level.dev = dev_metrics;
        let (filtered_train, _) = apply_level(&level, train, &train_lat, None)?;
        train_lat = filtered_train;
        dev_lat = filtered_dev;
        levels.push(level);
    }

    let last = levels.last().expect("validated nonempty");
    let identity: Vec<State> = (0..config.num_states as State).collect();
    let (final_ex, final_dropped) = lattice_examples(train, &train_lat, &identity);
    let final_model = perceptron_train(
        &LinearModel::new(chain_templates(last.order), config.dimension),
        &final_ex,
        &config.final_train,
    )?;
    let mut cascade = TrainedCascade {
        num_states: config.num_states,
        levels,
        final_model,
        final_dev: LevelMetrics::default(),
        final_dropped,
    };
    cascade.final_dev = final_metrics(&cascade, dev, &dev_lat, None)?;
    Ok(cascade)
}

fn final_metrics(
    cascade: &TrainedCascade,
    data: &[Example],
    lattices: &[SparseLattice],
    mut predictions: Option<&mut Vec<Output>>,
) -> Result<LevelMetrics> {
    let mut tally = Tally::default();
    for (ex, lattice) in data.iter().zip(lattices) {
        let (predicted, _) =
            crate::inference::map_decode(&cascade.final_model, &ex.input, lattice)?;
        tally.density += lattice.density();
        tally.lost += usize::from(!lattice.contains_output(&ex.truth));
        tally.add_prediction(&predicted, &ex.truth);
        if let Some(p) = predictions.as_deref_mut() {
            p.push(predicted);
        }
    }
    Ok(tally.finish(0.0))
}

impl TrainedCascade {
    fn check(&self) -> Result<()> {
        let last = self
            .levels
            .last()
            .ok_or_else(|| Error::Config("cascade has no levels".into()))?;
        if last.num_states != self.num_states {
            return Err(Error::Config(
                "last level alphabet differs from the cascade alphabet".into(),
            ));
        }
        Ok(())
    }

    fn first_lattice(&self, length: usize) -> Result<SparseLattice> {
        let first = &self.levels[0];
        initial_lattice(length, first.num_states, first.order)
    }
}

/// Filters one input through every level and decodes with the final predictor.
pub fn run_cascade(cascade: &TrainedCascade, input: &SequenceInput) -> Result<CascadeRun> {
    cascade.check()?;
    let mut lattice = cascade.first_lattice(input.len())?;
    let mut survivors = Vec::with_capacity(cascade.levels.len());
    for (i, level) in cascade.levels.iter().enumerate() {
        if i > 0 {
            lattice = lift(&lattice, &level.expansion)?;
        }
        lattice = level_pass(
            &level.model,
            level.alpha,
            level.target,
            input,
            &lattice,
            None,
        )?
        .filtered;
        survivors.push(
            (0..lattice.num_anchors())
                .map(|j| lattice.codes(j).len())
                .collect(),
        );
    }
    let (prediction, _) = crate::inference::map_decode(&cascade.final_model, input, &lattice)?;
    Ok(CascadeRun {
        survivors,
        prediction,
        final_lattice: lattice,
    })
}

/// Per-level and final metrics of a trained cascade on labelled data.
pub fn evaluate_cascade(cascade: &TrainedCascade, data: &[Example]) -> Result<CascadeReport> {
    cascade.check()?;
    check_data(data, cascade.num_states)?;
    let mut lattices: Vec<SparseLattice> = data
        .iter()
        .map(|ex| cascade.first_lattice(ex.input.len()))
        .collect::<Result<_>>()?;
    let mut survivors: Vec<Vec<Vec<usize>>> = alloc::vec![Vec::new(); data.len()];
    let mut levels = Vec::with_capacity(cascade.levels.len());
    for (i, level) in cascade.levels.iter().enumerate() {
        if i > 0 {
            lattices = lattices
                .iter()
                .map(|l| lift(l, &level.expansion))
                .collect::<Result<_>>()?;
        }
        let (filtered, metrics) = apply_level(level, data, &lattices, Some(&mut survivors))?;
        lattices = filtered;
        levels.push(metrics);
    }
    let mut predictions = Vec::with_capacity(data.len());
    let final_metrics = final_metrics(cascade, data, &lattices, Some(&mut predictions))?;
    let runs = survivors
        .into_iter()
        .zip(predictions)
        .zip(lattices)
        .map(|((survivors, prediction), final_lattice)| CascadeRun {
            survivors,
            prediction,
            final_lattice,
        })
        .collect();
    Ok(CascadeReport {
        levels,
        final_metrics,
        runs,
    })
}
