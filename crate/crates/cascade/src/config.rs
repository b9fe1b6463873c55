//! Flat `key = value` run configuration.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `levels` | 3 | number of cascade levels |
//! | `initial_order` | 1 | clique size of the first level |
//! | `expansion` | `order` | `order` adds one label per level, `refine` splits every state in two |
//! | `dimension` | 65536 | hashed feature dimension |
//! | `alpha_candidates` | `0,0.2,0.4,0.6,0.8` | starting points of the `α` search |
//! | `epsilon` | 0.01 | dev filtering-loss budget per level |
//! | `measure` | `pruned` | `pruned` counts lost truth cliques, `bound` counts `score ≤ τ` |
//! | `target` | `clique` | `clique` or `subclique` filtering units |
//! | `lambda` | 0 | L2 regularization |
//! | `eta` | 0.1 | constant step size, or `pegasos` |
//! | `epochs` | 5 | passes per level |
//! | `averaging` | `true` | average the iterates |
//! | `margin` | `length` | `length` or a positive constant |
//! | `final_epochs`, `final_eta` | as above | trainer of the final predictor |
//! | `train_alpha` | 0.2 | grid mode: `α` inside the joint training loss |
//! | `decomposition` | `combs` | grid mode: `combs` or `unary` |
//!
//! Blank lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use structcascade_core::ensemble::{Decomposition, GridCascadeConfig};
use structcascade_core::lattice::StateHierarchy;
use structcascade_core::threshold::{FilterTarget, LossMeasure};
use structcascade_core::training::{
    CascadeConfig, Expansion, LevelConfig, MarginMode, StepSchedule, TrainConfig,
};

use crate::{Error, Result};

const KEYS: &[&str] = &[
    "levels",
    "initial_order",
    "expansion",
    "dimension",
    "alpha_candidates",
    "epsilon",
    "measure",
    "target",
    "lambda",
    "eta",
    "epochs",
    "averaging",
    "margin",
    "final_epochs",
    "final_eta",
    "train_alpha",
    "decomposition",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub levels: usize,
    pub initial_order: usize,
    pub refine: bool,
    pub dimension: usize,
    pub alpha_candidates: Vec<f64>,
    pub epsilon: f64,
    pub measure: LossMeasure,
    pub target: FilterTarget,
    pub train: TrainConfig,
    pub final_train: TrainConfig,
    pub train_alpha: f64,
    pub decomposition: Decomposition,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            levels: 3,
            initial_order: 1,
            refine: false,
            dimension: 1 << 16,
            alpha_candidates: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            epsilon: 0.01,
            measure: LossMeasure::Pruned,
            target: FilterTarget::Clique,
            train,
            final_train: train,
            train_alpha: 0.2,
            decomposition: Decomposition::Combs,
        }
    }
}

fn value<T: FromStr>(key: &str, text: &str) -> Result<T> {
    text.parse()
        .map_err(|_| Error::Invalid(format!("{key} = {text:?}")))
}

fn step(key: &str, text: &str) -> Result<StepSchedule> {
    if text == "pegasos" {
        Ok(StepSchedule::Pegasos)
    } else {
        Ok(StepSchedule::Constant(value(key, text)?))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(text, &[])
    }

    /// Parses `text`, then applies `overrides` (`key=value`) on top of it.
    pub fn parse_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, "expected key = value"))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::parse(i + 1, format!("unknown key {k:?}")));
            }
            if map.insert(k.to_owned(), v.to_owned()).is_some() {
                return Err(Error::parse(i + 1, format!("{k} given twice")));
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("override {o:?} is not key=value")))?;
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(Error::Invalid(format!("unknown key {k:?}")));
            }
            map.insert(k.to_owned(), v.trim().to_owned());
        }
        Self::from_map(&map)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        let mut final_epochs = None;
        let mut final_eta = None;
        for (k, v) in map {
            match k.as_str() {
                "levels" => c.levels = value(k, v)?,
                "initial_order" => c.initial_order = value(k, v)?,
                "expansion" => {
                    c.refine = match v.as_str() {
                        "order" => false,
                        "refine" => true,
                        _ => return Err(Error::Invalid(format!("expansion = {v:?}"))),
                    }
                }
                "dimension" => c.dimension = value(k, v)?,
                "alpha_candidates" => {
                    c.alpha_candidates = v
                        .split(',')
                        .map(|a| value(k, a.trim()))
                        .collect::<Result<_>>()?
                }
                "epsilon" => c.epsilon = value(k, v)?,
                "measure" => {
                    c.measure = match v.as_str() {
                        "pruned" => LossMeasure::Pruned,
                        "bound" => LossMeasure::Bound,
                        _ => return Err(Error::Invalid(format!("measure = {v:?}"))),
                    }
                }
                "target" => {
                    c.target = match v.as_str() {
                        "clique" => FilterTarget::Clique,
                        "subclique" => FilterTarget::SubClique,
                        _ => return Err(Error::Invalid(format!("target = {v:?}"))),
                    }
                }
                "lambda" => c.train.lambda = value(k, v)?,
                "eta" => c.train.eta = step(k, v)?,
                "epochs" => c.train.epochs = value(k, v)?,
                "averaging" => c.train.averaging = value(k, v)?,
                "margin" => {
                    c.train.margin = if v == "length" {
                        MarginMode::Length
                    } else {
                        MarginMode::Constant(value(k, v)?)
                    }
                }
                "final_epochs" => final_epochs = Some(value(k, v)?),
                "final_eta" => final_eta = Some(step(k, v)?),
                "train_alpha" => c.train_alpha = value(k, v)?,
                "decomposition" => {
                    c.decomposition = match v.as_str() {
                        "combs" => Decomposition::Combs,
                        "unary" => Decomposition::UnaryOnly,
                        _ => return Err(Error::Invalid(format!("decomposition = {v:?}"))),
                    }
                }
                _ => unreachable!("keys are checked while parsing"),
            }
        }
        c.final_train = TrainConfig {
            epochs: final_epochs.unwrap_or(c.train.epochs),
            eta: final_eta.unwrap_or(c.train.eta),
            ..c.train
        };
        if c.levels == 0 {
            return Err(Error::Invalid("levels must be at least 1".into()));
        }
        Ok(c)
    }

    /// Binary refinements from the first level's alphabet up to `num_states`.
    fn hierarchies(&self, num_states: usize) -> Result<Vec<StateHierarchy>> {
        if !self.refine {
            return Ok(Vec::new());
        }
        let splits = self.levels - 1;
        let coarse = u32::try_from(splits)
            .ok()
            .and_then(|s| 1usize.checked_shl(s))
            .filter(|&d| num_states.is_multiple_of(d))
            .map(|d| num_states / d)
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "{num_states} states cannot be halved {splits} times"
                ))
            })?;
        Ok((0..splits)
            .map(|i| StateHierarchy::binary_split(coarse << i))
            .collect())
    }

    pub fn cascade_config(&self, num_states: usize, seed: u64) -> Result<CascadeConfig> {
        let hierarchies = self.hierarchies(num_states)?;
        let levels = (0..self.levels)
            .map(|i| {
                let expansion = if i == 0 || !self.refine {
                    Expansion::IncreaseOrder
                } else {
                    Expansion::Refine(hierarchies[i - 1].clone())
                };
                let train = TrainConfig {
                    seed: seed.wrapping_add(i as u64),
                    target: self.target,
                    ..self.train
                };
                LevelConfig {
                    expansion,
                    alpha_candidates: self.alpha_candidates.clone(),
                    epsilon: self.epsilon,
                    measure: self.measure,
                    train,
                }
            })
            .collect();
        let config = CascadeConfig {
            num_states,
            initial_order: self.initial_order,
            dimension: self.dimension,
            levels,
            final_train: TrainConfig {
                seed: seed.wrapping_add(self.levels as u64),
                ..self.final_train
            },
        };
        config.validate()?;
        Ok(config)
    }

    pub fn grid_config(&self, num_states: usize, seed: u64) -> Result<GridCascadeConfig> {
        let mut config =
            GridCascadeConfig::new(num_states, self.hierarchies(num_states)?, self.dimension);
        config.decomposition = self.decomposition;
        config.train = TrainConfig { seed, ..self.train };
        config.train_alpha = self.train_alpha;
        config.alpha_candidates = self.alpha_candidates.clone();
        config.epsilon = self.epsilon;
        Ok(config)
    }
}
