//! Seeded synthetic tasks: planted higher-order sequences, random grid MRFs
//! and labelled grid tasks. Every generator is a pure function of its seed.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use structcascade_core::ensemble::{GridModel, GridShape};
use structcascade_core::model::State;

use crate::dataset::{GridDataset, SequenceDataset, Token};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct HmmConfig {
    /// Clique size of the planted chain: each label depends on the previous `order - 1`.
    pub order: usize,
    pub num_states: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub count: usize,
    /// Transition logits are `scale` times a unit-variance sum of one
    /// `N(0, 1)` term per suffix of the context.
    pub scale: f64,
    /// Probability that the exact-label key shows a uniformly random label.
    pub noise: f64,
    /// States per coarse group key; `0` emits no group key.
    pub group: usize,
    /// Seed of the planted transition tables.
    pub generator_seed: u64,
    /// Seed of the sampled sequences.
    pub seed: u64,
}

impl Default for HmmConfig {
    fn default() -> Self {
        Self {
            order: 2,
            num_states: 4,
            min_len: 5,
            max_len: 12,
            count: 100,
            scale: 2.0,
            noise: 0.3,
            group: 2,
            generator_seed: 0,
            seed: 0,
        }
    }
}

/// The planted chain behind a synthetic sequence task.
#[derive(Clone, Debug, PartialEq)]
pub struct HmmGenerator {
    pub order: usize,
    pub num_states: usize,
    /// `transitions[context][next]`, context = previous `order - 1` labels in base K, oldest first.
    pub transitions: Vec<Vec<f64>>,
    pub noise: f64,
    pub group: usize,
}

impl HmmGenerator {
    pub fn new(
        order: usize,
        num_states: usize,
        scale: f64,
        noise: f64,
        group: usize,
        seed: u64,
    ) -> Result<Self> {
        if order == 0 || num_states == 0 {
            return Err(Error::Invalid(
                "order and number of states must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&noise) || !scale.is_finite() {
            return Err(Error::Invalid(format!(
                "noise {noise} or scale {scale} out of range"
            )));
        }
        let contexts = num_states
            .checked_pow(order as u32 - 1)
            .filter(|&c| c <= 1 << 20)
            .ok_or_else(|| Error::Invalid("transition table too large".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // One Gaussian table per context suffix length; a context's logits sum
        // the rows of all its suffixes.
        let suffix_tables: Vec<Vec<f64>> = (1..order)
            .map(|s| {
                let rows = num_states.pow(s as u32);
                (0..rows * num_states)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let norm = ((order - 1).max(1) as f64).sqrt();
        let transitions = (0..contexts)
            .map(|c| {
                let logits: Vec<f64> = (0..num_states)
                    .map(|y| {
                        let sum: f64 = suffix_tables
                            .iter()
                            .enumerate()
                            .map(|(i, t)| t[(c % num_states.pow(i as u32 + 1)) * num_states + y])
                            .sum();
                        scale * sum / norm
                    })
                    .collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = exp.iter().sum();
                exp.into_iter().map(|e| e / z).collect()
            })
            .collect();
        Ok(Self {
            order,
            num_states,
            transitions,
            noise,
            group,
        })
    }

    fn context(&self, labels: &[State]) -> usize {
        labels[labels.len() + 1 - self.order..]
            .iter()
            .fold(0, |c, &l| c * self.num_states + l as usize)
    }

    /// Samples one labelled sequence.
    pub fn sample(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<Token> {
        let k = self.num_states;
        let dists: Vec<WeightedIndex<f64>> = self
            .transitions
            .iter()
            .map(|p| WeightedIndex::new(p).expect("normalized weights"))
            .collect();
        let mut labels: Vec<State> = Vec::with_capacity(len);
        for j in 0..len {
            let next = if j + 1 < self.order {
                rng.random_range(0..k as State)
            } else {
                dists[self.context(&labels)].sample(rng) as State
            };
            labels.push(next);
        }
        labels.iter().map(|&l| self.emit(l, rng)).collect()
    }

    fn emit(&self, label: State, rng: &mut ChaCha8Rng) -> Token {
        let mut keys = Vec::with_capacity(2);
        if let Some(g) = (label as usize).checked_div(self.group) {
            keys.push(format!("g{g}"));
        }
        let shown = if rng.random_bool(self.noise) {
            rng.random_range(0..self.num_states as State)
        } else {
            label
        };
        keys.push(format!("w{shown}"));
        Token { label, keys }
    }
}

/// Samples `count` sequences from a planted chain.
pub fn synth_hmm(config: &HmmConfig) -> Result<(SequenceDataset, HmmGenerator)> {
    if config.min_len == 0 || config.min_len > config.max_len {
        return Err(Error::Invalid(format!(
            "length range {}..={} is empty",
            config.min_len, config.max_len
        )));
    }
    let generator = HmmGenerator::new(
        config.order,
        config.num_states,
        config.scale,
        config.noise,
        config.group,
        config.generator_seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let examples = (0..config.count)
        .map(|_| {
            let len = rng.random_range(config.min_len..=config.max_len);
            generator.sample(len, &mut rng)
        })
        .collect();
    Ok((
        SequenceDataset {
            num_states: config.num_states,
            examples,
        },
        generator,
    ))
}

/// A grid MRF with an optional labelling.
#[derive(Clone, Debug, PartialEq)]
pub struct GridInstance {
    pub model: GridModel,
    pub truth: Option<Vec<State>>,
}

/// Unary potentials uniform on (0, 1] and pairwise potentials `exp(-v)`,
/// `v ~ U[-25, 25]`; stored as log-potentials.
pub fn synth_grid(rows: usize, cols: usize, num_states: usize, seed: u64) -> Result<GridInstance> {
    let shape = GridShape::new(rows, cols)?;
    if num_states == 0 {
        return Err(Error::Invalid("a grid needs at least one state".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unary = (0..shape.num_nodes() * num_states)
        .map(|_| (1.0 - rng.random::<f64>()).ln())
        .collect();
    let pairwise = (0..shape.num_edges() * num_states * num_states)
        .map(|_| -rng.random_range(-25.0..=25.0))
        .collect();
    Ok(GridInstance {
        model: GridModel::new(shape, num_states, unary, pairwise)?,
        truth: None,
    })
}

const SAMPLE_LIMIT: u128 = 1_000_000;

fn for_each_labelling(n: usize, k: usize, mut visit: impl FnMut(&[State])) {
    let mut y = vec![0 as State; n];
    loop {
        visit(&y);
        let mut v = 0;
        while v < n {
            y[v] += 1;
            if (y[v] as usize) < k {
                break;
            }
            y[v] = 0;
            v += 1;
        }
        if v == n {
            return;
        }
    }
}

/// Exact sample from `p(y) ∝ exp(score(y))` by enumeration.
pub fn sample_grid(model: &GridModel, rng: &mut ChaCha8Rng) -> Result<Vec<State>> {
    let n = model.shape.num_nodes();
    let total = (model.num_states as u128)
        .checked_pow(n as u32)
        .unwrap_or(u128::MAX);
    if total > SAMPLE_LIMIT {
        return Err(structcascade_core::Error::TooLarge(total).into());
    }
    let k = model.num_states;
    let mut max = f64::NEG_INFINITY;
    for_each_labelling(n, k, |y| {
        max = max.max(model.score(y).expect("valid labelling"))
    });
    let mut z = 0.0;
    for_each_labelling(n, k, |y| {
        z += (model.score(y).expect("valid labelling") - max).exp()
    });
    let target = rng.random::<f64>() * z;
    let (mut acc, mut chosen, mut last) = (0.0, None, vec![0; n]);
    for_each_labelling(n, k, |y| {
        if chosen.is_some() {
            return;
        }
        acc += (model.score(y).expect("valid labelling") - max).exp();
        last.copy_from_slice(y);
        if acc > target {
            chosen = Some(y.to_vec());
        }
    });
    Ok(chosen.unwrap_or(last))
}

impl GridInstance {
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut out = format!(
            "#GRIDMODEL rows={} cols={} K={}\n",
            m.shape.rows, m.shape.cols, m.num_states
        );
        let line = |out: &mut String, name: &str, values: &[f64]| {
            out.push_str(name);
            for v in values {
                write!(out, " {v:?}").expect("writing to a String");
            }
            out.push('\n');
        };
        line(&mut out, "unary", &m.unary);
        line(&mut out, "pairwise", &m.pairwise);
        if let Some(t) = &self.truth {
            out.push_str("truth");
            for s in t {
                write!(out, " {s}").expect("writing to a String");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(1, "missing #GRIDMODEL header"))?;
        let field = |key: &str| -> Result<usize> {
            header
                .split_whitespace()
                .find_map(|p| p.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::parse(1, format!("header lacks a valid {key}=")))
        };
        if !header.starts_with("#GRIDMODEL") {
            return Err(Error::parse(
                1,
                "first line must be #GRIDMODEL rows=<r> cols=<c> K=<k>",
            ));
        }
        let shape = GridShape::new(field("rows")?, field("cols")?)?;
        let k = field("K")?;
        let (mut unary, mut pairwise, mut truth) = (None, None, None);
        for (i, line) in lines {
            let mut parts = line.split_whitespace();
            let name = parts.next().unwrap_or_default();
            let floats = |parts: std::str::SplitWhitespace| -> Result<Vec<f64>> {
                parts
                    .map(|p| {
                        p.parse()
                            .map_err(|_| Error::parse(i + 1, format!("{p:?} is not a number")))
                    })
                    .collect()
            };
            match name {
                "unary" => unary = Some(floats(parts)?),
                "pairwise" => pairwise = Some(floats(parts)?),
                "truth" => {
                    truth = Some(
                        parts
                            .map(|p| {
                                p.parse().map_err(|_| {
                                    Error::parse(i + 1, format!("{p:?} is not a state"))
                                })
                            })
                            .collect::<Result<Vec<State>>>()?,
                    )
                }
                other => return Err(Error::parse(i + 1, format!("unknown section {other:?}"))),
            }
        }
        let unary =
            unary.ok_or_else(|| Error::Format("grid model lacks unary potentials".into()))?;
        let pairwise =
            pairwise.ok_or_else(|| Error::Format("grid model lacks pairwise potentials".into()))?;
        let model = GridModel::new(shape, k, unary, pairwise)?;
        if let Some(t) = &truth {
            if t.len() != shape.num_nodes() || t.iter().any(|&s| s as usize >= k) {
                return Err(Error::Format("truth does not fit the grid".into()));
            }
        }
        Ok(Self { model, truth })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridTaskConfig {
    pub rows: usize,
    pub cols: usize,
    pub num_states: usize,
    pub count: usize,
    /// Probability that the exact-label key shows a uniformly random label.
    pub noise: f64,
    /// States per coarse group key; `0` emits no group key.
    pub group: usize,
    pub seed: u64,
}

/// Labelled grids made of up to four constant rectangles; every node shows
/// its group key and a noisy copy of its label.
pub fn synth_grid_task(config: &GridTaskConfig) -> Result<GridDataset> {
    let shape = GridShape::new(config.rows, config.cols)?;
    let k = config.num_states;
    if k == 0 || !(0.0..=1.0).contains(&config.noise) {
        return Err(Error::Invalid(
            "grid task needs states and a noise rate in [0, 1]".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let examples = (0..config.count)
        .map(|_| {
            let regions: [State; 4] = std::array::from_fn(|_| rng.random_range(0..k as State));
            let (split_r, split_c) = (
                rng.random_range(0..=config.rows),
                rng.random_range(0..=config.cols),
            );
            (0..shape.num_nodes())
                .map(|v| {
                    let (r, c) = (v / config.cols, v % config.cols);
                    let label = regions[usize::from(r >= split_r) * 2 + usize::from(c >= split_c)];
                    let mut keys = Vec::with_capacity(2);
                    if let Some(g) = (label as usize).checked_div(config.group) {
                        keys.push(format!("g{g}"));
                    }
                    let shown = if rng.random_bool(config.noise) {
                        rng.random_range(0..k as State)
                    } else {
                        label
                    };
                    keys.push(format!("w{shown}"));
                    Token { label, keys }
                })
                .collect()
        })
        .collect();
    Ok(GridDataset {
        shape,
        num_states: k,
        examples,
    })
}
