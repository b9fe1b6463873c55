//! Stochastic subgradient steps on the regularized filtering hinge.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::scaled::ScaledWeights;
use super::{check_examples, epoch_order, LatticeExample, TrainConfig};
use crate::inference::{clique_scores_with, max_marginals_from_scores, MaxMarginalTable};
use crate::lattice::decode;
use crate::model::{
    score_output_at_order, visit_clique_features, FeatureTemplate, LinearModel, WeightView,
};
use crate::threshold::{mean_max, FilterTarget, FilterUnits, ThresholdParams};
use crate::{Error, Result};

/// Hinge value and the sparse ascent direction
/// `f(y) − α f(y*) − (1−α)/|U| Σ_u f(wit(u))` (empty when the hinge is 0).
pub(crate) struct HingeTerms {
    pub hinge: f64,
    pub direction: Vec<(usize, f64)>,
}

pub(crate) fn hinge_terms<W: WeightView + ?Sized>(
    weights: &W,
    templates: &[FeatureTemplate],
    dimension: usize,
    ex: &LatticeExample,
    alpha: f64,
    target: FilterTarget,
    margin: f64,
) -> Result<HingeTerms> {
    let scores = clique_scores_with(weights, templates, dimension, &ex.input, &ex.lattice);
    let table = max_marginals_from_scores(&ex.lattice, &scores)?;
    let units = FilterUnits::new(&table, target);
    let tau = mean_max(table.global_max(), units.mean(), alpha);
    let truth = score_output_at_order(
        weights,
        templates,
        dimension,
        &ex.input,
        &ex.truth,
        ex.lattice.order(),
    )?;
    let hinge = (margin + tau - truth).max(0.0);
    if hinge == 0.0 {
        return Ok(HingeTerms {
            hinge,
            direction: Vec::new(),
        });
    }
    let mut direction = Vec::new();
    let order = ex.lattice.order();
    for j in 0..ex.lattice.num_anchors() {
        visit_clique_features(
            &ex.input,
            j,
            &ex.truth.labels[j..j + order],
            templates,
            dimension,
            |i| direction.push((i, 1.0)),
        );
    }
    let coefficients = node_coefficients(&table, &units, alpha);
    let k = table.num_states();
    for j in 0..table.num_anchors() {
        for (a, &code) in table.codes(j).iter().enumerate() {
            let c = coefficients[table.node_of(j, a)];
            if c != 0.0 {
                let states = decode(code, order, k);
                visit_clique_features(&ex.input, j, &states, templates, dimension, |i| {
                    direction.push((i, c))
                });
            }
        }
    }
    Ok(HingeTerms { hinge, direction })
}

/// Per-node weight of `−α f(y*) − (1−α)/|U| Σ_u f(wit(u))`.
fn node_coefficients(table: &MaxMarginalTable, units: &FilterUnits, alpha: f64) -> Vec<f64> {
    let mut counts = alloc::vec![0u32; table.len()];
    for &node in &units.witness_node {
        for (j, &a) in table.witness_path_of_node(node).iter().enumerate() {
            counts[table.node_of(j, a as usize)] += 1;
        }
    }
    let per_unit = (1.0 - alpha) / units.len() as f64;
    let mut coefficients: Vec<f64> = counts.iter().map(|&c| -per_unit * f64::from(c)).collect();
    for (j, &a) in table
        .witness_path_of_node(table.argmax_node())
        .iter()
        .enumerate()
    {
        coefficients[table.node_of(j, a as usize)] -= alpha;
    }
    coefficients
}

fn check_model(model: &LinearModel, ex: &LatticeExample) -> Result<()> {
    check_examples(core::slice::from_ref(ex))?;
    if model.dimension() == 0 && !model.templates().is_empty() {
        return Err(Error::Config("model has templates but no weights".into()));
    }
    Ok(())
}

/// `(θ_{t+1} − θ_t) / η`: the negative subgradient of
/// `λ/2‖θ‖² + H(θ)` used by [`sc_step`].
pub fn sc_direction(
    model: &LinearModel,
    ex: &LatticeExample,
    params: ThresholdParams,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    check_model(model, ex)?;
    let terms = hinge_terms(
        model.weights(),
        model.templates(),
        model.dimension(),
        ex,
        params.alpha(),
        config.target,
        config.margin_for(ex.input.len()),
    )?;
    let mut dir: Vec<f64> = model.weights().iter().map(|w| -config.lambda * w).collect();
    for (i, c) in terms.direction {
        dir[i] += c;
    }
    Ok(dir)
}

/// `λ/2‖θ‖² + max{0, ℓ + τ(x; θ, α) − θᵀf(x, y)}` for one example.
pub fn regularized_objective(
    model: &LinearModel,
    ex: &LatticeExample,
    params: ThresholdParams,
    config: &TrainConfig,
) -> Result<f64> {
    check_model(model, ex)?;
    let terms = hinge_terms(
        model.weights(),
        model.templates(),
        model.dimension(),
        ex,
        params.alpha(),
        config.target,
        config.margin_for(ex.input.len()),
    )?;
    Ok(0.5 * config.lambda * model.norm_sq() + terms.hinge)
}

/// One dense subgradient step at 1-based step index `t`. Returns the hinge
/// before the step.
pub fn sc_step(
    model: &mut LinearModel,
    ex: &LatticeExample,
    params: ThresholdParams,
    config: &TrainConfig,
    t: u64,
) -> Result<f64> {
    config.validate()?;
    check_model(model, ex)?;
    let terms = hinge_terms(
        model.weights(),
        model.templates(),
        model.dimension(),
        ex,
        params.alpha(),
        config.target,
        config.margin_for(ex.input.len()),
    )?;
    let eta = config.step_size(t);
    let shrink = 1.0 - eta * config.lambda;
    let weights = model.weights_mut();
    if shrink != 1.0 {
        weights.iter_mut().for_each(|w| *w *= shrink);
    }
    for &(i, c) in &terms.direction {
        weights[i] += eta * c;
    }
    if let Some(index) = weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::NonFinite { index, step: t });
    }
    Ok(terms.hinge)
}

/// Seeded, shuffled passes of subgradient steps starting from `initial`.
pub fn train_level(
    initial: &LinearModel,
    data: &[LatticeExample],
    params: ThresholdParams,
    config: &TrainConfig,
) -> Result<LinearModel> {
    config.validate()?;
    check_examples(data)?;
    let templates = initial.templates();
    let dimension = initial.dimension();
    let mut weights = ScaledWeights::new(initial.weights().to_vec(), config.averaging);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut touched = Vec::new();
    let mut t = 0u64;
    for epoch in 0..config.epochs {
        let mut total_hinge = 0.0;
        for i in epoch_order(data.len(), &mut rng) {
            t += 1;
            let ex = &data[i];
            let terms = hinge_terms(
                &weights,
                templates,
                dimension,
                ex,
                params.alpha(),
                config.target,
                config.margin_for(ex.input.len()),
            )?;
            total_hinge += terms.hinge;
            let eta = config.step_size(t);
            weights.shrink(1.0 - eta * config.lambda);
            touched.clear();
            for &(index, c) in &terms.direction {
                weights.add(index, eta * c);
                touched.push(index);
            }
            weights.end_step(&touched)?;
        }
        log::debug!(
            "sc epoch {epoch}: mean hinge {}",
            total_hinge / data.len().max(1) as f64
        );
    }
    Ok(LinearModel::from_weights(
        templates.to_vec(),
        weights.finish(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{brute_force_max_marginals, max_marginals};
    use crate::lattice::SparseLattice;
    use crate::losses::hinge;
    use crate::model::{output_features, score_output, Output, SequenceInput};
    use crate::training::{MarginMode, StepSchedule};
    use alloc::vec;
    use rand::Rng;

    fn random_example(rng: &mut ChaCha8Rng, len: usize, k: usize, order: usize) -> LatticeExample {
        let keys: Vec<Vec<alloc::string::String>> = (0..len)
            .map(|_| vec![alloc::format!("w{}", rng.random_range(0..5))])
            .collect();
        let truth = Output::new((0..len).map(|_| rng.random_range(0..k as u32)).collect());
        LatticeExample {
            input: SequenceInput::from_keys(&keys),
            truth,
            lattice: SparseLattice::full(len, k, order).unwrap(),
        }
    }

    fn random_model(rng: &mut ChaCha8Rng, order: usize, dim: usize) -> LinearModel {
        let mut m = LinearModel::chain(order, dim);
        for w in m.weights_mut() {
            *w = rng.random_range(-1.0..1.0);
        }
        m
    }

    fn config(lambda: f64) -> TrainConfig {
        TrainConfig {
            lambda,
            eta: StepSchedule::Constant(0.1),
            averaging: false,
            ..TrainConfig::default()
        }
    }

    /// Independent dense recomputation of the direction from brute-force witnesses.
    fn oracle_direction(
        model: &LinearModel,
        ex: &LatticeExample,
        alpha: f64,
        lambda: f64,
    ) -> Vec<f64> {
        let t = brute_force_max_marginals(model, &ex.input, &ex.lattice).unwrap();
        let tau = alpha * t.global_max() + (1.0 - alpha) * t.mean();
        let s = score_output(model, &ex.input, &ex.truth).unwrap();
        let mut dir: Vec<f64> = model.weights().iter().map(|w| -lambda * w).collect();
        if ex.input.len() as f64 + tau - s <= 0.0 {
            return dir;
        }
        let feats = |y: &Output| {
            output_features(
                model.templates(),
                model.dimension(),
                &ex.input,
                y,
                model.order(),
            )
            .unwrap()
        };
        for &(i, v) in feats(&ex.truth).entries() {
            dir[i] += v;
        }
        for &(i, v) in feats(&t.global_argmax()).entries() {
            dir[i] -= alpha * v;
        }
        let n = t.len() as f64;
        for j in 0..t.num_anchors() {
            for a in 0..t.codes(j).len() {
                for &(i, v) in feats(&t.witness(j, a)).entries() {
                    dir[i] -= (1.0 - alpha) * v / n;
                }
            }
        }
        dir
    }

    #[test]
    fn satisfied_margin_without_regularization_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ex = random_example(&mut rng, 3, 2, 2);
        // Heavily reward the truth so the hinge is 0.
        let mut model = LinearModel::chain(2, 64);
        for f in output_features(model.templates(), 64, &ex.input, &ex.truth, 2)
            .unwrap()
            .entries()
        {
            model.weights_mut()[f.0] += 100.0;
        }
        let before = model.clone();
        let h = sc_step(
            &mut model,
            &ex,
            ThresholdParams::new(0.5).unwrap(),
            &config(0.0),
            1,
        )
        .unwrap();
        assert_eq!(h, 0.0);
        assert_eq!(model, before);
    }

    #[test]
    fn shrink_only_when_margin_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ex = random_example(&mut rng, 3, 2, 2);
        let mut model = LinearModel::chain(2, 64);
        for f in output_features(model.templates(), 64, &ex.input, &ex.truth, 2)
            .unwrap()
            .entries()
        {
            model.weights_mut()[f.0] += 100.0;
        }
        let before = model.clone();
        sc_step(
            &mut model,
            &ex,
            ThresholdParams::new(0.5).unwrap(),
            &config(0.5),
            1,
        )
        .unwrap();
        for (a, b) in model.weights().iter().zip(before.weights()) {
            assert_eq!(*a, b * (1.0 - 0.1 * 0.5));
        }
    }

    #[test]
    fn direction_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let len = rng.random_range(2..5);
            let ex = random_example(&mut rng, len, 3, 2);
            let model = random_model(&mut rng, 2, 97);
            let alpha = rng.random_range(0.0..0.9);
            let dir = sc_direction(
                &model,
                &ex,
                ThresholdParams::new(alpha).unwrap(),
                &config(0.3),
            )
            .unwrap();
            let oracle = oracle_direction(&model, &ex, alpha, 0.3);
            for (a, b) in dir.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn near_one_alpha_is_a_perceptron_step_against_the_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ex = random_example(&mut rng, 4, 3, 2);
        let model = random_model(&mut rng, 2, 97);
        let dir = sc_direction(
            &model,
            &ex,
            ThresholdParams::new(0.999).unwrap(),
            &config(0.0),
        )
        .unwrap();
        let (map, _) = crate::inference::map_decode(&model, &ex.input, &ex.lattice).unwrap();
        let f = |y: &Output| output_features(model.templates(), 97, &ex.input, y, 2).unwrap();
        let mut perceptron = vec![0.0; 97];
        for &(i, v) in f(&ex.truth).entries() {
            perceptron[i] += v;
        }
        for &(i, v) in f(&map).entries() {
            perceptron[i] -= v;
        }
        for (a, b) in dir.iter().zip(&perceptron) {
            assert!((a - b).abs() < 0.01);
        }
    }

    #[test]
    fn finite_difference_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 20 {
            let ex = random_example(&mut rng, 3, 2, 2);
            let model = random_model(&mut rng, 2, 31);
            let p = ThresholdParams::new(rng.random_range(0.0..0.9)).unwrap();
            let cfg = config(0.2);
            let dir = sc_direction(&model, &ex, p, &cfg).unwrap();
            let h = 1e-6;
            let mut fd = vec![0.0; 31];
            let mut smooth = true;
            for (i, slot) in fd.iter_mut().enumerate() {
                let mut plus = model.clone();
                plus.weights_mut()[i] += h;
                let mut minus = model.clone();
                minus.weights_mut()[i] -= h;
                // The objective is piecewise quadratic; skip points where the
                // subgradient changes inside the stencil.
                let same = |m: &LinearModel| {
                    let d = sc_direction(m, &ex, p, &cfg).unwrap();
                    d.iter().zip(&dir).all(|(a, b)| (a - b).abs() < 1e-3)
                };
                smooth &= same(&plus) && same(&minus);
                *slot = -(regularized_objective(&plus, &ex, p, &cfg).unwrap()
                    - regularized_objective(&minus, &ex, p, &cfg).unwrap())
                    / (2.0 * h);
            }
            if !smooth {
                continue;
            }
            let err: f64 = dir
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let norm: f64 = dir.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(
                err <= 1e-4 * norm.max(1e-12),
                "relative error {}",
                err / norm
            );
            checked += 1;
        }
    }

    #[test]
    fn small_step_decreases_the_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..40 {
            let ex = random_example(&mut rng, 4, 3, 2);
            let model = random_model(&mut rng, 2, 61);
            let p = ThresholdParams::new(0.3).unwrap();
            let cfg = TrainConfig {
                eta: StepSchedule::Constant(1e-4),
                ..config(0.1)
            };
            let before = regularized_objective(&model, &ex, p, &cfg).unwrap();
            let mut stepped = model.clone();
            let h = sc_step(&mut stepped, &ex, p, &cfg, 1).unwrap();
            if h > 0.0 {
                assert!(regularized_objective(&stepped, &ex, p, &cfg).unwrap() < before);
            }
        }
    }

    #[test]
    fn train_level_matches_dense_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<LatticeExample> = (0..6).map(|_| random_example(&mut rng, 4, 3, 2)).collect();
        let p = ThresholdParams::new(0.4).unwrap();
        let cfg = TrainConfig {
            lambda: 0.5,
            eta: StepSchedule::Pegasos,
            epochs: 3,
            seed: 9,
            averaging: false,
            ..TrainConfig::default()
        };
        let init = LinearModel::chain(2, 101);
        let trained = train_level(&init, &data, p, &cfg).unwrap();

        let mut dense = init.clone();
        let mut order_rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = 0;
        for _ in 0..3 {
            for i in epoch_order(data.len(), &mut order_rng) {
                t += 1;
                sc_step(&mut dense, &data[i], p, &cfg, t).unwrap();
            }
        }
        for (a, b) in trained.weights().iter().zip(dense.weights()) {
            assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn averaging_is_the_mean_of_iterates() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<LatticeExample> = (0..5).map(|_| random_example(&mut rng, 3, 3, 2)).collect();
        let p = ThresholdParams::new(0.2).unwrap();
        let cfg = TrainConfig {
            lambda: 0.05,
            epochs: 2,
            seed: 3,
            averaging: true,
            ..config(0.05)
        };
        let init = LinearModel::chain(2, 53);
        let trained = train_level(&init, &data, p, &cfg).unwrap();
        let mut dense = init.clone();
        let mut sum = vec![0.0; 53];
        let mut order_rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = 0;
        for _ in 0..2 {
            for i in epoch_order(data.len(), &mut order_rng) {
                t += 1;
                sc_step(&mut dense, &data[i], p, &cfg, t).unwrap();
                sum.iter_mut()
                    .zip(dense.weights())
                    .for_each(|(s, w)| *s += w);
            }
        }
        for (a, s) in trained.weights().iter().zip(&sum) {
            assert!((a - s / t as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_data_gives_the_initial_model_and_runs_are_deterministic() {
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let p = ThresholdParams::new(0.0).unwrap();
        let init = LinearModel::chain(2, 16);
        assert_eq!(train_level(&init, &[], p, &cfg).unwrap(), init);
        assert!(train_level(&init, &[], p, &TrainConfig { epochs: 0, ..cfg }).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<LatticeExample> = (0..8).map(|_| random_example(&mut rng, 4, 3, 2)).collect();
        let cfg = TrainConfig {
            epochs: 3,
            seed: 77,
            ..TrainConfig::default()
        };
        let a = train_level(&LinearModel::chain(2, 128), &data, p, &cfg).unwrap();
        let b = train_level(&LinearModel::chain(2, 128), &data, p, &cfg).unwrap();
        assert!(a
            .weights()
            .iter()
            .zip(b.weights())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn planted_separable_data_reaches_zero_filter_loss() {
        // Emission keys name the label, so a weight vector separating every example exists.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let data: Vec<LatticeExample> = (0..30)
            .map(|_| {
                let len = rng.random_range(3..7);
                let labels: Vec<u32> = (0..len).map(|_| rng.random_range(0..3)).collect();
                let keys: Vec<Vec<alloc::string::String>> = labels
                    .iter()
                    .map(|l| vec![alloc::format!("is{l}")])
                    .collect();
                LatticeExample {
                    input: SequenceInput::from_keys(&keys),
                    truth: Output::new(labels),
                    lattice: SparseLattice::full(len, 3, 1).unwrap(),
                }
            })
            .collect();
        let p = ThresholdParams::new(0.5).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            margin: MarginMode::Constant(1.0),
            ..config(0.0)
        };
        let model = train_level(&LinearModel::chain(1, 256), &data, p, &cfg).unwrap();
        for ex in &data {
            assert_eq!(
                crate::losses::filtering_loss(&model, &ex.input, &ex.truth, &ex.lattice, p)
                    .unwrap(),
                0.0
            );
            assert!(hinge(&model, &ex.input, &ex.truth, &ex.lattice, p, 1.0).unwrap() >= 0.0);
        }
        let t = max_marginals(&model, &data[0].input, &data[0].lattice).unwrap();
        assert_eq!(t.global_argmax(), data[0].truth);
    }

    #[test]
    fn objective_descends_over_epochs() {
        let mut passes = 0;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let data: Vec<LatticeExample> =
                (0..15).map(|_| random_example(&mut rng, 4, 3, 2)).collect();
            let p = ThresholdParams::new(0.2).unwrap();
            let cfg = TrainConfig {
                lambda: 0.1,
                eta: StepSchedule::Pegasos,
                averaging: false,
                ..TrainConfig::default()
            };
            let mut model = LinearModel::chain(2, 89);
            let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
            let mut per_epoch = Vec::new();
            let mut t = 0;
            for _ in 0..10 {
                let mut total = 0.0;
                for i in epoch_order(data.len(), &mut order_rng) {
                    t += 1;
                    total += regularized_objective(&model, &data[i], p, &cfg).unwrap();
                    sc_step(&mut model, &data[i], p, &cfg, t).unwrap();
                }
                per_epoch.push(total / data.len() as f64);
            }
            if per_epoch.last().unwrap() <= per_epoch.first().unwrap() {
                passes += 1;
            }
        }
        assert!(passes >= 18, "{passes}/20");
    }
}
