//! Structured perceptron and CRF trainers over sparse lattices.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::scaled::ScaledWeights;
use super::{check_examples, epoch_order, LatticeExample, TrainConfig};
use crate::inference::{clique_scores_with, path_output, sum_product_from_scores, viterbi_path};
use crate::lattice::decode;
use crate::model::{visit_clique_features, LinearModel};
use crate::Result;

fn push_output_features(
    ex: &LatticeExample,
    labels: &[u32],
    model: &LinearModel,
    scale: f64,
    out: &mut Vec<(usize, f64)>,
) {
    let order = ex.lattice.order();
    for j in 0..ex.lattice.num_anchors() {
        visit_clique_features(
            &ex.input,
            j,
            &labels[j..j + order],
            model.templates(),
            model.dimension(),
            |i| out.push((i, scale)),
        );
    }
}

/// Averaged (optionally regularized) structured perceptron. Examples whose
/// truth is not in their lattice cannot be fit and are skipped.
pub fn perceptron_train(
    initial: &LinearModel,
    data: &[LatticeExample],
    config: &TrainConfig,
) -> Result<LinearModel> {
    config.validate()?;
    check_examples(data)?;
    let usable: Vec<usize> = (0..data.len())
        .filter(|&i| data[i].lattice.contains_output(&data[i].truth))
        .collect();
    if usable.len() < data.len() {
        log::info!(
            "perceptron: skipping {} examples whose truth is outside the lattice",
            data.len() - usable.len()
        );
    }
    let mut weights = ScaledWeights::new(initial.weights().to_vec(), config.averaging);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut update = Vec::new();
    let mut touched = Vec::new();
    let mut t = 0u64;
    for epoch in 0..config.epochs {
        let mut mistakes = 0usize;
        for k in epoch_order(usable.len(), &mut rng) {
            t += 1;
            let ex = &data[usable[k]];
            let scores = clique_scores_with(
                &weights,
                initial.templates(),
                initial.dimension(),
                &ex.input,
                &ex.lattice,
            );
            let predicted = path_output(&ex.lattice, &viterbi_path(&ex.lattice, &scores));
            let eta = config.step_size(t);
            weights.shrink(1.0 - eta * config.lambda);
            touched.clear();
            if predicted != ex.truth {
                mistakes += 1;
                update.clear();
                push_output_features(ex, &ex.truth.labels, initial, 1.0, &mut update);
                push_output_features(ex, &predicted.labels, initial, -1.0, &mut update);
                for &(i, c) in &update {
                    weights.add(i, eta * c);
                    touched.push(i);
                }
            }
            weights.end_step(&touched)?;
        }
        log::debug!("perceptron epoch {epoch}: {mistakes} mistakes");
    }
    Ok(LinearModel::from_weights(
        initial.templates().to_vec(),
        weights.finish(),
    ))
}

/// Stochastic gradient descent on the L2-regularized conditional
/// log-likelihood restricted to each example's lattice.
pub fn crf_train(
    initial: &LinearModel,
    data: &[LatticeExample],
    config: &TrainConfig,
) -> Result<LinearModel> {
    config.validate()?;
    check_examples(data)?;
    let usable: Vec<usize> = (0..data.len())
        .filter(|&i| data[i].lattice.contains_output(&data[i].truth))
        .collect();
    let mut weights = ScaledWeights::new(initial.weights().to_vec(), config.averaging);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut update = Vec::new();
    let mut touched = Vec::new();
    let mut t = 0u64;
    for epoch in 0..config.epochs {
        let mut nll = 0.0;
        for k in epoch_order(usable.len(), &mut rng) {
            t += 1;
            let ex = &data[usable[k]];
            let (templates, dim) = (initial.templates(), initial.dimension());
            let scores = clique_scores_with(&weights, templates, dim, &ex.input, &ex.lattice);
            let marginals = sum_product_from_scores(&ex.lattice, &scores)?;
            update.clear();
            push_output_features(ex, &ex.truth.labels, initial, 1.0, &mut update);
            let path = ex
                .lattice
                .path_of(&ex.truth)
                .expect("usable examples contain their truth");
            nll += marginals.log_partition()
                - path
                    .iter()
                    .enumerate()
                    .map(|(j, &a)| scores[j][a])
                    .sum::<f64>();
            let (order, k_states) = (ex.lattice.order(), ex.lattice.num_states());
            for j in 0..ex.lattice.num_anchors() {
                for (a, &code) in ex.lattice.codes(j).iter().enumerate() {
                    let p = marginals.posterior(j, a);
                    if p > 0.0 {
                        let states = decode(code, order, k_states);
                        visit_clique_features(&ex.input, j, &states, templates, dim, |i| {
                            update.push((i, -p))
                        });
                    }
                }
            }
            let eta = config.step_size(t);
            weights.shrink(1.0 - eta * config.lambda);
            touched.clear();
            for &(i, c) in &update {
                weights.add(i, eta * c);
                touched.push(i);
            }
            weights.end_step(&touched)?;
        }
        log::debug!(
            "crf epoch {epoch}: mean nll {}",
            nll / usable.len().max(1) as f64
        );
    }
    Ok(LinearModel::from_weights(
        initial.templates().to_vec(),
        weights.finish(),
    ))
}
