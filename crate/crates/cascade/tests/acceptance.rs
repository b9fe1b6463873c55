//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::collections::HashMap;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use structcascade::config::RunConfig;
use structcascade::synth::{synth_grid, synth_hmm, HmmConfig};
use structcascade_core::ensemble::{comb_decompose, ensemble_max_marginals, GridModel, NodeStates};
use structcascade_core::inference::{
    brute_force_max_marginals, map_decode, max_marginals, sum_product_marginals,
};
use structcascade_core::lattice::encode;
use structcascade_core::losses::{filtering_loss, hinge};
use structcascade_core::model::{score_output, State};
use structcascade_core::threshold::{filter_mean_max, mean_max, FilterTarget, LossMeasure};
use structcascade_core::training::{
    crf_train, evaluate_cascade, perceptron_train, regularized_objective, sc_direction,
    train_cascade, train_level, tune_alpha, Example, LatticeExample, StepSchedule, TrainConfig,
};
use structcascade_core::{LinearModel, Output, SequenceInput, SparseLattice, ThresholdParams};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_model(rng: &mut ChaCha8Rng, order: usize, lo: f64, hi: f64) -> LinearModel {
    let mut model = LinearModel::chain(order, 97);
    for w in model.weights_mut() {
        *w = rng.random_range(lo..hi);
    }
    model
}

fn random_input(rng: &mut ChaCha8Rng, len: usize) -> SequenceInput {
    let keys: Vec<Vec<String>> = (0..len)
        .map(|_| {
            (0..rng.random_range(1..3))
                .map(|_| format!("k{}", rng.random_range(0..5)))
                .collect()
        })
        .collect();
    SequenceInput::from_keys(&keys)
}

fn random_output(rng: &mut ChaCha8Rng, len: usize, k: usize) -> Output {
    Output::new((0..len).map(|_| rng.random_range(0..k as State)).collect())
}

/// Every output of length `len` over `k` states, in lexicographic order.
fn all_outputs(len: usize, k: usize) -> Vec<Output> {
    let total = k.pow(len as u32);
    (0..total)
        .map(|mut c| {
            let mut labels = vec![0; len];
            for l in labels.iter_mut().rev() {
                *l = (c % k) as State;
                c /= k;
            }
            Output::new(labels)
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0usize;
    for _ in 0..200 {
        let (len, k, order) = (
            rng.random_range(1..=6),
            rng.random_range(1..=4),
            rng.random_range(1..=2),
        );
        let model = random_model(&mut rng, order, -5.0, 5.0);
        let input = random_input(&mut rng, len);
        let lattice = SparseLattice::full(len, k, order.min(len)).unwrap();
        let d = lattice.order();
        let table = max_marginals(&model, &input, &lattice).unwrap();
        let brute = brute_force_max_marginals(&model, &input, &lattice).unwrap();
        // Independent oracle: score every output and keep the best per clique assignment.
        let mut best: HashMap<(usize, u64), f64> = HashMap::new();
        let mut global = f64::NEG_INFINITY;
        for y in all_outputs(len, k) {
            let s = score_output(&model, &input, &y).unwrap();
            global = global.max(s);
            for j in 0..lattice.num_anchors() {
                let e = best
                    .entry((j, encode(&y.labels[j..j + d], k)))
                    .or_insert(f64::NEG_INFINITY);
                *e = e.max(s);
            }
        }
        for j in 0..lattice.num_anchors() {
            for (i, &code) in lattice.codes(j).iter().enumerate() {
                let m = table.values(j)[i];
                let witness = score_output(&model, &input, &table.witness(j, i)).unwrap();
                if m != best[&(j, code)] || m != brute.values(j)[i] || witness != m {
                    mismatches += 1;
                }
            }
        }
        let (argmax, score) = map_decode(&model, &input, &lattice).unwrap();
        if score != global || score_output(&model, &input, &argmax).unwrap() != global {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mismatches == 0 && secs < 10.0,
        format!("200 chain instances, {mismatches} mismatches, {secs:.2} s (limit 10 s)"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut emptied, mut map_lost, mut truth_pruned, mut above) = (0, 0, 0, 0);
    for _ in 0..500 {
        let (len, k, order) = (
            rng.random_range(1..=8),
            rng.random_range(2..=4),
            rng.random_range(1..=3),
        );
        let model = random_model(&mut rng, order, -5.0, 5.0);
        let input = random_input(&mut rng, len);
        let truth = random_output(&mut rng, len, k);
        let alpha = rng.random_range(0.0..=0.95);
        let mut lattice = SparseLattice::full(len, k, order.min(len)).unwrap();
        if rng.random_bool(0.5) {
            // Start from a lattice already pruned by another model.
            let other = random_model(&mut rng, order, -5.0, 5.0);
            let t = max_marginals(&other, &input, &lattice).unwrap();
            let a = ThresholdParams::new(rng.random_range(0.0..0.9)).unwrap();
            lattice = filter_mean_max(&lattice, &t, a, FilterTarget::Clique)
                .unwrap()
                .0;
        }
        let table = max_marginals(&model, &input, &lattice).unwrap();
        let params = ThresholdParams::new(alpha).unwrap();
        let Ok((filtered, cut)) = filter_mean_max(&lattice, &table, params, FilterTarget::Clique)
        else {
            emptied += 1;
            continue;
        };
        if (0..filtered.num_anchors()).any(|j| filtered.codes(j).is_empty()) {
            emptied += 1;
        }
        if !filtered.contains_output(&table.global_argmax()) {
            map_lost += 1;
        }
        if lattice.contains_output(&truth) {
            let s = score_output(&model, &input, &truth).unwrap();
            if s > cut.tau {
                above += 1;
                if !filtered.contains_output(&truth) {
                    truth_pruned += 1;
                }
            }
        }
    }
    let v = emptied + map_lost + truth_pruned;
    outcome(
        v == 0,
        format!(
            "500 draws: {emptied} emptied positions, {map_lost} lost MAP paths, {truth_pruned} pruned truths of {above} above tau"
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut total = 0.0;
    for _ in 0..100 {
        let (len, k, order) = (
            rng.random_range(4..=10),
            rng.random_range(2..=5),
            rng.random_range(1..=2),
        );
        let model = random_model(&mut rng, order, -1.0, 1.0);
        let input = random_input(&mut rng, len);
        let lattice = SparseLattice::full(len, k, order).unwrap();
        let table = max_marginals(&model, &input, &lattice).unwrap();
        let tau = mean_max(table.global_max(), table.mean(), 0.0);
        let kept = table.all_values().iter().filter(|&&m| m > tau).count();
        total += kept as f64 / table.len() as f64;
    }
    let mean = total / 100.0;
    outcome(
        (0.30..=0.70).contains(&mean),
        format!("mean efficiency loss at alpha=0 is {mean:.4} (range [0.30, 0.70])"),
    )
}

fn lattice_example(rng: &mut ChaCha8Rng, k: usize, order: usize) -> (LatticeExample, usize) {
    let len = rng.random_range(2..=6);
    let input = random_input(rng, len);
    let truth = random_output(rng, len, k);
    let lattice = SparseLattice::full(len, k, order.min(len)).unwrap();
    (
        LatticeExample {
            input,
            truth,
            lattice,
        },
        len,
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut dominance = 0;
    for _ in 0..1000 {
        let (k, order) = (rng.random_range(2..=4), rng.random_range(1..=2));
        let model = random_model(&mut rng, order, -3.0, 3.0);
        let (ex, len) = lattice_example(&mut rng, k, order);
        let params = ThresholdParams::new(rng.random_range(0.0..0.99)).unwrap();
        let margin = len as f64;
        let h = hinge(&model, &ex.input, &ex.truth, &ex.lattice, params, margin).unwrap();
        let lf = filtering_loss(&model, &ex.input, &ex.truth, &ex.lattice, params).unwrap();
        if h / margin < lf {
            dominance += 1;
        }
    }
    let mut convexity = 0;
    for _ in 0..200 {
        let (k, order) = (rng.random_range(2..=4), rng.random_range(1..=2));
        let a = random_model(&mut rng, order, -3.0, 3.0);
        let b = random_model(&mut rng, order, -3.0, 3.0);
        let mut mid = a.clone();
        for (m, (x, y)) in mid
            .weights_mut()
            .iter_mut()
            .zip(a.weights().iter().zip(b.weights()))
        {
            *m = 0.5 * (x + y);
        }
        let (ex, _) = lattice_example(&mut rng, k, order);
        let params = ThresholdParams::new(rng.random_range(0.0..0.99)).unwrap();
        let config = TrainConfig {
            lambda: rng.random_range(0.0..0.1),
            ..TrainConfig::default()
        };
        let f = |m: &LinearModel| regularized_objective(m, &ex, params, &config).unwrap();
        if f(&mid) > 0.5 * (f(&a) + f(&b)) + 1e-9 {
            convexity += 1;
        }
    }
    outcome(
        dominance == 0 && convexity == 0,
        format!("{dominance} of 1000 draws with hinge/margin < filter loss, {convexity} of 200 midpoint convexity violations"),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-5;
    let (mut points, mut failures, mut skipped, mut worst) = (0, 0, 0, 0.0f64);
    while points < 100 {
        let (k, order) = (rng.random_range(2..=3), rng.random_range(1..=2));
        let mut model = LinearModel::chain(order, 16);
        for w in model.weights_mut() {
            *w = rng.random_range(-2.0..2.0);
        }
        let (ex, _) = lattice_example(&mut rng, k, order);
        let params = ThresholdParams::new(rng.random_range(0.0..0.99)).unwrap();
        let config = TrainConfig {
            lambda: rng.random_range(0.0..0.5),
            ..TrainConfig::default()
        };
        let f = |m: &LinearModel| regularized_objective(m, &ex, params, &config).unwrap();
        let f0 = f(&model);
        let mut grad = vec![0.0; model.dimension()];
        let mut kink = false;
        for (i, g) in grad.iter_mut().enumerate() {
            let w = model.weights()[i];
            model.weights_mut()[i] = w + h;
            let fp = f(&model);
            model.weights_mut()[i] = w - h;
            let fm = f(&model);
            model.weights_mut()[i] = w;
            // One-sided slopes disagree across a kink.
            if ((fp - f0) / h - (f0 - fm) / h).abs() > 1e-4 * (1.0 + ((fp - fm) / (2.0 * h)).abs())
            {
                kink = true;
            }
            *g = (fp - fm) / (2.0 * h);
        }
        if kink {
            skipped += 1;
            continue;
        }
        let dir = sc_direction(&model, &ex, params, &config).unwrap();
        let err: f64 = dir
            .iter()
            .zip(&grad)
            .map(|(d, g)| (d + g) * (d + g))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let rel = err / norm.max(1e-12);
        worst = worst.max(rel);
        if rel >= 1e-4 {
            failures += 1;
        }
        points += 1;
    }
    outcome(
        failures == 0,
        format!("100 differentiable points ({skipped} kinked draws skipped), {failures} failures, worst relative error {worst:.2e}"),
    )
}

fn hmm_split(
    seed: u64,
    order: usize,
    k: usize,
    sizes: [usize; 3],
    scale: f64,
) -> [Vec<Example>; 3] {
    let config = HmmConfig {
        order,
        num_states: k,
        count: sizes.iter().sum(),
        scale,
        generator_seed: seed,
        seed,
        ..HmmConfig::default()
    };
    let examples = synth_hmm(&config).unwrap().0.to_examples();
    let mut it = examples.into_iter();
    sizes.map(|n| it.by_ref().take(n).collect())
}

fn token_accuracy(model: &LinearModel, data: &[Example], k: usize, order: usize) -> f64 {
    let (mut right, mut total) = (0usize, 0usize);
    for ex in data {
        let lattice = SparseLattice::full(ex.input.len(), k, order.min(ex.input.len())).unwrap();
        let (y, _) = map_decode(model, &ex.input, &lattice).unwrap();
        right += y
            .labels
            .iter()
            .zip(&ex.truth.labels)
            .filter(|(a, b)| a == b)
            .count();
        total += ex.truth.len();
    }
    right as f64 / total as f64
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let k = 8;
    let [train, dev, test] = hmm_split(6, 3, k, [2000, 500, 500], 3.0);
    let run = RunConfig {
        levels: 3,
        initial_order: 1,
        epsilon: 0.01,
        ..RunConfig::default()
    };
    let config = run.cascade_config(k, 6).unwrap();
    let cascade = train_cascade(&train, &dev, &config).unwrap();
    let report = evaluate_cascade(&cascade, &test).unwrap();

    let unigram: Vec<LatticeExample> = train
        .iter()
        .map(|ex| LatticeExample::full(ex, k, 1).unwrap())
        .collect();
    let order1 = perceptron_train(
        &LinearModel::chain(1, run.dimension),
        &unigram,
        &run.final_train,
    )
    .unwrap();
    let base = token_accuracy(&order1, &test, k, 1);
    let acc = report.final_metrics.token_accuracy;
    let gain_ok = acc - base >= 0.03;
    let losses: Vec<f64> = report.levels.iter().map(|m| m.pruned_loss).collect();
    let bounds: Vec<f64> = report.levels.iter().map(|m| m.filter_loss).collect();
    let loss_ok = losses.iter().all(|&l| l <= 0.03);
    let density = report.levels.last().unwrap().density;
    let density_ok = density <= 0.25;
    let secs = start.elapsed().as_secs_f64();
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.4}"))
            .collect::<Vec<_>>()
            .join("/")
    };
    outcome(
        gain_ok && loss_ok && density_ok && secs < 300.0,
        format!(
            "(a) accuracy {acc:.4} vs order-1 {base:.4} [{}]; (b) test filter loss per level {} (bound {}) [{}]; \
             (c) final density {density:.4} [{}]; {secs:.1} s",
            if gain_ok { "ok" } else { "fail" },
            fmt(&losses),
            fmt(&bounds),
            if loss_ok { "ok" } else { "fail" },
            if density_ok { "ok" } else { "fail" },
        ),
    )
}

/// Efficiency loss on `test` of mean-max filtering with `alpha` tuned on `dev`.
fn max_marginal_efficiency(
    model: &LinearModel,
    dev: &[LatticeExample],
    test: &[LatticeExample],
    eps: f64,
) -> (f64, f64) {
    let choice = tune_alpha(
        model,
        dev,
        &[0.0, 0.2, 0.4, 0.6, 0.8],
        eps,
        FilterTarget::Clique,
        LossMeasure::Pruned,
    )
    .unwrap();
    let mut kept = 0.0;
    for ex in test {
        let table = max_marginals(model, &ex.input, &ex.lattice).unwrap();
        let params = ThresholdParams::new(choice.alpha).unwrap();
        let (filtered, _) =
            filter_mean_max(&ex.lattice, &table, params, FilterTarget::Clique).unwrap();
        kept += filtered.num_assignments() as f64 / ex.lattice.num_assignments() as f64;
    }
    (choice.filter_loss, kept / test.len() as f64)
}

/// Smallest posterior among the truth's cliques.
fn truth_posterior(model: &LinearModel, ex: &LatticeExample) -> f64 {
    let post = sum_product_marginals(model, &ex.input, &ex.lattice).unwrap();
    let path = ex.lattice.path_of(&ex.truth).unwrap();
    path.iter()
        .enumerate()
        .map(|(j, &i)| post.posteriors(j)[i])
        .fold(f64::INFINITY, f64::min)
}

/// Efficiency loss on `test` of posterior thresholding, with the largest
/// threshold whose dev loss is at most `eps`.
fn posterior_efficiency(
    model: &LinearModel,
    dev: &[LatticeExample],
    test: &[LatticeExample],
    eps: f64,
) -> (f64, f64) {
    let mut critical: Vec<f64> = dev.iter().map(|ex| truth_posterior(model, ex)).collect();
    critical.sort_by(f64::total_cmp);
    let allowed = (eps * dev.len() as f64).floor() as usize;
    // A truth clique survives iff its posterior is strictly above the threshold.
    let threshold = critical
        .get(allowed)
        .map_or(0.0, |&c| c.next_down())
        .clamp(0.0, 1.0);
    let lost = critical.iter().filter(|&&c| c <= threshold).count();
    let mut kept = 0.0;
    for ex in test {
        let post = sum_product_marginals(model, &ex.input, &ex.lattice).unwrap();
        let n: usize = (0..ex.lattice.num_anchors())
            .map(|j| {
                post.posteriors(j)
                    .iter()
                    .filter(|&&p| p > threshold)
                    .count()
            })
            .sum();
        kept += n as f64 / ex.lattice.num_assignments() as f64;
    }
    (lost as f64 / dev.len() as f64, kept / test.len() as f64)
}

fn criterion_7() -> Outcome {
    let eps = 0.005;
    let (k, order) = (4, 2);
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..10u64 {
        let [train, dev, test] = hmm_split(100 + seed, order, k, [1000, 1000, 500], 2.0);
        let full = |d: &[Example]| -> Vec<LatticeExample> {
            d.iter()
                .map(|ex| LatticeExample::full(ex, k, order).unwrap())
                .collect()
        };
        let (train, dev, test) = (full(&train), full(&dev), full(&test));
        let zero = LinearModel::chain(order, 1 << 12);
        let config = TrainConfig {
            seed,
            ..TrainConfig::default()
        };

        let mut sc_best: Option<(f64, f64)> = None;
        for alpha in [0.0, 0.2, 0.4, 0.6, 0.8] {
            let model =
                train_level(&zero, &train, ThresholdParams::new(alpha).unwrap(), &config).unwrap();
            let (lf, le) = max_marginal_efficiency(&model, &dev, &test, eps);
            if lf <= eps && sc_best.is_none_or(|(_, b)| le < b) {
                sc_best = Some((lf, le));
            }
        }
        let sc = sc_best.map_or(1.0, |(_, le)| le);
        let crf_model = crf_train(
            &zero,
            &train,
            &TrainConfig {
                eta: StepSchedule::Constant(0.05),
                epochs: 15,
                ..config
            },
        )
        .unwrap();
        let crf = posterior_efficiency(&crf_model, &dev, &test, eps).1;
        let perceptron_model = perceptron_train(&zero, &train, &config).unwrap();
        let perceptron = max_marginal_efficiency(&perceptron_model, &dev, &test, eps).1;
        let ordered = sc <= crf && crf <= perceptron;
        wins += usize::from(ordered);
        lines.push(format!("{sc:.3}/{crf:.3}/{perceptron:.3}"));
    }
    outcome(
        wins >= 8,
        format!("SC <= CRF <= perceptron efficiency in {wins} of 10 seeds (need 8); per seed SC/CRF/perceptron {}", lines.join(" ")),
    )
}

/// Full grid score from the raw tables, edges numbered horizontal then vertical.
fn full_grid_score(grid: &GridModel, y: &[State]) -> f64 {
    let (rows, cols, k) = (grid.shape.rows, grid.shape.cols, grid.num_states);
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols - 1 {
            edges.push((r * cols + c, r * cols + c + 1));
        }
    }
    for r in 0..rows - 1 {
        for c in 0..cols {
            edges.push((r * cols + c, (r + 1) * cols + c));
        }
    }
    let mut s: f64 = y
        .iter()
        .enumerate()
        .map(|(v, &l)| grid.unary[v * k + l as usize])
        .sum();
    for (e, &(u, v)) in edges.iter().enumerate() {
        s += grid.pairwise[e * k * k + y[u] as usize * k + y[v] as usize];
    }
    s
}

/// Exact per-node max over all labellings, by enumeration.
fn grid_oracle(grid: &GridModel) -> Vec<Vec<f64>> {
    let (n, k) = (grid.shape.num_nodes(), grid.num_states);
    let mut best = vec![vec![f64::NEG_INFINITY; k]; n];
    for y in all_outputs(n, k) {
        let s = full_grid_score(grid, &y.labels);
        for (v, &l) in y.labels.iter().enumerate() {
            let b = &mut best[v][l as usize];
            *b = b.max(s);
        }
    }
    best
}

fn criterion_8() -> Outcome {
    let mut bound = 0usize;
    let mut checked = 0usize;
    for seed in 0..50 {
        let grid = synth_grid(3, 3, 3, 800 + seed).unwrap().model;
        let table =
            ensemble_max_marginals(&grid.comb_potentials().unwrap(), &NodeStates::full(9, 3))
                .unwrap();
        let exact = grid_oracle(&grid);
        for (v, row) in exact.iter().enumerate() {
            for (s, &m) in row.iter().enumerate() {
                checked += 1;
                if table.summed(v)[s] < m {
                    bound += 1;
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let (rows, cols, k) = (
            rng.random_range(1..=4),
            rng.random_range(2..=4),
            rng.random_range(2..=4),
        );
        let grid = synth_grid(rows, cols, k, 5000 + i).unwrap().model;
        let y: Vec<State> = (0..rows * cols)
            .map(|_| rng.random_range(0..k as State))
            .collect();
        let sum: f64 = comb_decompose(rows, cols)
            .unwrap()
            .iter()
            .map(|p| p.score(&grid, &y).unwrap())
            .sum();
        worst = worst.max((sum - full_grid_score(&grid, &y)).abs());
    }
    outcome(
        bound == 0 && worst < 1e-9,
        format!("{bound} of {checked} node-states below the exact max-marginal; worst score identity error {worst:.2e}"),
    )
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut violations, mut above) = (0, 0);
    for i in 0..500 {
        let (rows, cols, k) = (
            rng.random_range(2..=4),
            rng.random_range(2..=4),
            rng.random_range(2..=3),
        );
        let grid = synth_grid(rows, cols, k, 9000 + i).unwrap().model;
        let models = grid.comb_potentials().unwrap();
        let table = ensemble_max_marginals(&models, &NodeStates::full(rows * cols, k)).unwrap();
        let alpha = rng.random_range(0.0..1.0);
        let mut truth = table.decode();
        if rng.random_bool(0.5) {
            for l in truth.iter_mut() {
                if rng.random_bool(0.2) {
                    *l = rng.random_range(0..k as State);
                }
            }
        }
        let score: f64 = models.iter().map(|m| m.score(&truth).unwrap()).sum();
        let cut = table.cutoff(alpha);
        if score > cut.tau {
            above += 1;
            if truth
                .iter()
                .enumerate()
                .any(|(v, &l)| !cut.keeps(table.summed(v)[l as usize]))
            {
                violations += 1;
            }
        }
    }
    outcome(violations == 0, format!("{violations} violations among {above} of 500 draws with the truth above the joint threshold"))
}

fn criterion_10() -> Outcome {
    let c33 = comb_decompose(3, 3).unwrap().len();
    let square: Vec<(usize, usize)> = (2..=4)
        .map(|n| (n, comb_decompose(n, n).unwrap().len()))
        .collect();
    let ok = c33 == 6 && square.iter().all(|&(n, c)| c == 2 * n);
    outcome(ok, format!("(3,3) gives {c33}; (n,n) gives {square:?}"))
}

fn bin(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_structcascade"))
        .args(args)
        .env("RUST_LOG", "error")
        .stdout(Stdio::null())
        .status()
        .unwrap();
    assert!(status.success(), "structcascade {args:?} failed");
}

fn criterion_11() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();
    let (train, dev) = (p("train.txt"), p("dev.txt"));
    bin(&[
        "synth",
        "--kind",
        "hmm",
        "--count",
        "120",
        "--dev",
        &dev,
        "--dev-count",
        "40",
        "--out",
        &train,
        "--seed",
        "5",
    ]);
    let (gtrain, gdev) = (p("gtrain.txt"), p("gdev.txt"));
    bin(&[
        "synth",
        "--kind",
        "grid-task",
        "--count",
        "30",
        "--dev",
        &gdev,
        "--dev-count",
        "15",
        "--out",
        &gtrain,
        "--seed",
        "5",
    ]);
    let mut same = true;
    for (data, devp, extra, ckpt) in [
        (&train, &dev, None, "cascade.ckpt"),
        (&gtrain, &gdev, Some("--ensemble"), "grid_cascade.ckpt"),
    ] {
        let outs = [p(&format!("a-{ckpt}")), p(&format!("b-{ckpt}"))];
        for out in &outs {
            let mut args = vec![
                "train", "--data", data, "--dev", devp, "--out", out, "--seed", "3",
            ];
            args.extend(extra);
            bin(&args);
        }
        let read = |o: &str, f: &str| std::fs::read(Path::new(o).join(f)).unwrap();
        same &= read(&outs[0], ckpt) == read(&outs[1], ckpt);
        same &= read(&outs[0], "metrics.tsv") == read(&outs[1], "metrics.tsv");
    }
    outcome(
        same,
        format!(
            "sequence and grid training twice: checkpoints and metrics {}",
            if same { "byte-identical" } else { "differ" }
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("oracle equivalence", criterion_1),
        ("safe filtering", criterion_2),
        ("alpha=0 pruning rate", criterion_3),
        ("hinge dominance and convexity", criterion_4),
        ("subgradient correctness", criterion_5),
        ("end-to-end cascade", criterion_6),
        ("baseline ordering", criterion_7),
        ("ensemble bounds", criterion_8),
        ("joint safe filtering", criterion_9),
        ("comb count", criterion_10),
        ("determinism", criterion_11),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let o = f();
        failed += usize::from(!o.pass);
        println!(
            "criterion {id:>2} {} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
