use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use structcascade_core::inference::max_marginals;
use structcascade_core::model::score_output;
use structcascade_core::threshold::{filter_mean_max, FilterTarget};
use structcascade_core::training::Example;
use structcascade_core::training::{
    evaluate_cascade, run_cascade, train_cascade, CascadeConfig, Expansion, LevelConfig,
    StepSchedule, TrainConfig,
};
use structcascade_core::{LinearModel, Output, SequenceInput, SparseLattice, ThresholdParams};

/// Labels cycle with occasional jumps; each token shows its label's parity
/// and a noisy copy of the label.
fn planted(seed: u64, n: usize) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(3..8);
            let mut labels = vec![rng.random_range(0..4u32)];
            for _ in 1..len {
                let prev = *labels.last().unwrap();
                labels.push(if rng.random_bool(0.85) {
                    (prev + 1) % 4
                } else {
                    rng.random_range(0..4)
                });
            }
            let keys: Vec<Vec<String>> = labels
                .iter()
                .map(|&l| {
                    let shown = if rng.random_bool(0.7) {
                        l
                    } else {
                        rng.random_range(0..4)
                    };
                    vec![format!("p{}", l % 2), format!("e{shown}")]
                })
                .collect();
            Example {
                input: SequenceInput::from_keys(&keys),
                truth: Output::new(labels),
            }
        })
        .collect()
}

fn config() -> CascadeConfig {
    let train = TrainConfig {
        eta: StepSchedule::Constant(0.05),
        epochs: 4,
        ..TrainConfig::default()
    };
    let level = |expansion| LevelConfig {
        epsilon: 0.05,
        ..LevelConfig::new(expansion, train)
    };
    CascadeConfig {
        num_states: 4,
        initial_order: 1,
        dimension: 1 << 12,
        levels: vec![
            level(Expansion::IncreaseOrder),
            level(Expansion::IncreaseOrder),
        ],
        final_train: train,
    }
}

#[test]
fn trained_cascade_runs_consistently() {
    let (train, dev, test) = (planted(1, 120), planted(2, 60), planted(3, 40));
    let cascade = train_cascade(&train, &dev, &config()).unwrap();
    assert_eq!(
        cascade.levels.iter().map(|l| l.order).collect::<Vec<_>>(),
        [1, 2]
    );
    let report = evaluate_cascade(&cascade, &test).unwrap();
    assert_eq!(report.runs.len(), test.len());
    for (ex, run) in test.iter().zip(&report.runs) {
        let single = run_cascade(&cascade, &ex.input).unwrap();
        assert_eq!(&single, run);
        // The prediction is decoded inside the final lattice.
        assert!(run.final_lattice.contains_output(&run.prediction));
        assert!(run.survivors.iter().flatten().all(|&c| c > 0));
    }
    // Bigram filtering leaves a small part of the bigram space.
    assert!(report.levels[1].density < 0.5, "{:?}", report.levels[1]);
    assert!(
        report.final_metrics.token_accuracy > 0.7,
        "{:?}",
        report.final_metrics
    );
}

#[test]
fn training_is_deterministic() {
    let (train, dev) = (planted(4, 40), planted(5, 20));
    assert_eq!(
        train_cascade(&train, &dev, &config()).unwrap(),
        train_cascade(&train, &dev, &config()).unwrap()
    );
}

fn instance(
    seed: u64,
    len: usize,
    k: usize,
    order: usize,
) -> (LinearModel, SequenceInput, SparseLattice) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = LinearModel::chain(order, 61);
    for w in model.weights_mut() {
        *w = rng.random_range(-4.0..4.0);
    }
    let keys: Vec<Vec<String>> = (0..len)
        .map(|_| vec![format!("x{}", rng.random_range(0..3))])
        .collect();
    let lattice = SparseLattice::full(len, k, order.min(len)).unwrap();
    (model, SequenceInput::from_keys(&keys), lattice)
}

proptest! {
    #[test]
    fn safe_filtering_holds(seed in any::<u64>(), len in 1usize..7, k in 2usize..4, order in 1usize..3,
                            alpha in 0.0f64..0.95, labels in prop::collection::vec(0u32..3, 6)) {
        let (model, input, lattice) = instance(seed, len, k, order);
        let truth = Output::new(labels[..len].iter().map(|&l| l % k as u32).collect());
        let table = max_marginals(&model, &input, &lattice).unwrap();
        let (filtered, cut) =
            filter_mean_max(&lattice, &table, ThresholdParams::new(alpha).unwrap(), FilterTarget::Clique).unwrap();
        prop_assert!(filtered.contains_output(&table.global_argmax()));
        if score_output(&model, &input, &truth).unwrap() > cut.tau {
            prop_assert!(filtered.contains_output(&truth));
        }
    }

    #[test]
    fn filtering_only_removes(seed in any::<u64>(), len in 1usize..7, alpha in 0.0f64..0.95) {
        let (model, input, lattice) = instance(seed, len, 3, 2);
        let table = max_marginals(&model, &input, &lattice).unwrap();
        let (filtered, _) =
            filter_mean_max(&lattice, &table, ThresholdParams::new(alpha).unwrap(), FilterTarget::Clique).unwrap();
        for j in 0..filtered.num_anchors() {
            prop_assert!(!filtered.codes(j).is_empty());
            prop_assert!(filtered.codes(j).iter().all(|c| lattice.codes(j).contains(c)));
        }
    }
}
