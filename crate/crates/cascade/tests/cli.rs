use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use structcascade::checkpoint::{load, save};
use structcascade::dataset::SequenceDataset;
use structcascade_core::ensemble::GridCascade;
use structcascade_core::training::TrainedCascade;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_structcascade"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

fn synth_hmm(dir: &Path) -> (String, String, String) {
    let (train, dev, test) = (
        path(dir, "train.txt"),
        path(dir, "dev.txt"),
        path(dir, "test.txt"),
    );
    ok(&[
        "synth",
        "--kind",
        "hmm",
        "--order",
        "2",
        "--count",
        "150",
        "--dev",
        &dev,
        "--dev-count",
        "60",
        "--test",
        &test,
        "--test-count",
        "40",
        "--out",
        &train,
        "--seed",
        "4",
    ]);
    (train, dev, test)
}

#[test]
fn exit_codes() {
    assert_eq!(
        run(&["train", "--dev", "d", "--out", "o"]).status.code(),
        Some(2)
    );
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let out = run(&[
        "train",
        "--data",
        "/nonexistent/a",
        "--dev",
        "/nonexistent/b",
        "--out",
        "/tmp/never",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn help_documents_the_schemas() {
    let help = ok(&["--help"]);
    assert!(help.contains("top_k, ensemble_miss_rate"));
    assert!(help.contains("token_accuracy"));
}

#[test]
fn synth_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (train, dev, test) = synth_hmm(dir.path());
    let data = SequenceDataset::read(Path::new(&train)).unwrap();
    assert_eq!((data.num_states, data.examples.len()), (4, 150));

    let config = path(dir.path(), "run.conf");
    fs::write(&config, "levels = 2\nepochs = 3\n").unwrap();
    let out = path(dir.path(), "model");
    let stdout = ok(&[
        "train",
        "--data",
        &train,
        "--dev",
        &dev,
        "--config",
        &config,
        "--set",
        "epsilon=0.05",
        "--out",
        &out,
    ]);
    let metrics = fs::read_to_string(Path::new(&out).join("metrics.tsv")).unwrap();
    assert_eq!(stdout, metrics);
    let rows: Vec<&str> = metrics.lines().collect();
    // Header, one row per level, final row.
    assert_eq!(rows.len(), 4);
    assert!(rows[3].starts_with("final\t"));

    let ckpt = path(dir.path(), "model/cascade.ckpt");
    let cascade: TrainedCascade = load(Path::new(&ckpt)).unwrap();
    assert_eq!(cascade.levels.len(), 2);
    let copy = path(dir.path(), "copy.ckpt");
    save(&cascade, Path::new(&copy)).unwrap();
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&copy).unwrap());

    let trace = path(dir.path(), "trace.tsv");
    let eval = ok(&["eval", "--model", &ckpt, "--data", &test, "--trace", &trace]);
    assert_eq!(eval.lines().count(), 4);
    // One trace line per example and level.
    assert_eq!(
        fs::read_to_string(&trace).unwrap().lines().count(),
        1 + 40 * 2
    );

    let stats = ok(&[
        "filter-stats",
        "--model",
        &ckpt,
        "--data",
        &test,
        "--alpha",
        "0.5",
    ]);
    assert!(stats
        .lines()
        .skip(1)
        .all(|l| l.split('\t').nth(1) == Some("0.5")));
    assert_eq!(
        run(&[
            "filter-stats",
            "--model",
            &ckpt,
            "--data",
            &test,
            "--alpha",
            "1.5"
        ])
        .status
        .code(),
        Some(1)
    );
    // A sequence checkpoint is not a grid checkpoint.
    assert_eq!(
        run(&["eval", "--ensemble", "--model", &ckpt, "--data", &test])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn grid_mode() {
    let dir = tempfile::tempdir().unwrap();
    let (train, dev) = (path(dir.path(), "g.txt"), path(dir.path(), "gd.txt"));
    ok(&[
        "synth",
        "--kind",
        "grid-task",
        "--rows",
        "2",
        "--cols",
        "3",
        "--states",
        "4",
        "--count",
        "30",
        "--dev",
        &dev,
        "--dev-count",
        "15",
        "--out",
        &train,
    ]);
    let out = path(dir.path(), "gm");
    let metrics = ok(&[
        "train",
        "--ensemble",
        "--data",
        &train,
        "--dev",
        &dev,
        "--out",
        &out,
        "--set",
        "expansion=refine",
        "--set",
        "levels=2",
    ]);
    assert_eq!(metrics.lines().count(), 3);
    let ckpt = path(dir.path(), "gm/grid_cascade.ckpt");
    let cascade: GridCascade = load(Path::new(&ckpt)).unwrap();
    assert_eq!(
        cascade
            .levels
            .iter()
            .map(|l| l.num_states)
            .collect::<Vec<_>>(),
        [2, 4]
    );
    let eval = ok(&["eval", "--ensemble", "--model", &ckpt, "--data", &dev]);
    assert_eq!(eval.lines().count(), 3);
}

#[test]
fn grid_bench_csv() {
    let csv = ok(&[
        "grid-bench",
        "--rows",
        "3",
        "--cols",
        "3",
        "--states",
        "3",
        "--count",
        "20",
        "--seed",
        "1",
    ]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "top_k,ensemble_miss_rate,submodel_miss_rate,joint_miss_rate"
    );
    assert_eq!(lines.len(), 4);
    for (i, l) in lines[1..].iter().enumerate() {
        let cols: Vec<f64> = l.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols[0], (i + 1) as f64);
        assert!(cols[1..].iter().all(|r| (0.0..=1.0).contains(r)));
    }
    assert_eq!(ok(&["grid-bench", "--count", "20", "--seed", "1"]), csv);
    assert_eq!(
        ok(&["grid-bench", "--count", "0"]),
        "top_k,ensemble_miss_rate,submodel_miss_rate,joint_miss_rate\n"
    );
}

#[test]
fn synth_is_seed_pure() {
    let dir = tempfile::tempdir().unwrap();
    let read = |n: &str| fs::read(path(dir.path(), n)).unwrap();
    for name in ["a.txt", "b.txt"] {
        ok(&[
            "synth",
            "--kind",
            "hmm",
            "--count",
            "20",
            "--out",
            &path(dir.path(), name),
            "--seed",
            "9",
        ]);
    }
    assert_eq!(read("a.txt"), read("b.txt"));
    let grid = path(dir.path(), "grid.txt");
    ok(&[
        "synth", "--kind", "grid", "--rows", "2", "--cols", "2", "--states", "3", "--out", &grid,
    ]);
    assert!(fs::read_to_string(&grid).unwrap().contains("\ntruth "));
}
