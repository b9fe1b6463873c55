//! Command-line surface: `synth`, `train`, `eval`, `filter-stats` and `grid-bench`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use structcascade_core::ensemble::{grid_coarse_to_fine, GridCascade, GridLevelMetrics};
use structcascade_core::training::{evaluate_cascade, train_cascade, LevelMetrics, TrainedCascade};

use crate::bench::{self, grid_bench};
use crate::checkpoint::{load, save};
use crate::config::RunConfig;
use crate::dataset::{GridDataset, SequenceDataset};
use crate::metrics::{self, MetricsRow};
use crate::synth::{
    sample_grid, synth_grid, synth_grid_task, synth_hmm, GridTaskConfig, HmmConfig,
};
use crate::{Error, Result};

/// Checkpoint written by `train` in sequence mode.
pub const CASCADE_FILE: &str = "cascade.ckpt";
/// Checkpoint written by `train --ensemble`.
pub const GRID_CASCADE_FILE: &str = "grid_cascade.ckpt";
pub const METRICS_FILE: &str = "metrics.tsv";

const OUTPUTS: &str = "\
Outputs:
  metrics TSV   level, alpha, filter_loss, efficiency_loss, density, token_accuracy,
                sequence_accuracy, wall_ms (one row per level, then `final` in sequence mode)
  trace TSV     example, level, survivors (comma-separated counts per position or node)
  filter-stats  level, alpha, filter_loss, pruned_loss, efficiency_loss, density, examples
  grid-bench    CSV top_k, ensemble_miss_rate, submodel_miss_rate, joint_miss_rate

Exit codes: 0 success, 1 runtime failure, 2 usage error.";

#[derive(Parser, Debug)]
#[command(name = "structcascade", version, about = "Structured prediction cascades", after_help = OUTPUTS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset or grid instance.
    Synth(SynthArgs),
    /// Train a cascade and write its checkpoint and metrics.
    Train(TrainArgs),
    /// Run a trained cascade on labelled data and report metrics.
    Eval(EvalArgs),
    /// Filtering statistics per level, optionally at a different alpha.
    FilterStats(FilterStatsArgs),
    /// Top-K recall of ensemble, sub-model and exact max-marginals on random grids.
    GridBench(GridBenchArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SynthKind {
    /// Sequences from a planted higher-order chain.
    Hmm,
    /// Labelled grids for `train --ensemble`.
    GridTask,
    /// One random grid MRF, with an exact sample as truth when small enough.
    Grid,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthKind,
    /// Training split (or the grid instance).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    dev_count: usize,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    test_count: usize,
    /// Clique size of the planted chain.
    #[arg(long, default_value_t = 2)]
    order: usize,
    #[arg(long, default_value_t = 4)]
    states: usize,
    #[arg(long, default_value_t = 5)]
    min_len: usize,
    #[arg(long, default_value_t = 12)]
    max_len: usize,
    /// Spread of the planted transition log-weights.
    #[arg(long, default_value_t = 2.0)]
    scale: f64,
    /// Probability that a token's exact key shows a random label.
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    /// States per group key; 0 disables group keys.
    #[arg(long, default_value_t = 2)]
    group: usize,
    #[arg(long, default_value_t = 3)]
    rows: usize,
    #[arg(long, default_value_t = 3)]
    cols: usize,
    /// Seed of the sampled data.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the planted generator; defaults to `--seed`.
    #[arg(long)]
    generator_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    /// Flat `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides a config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid mode: the data are grid datasets.
    #[arg(long)]
    ensemble: bool,
    /// Record training time in `wall_ms` (breaks byte-identical metrics).
    #[arg(long)]
    timing: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ensemble: bool,
    /// Per-example survivor counts.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Metrics file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FilterStatsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ensemble: bool,
    /// Replaces every level's alpha.
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args, Debug)]
struct GridBenchArgs {
    #[arg(long, default_value_t = 3)]
    rows: usize,
    #[arg(long, default_value_t = 3)]
    cols: usize,
    #[arg(long, default_value_t = 3)]
    states: usize,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::FilterStats(a) => cmd_filter_stats(&a),
        Command::GridBench(a) => cmd_grid_bench(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_file(p, text),
        None => std::io::stdout()
            .lock()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

/// Splits `all` into consecutive chunks of the requested sizes.
fn split<T>(mut all: Vec<T>, sizes: [usize; 3]) -> [Vec<T>; 3] {
    let test = all.split_off(sizes[0] + sizes[1]);
    let dev = all.split_off(sizes[0]);
    [all, dev, test]
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let sizes = [
        a.count,
        if a.dev.is_some() { a.dev_count } else { 0 },
        if a.test.is_some() { a.test_count } else { 0 },
    ];
    let total = sizes.iter().sum();
    let paths = [Some(&a.out), a.dev.as_ref(), a.test.as_ref()];
    match a.kind {
        SynthKind::Hmm => {
            let config = HmmConfig {
                order: a.order,
                num_states: a.states,
                min_len: a.min_len,
                max_len: a.max_len,
                count: total,
                scale: a.scale,
                noise: a.noise,
                group: a.group,
                generator_seed: a.generator_seed.unwrap_or(a.seed),
                seed: a.seed,
            };
            let (data, _) = synth_hmm(&config)?;
            for (examples, path) in split(data.examples, sizes).into_iter().zip(paths) {
                if let Some(p) = path {
                    SequenceDataset {
                        num_states: a.states,
                        examples,
                    }
                    .write(p)?;
                }
            }
        }
        SynthKind::GridTask => {
            let config = GridTaskConfig {
                rows: a.rows,
                cols: a.cols,
                num_states: a.states,
                count: total,
                noise: a.noise,
                group: a.group,
                seed: a.seed,
            };
            let data = synth_grid_task(&config)?;
            for (examples, path) in split(data.examples, sizes).into_iter().zip(paths) {
                if let Some(p) = path {
                    GridDataset {
                        shape: data.shape,
                        num_states: a.states,
                        examples,
                    }
                    .write(p)?;
                }
            }
        }
        SynthKind::Grid => {
            let mut instance =
                synth_grid(a.rows, a.cols, a.states, a.generator_seed.unwrap_or(a.seed))?;
            let outputs =
                (a.states as f64).powi(i32::try_from(a.rows * a.cols).unwrap_or(i32::MAX));
            if outputs <= 1e6 {
                let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
                instance.truth = Some(sample_grid(&instance.model, &mut rng)?);
            } else {
                log::warn!("grid too large to sample exactly; writing no truth");
            }
            instance.write(&a.out)?;
        }
    }
    Ok(())
}

fn sequence_rows(
    cascade: &TrainedCascade,
    levels: &[LevelMetrics],
    final_metrics: &LevelMetrics,
) -> Vec<MetricsRow> {
    let mut rows: Vec<MetricsRow> = levels
        .iter()
        .zip(&cascade.levels)
        .enumerate()
        .map(|(i, (m, level))| MetricsRow::from_level(i, m, level.measure))
        .collect();
    rows.push(MetricsRow::final_row(final_metrics));
    rows
}

fn grid_rows(levels: &[GridLevelMetrics]) -> Vec<MetricsRow> {
    levels
        .iter()
        .enumerate()
        .map(|(i, m)| MetricsRow::from_grid_level(i, m))
        .collect()
}

fn load_config(a: &TrainArgs) -> Result<RunConfig> {
    let text = match &a.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    RunConfig::parse_with(&text, &a.overrides)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let config = load_config(a)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let start = Instant::now();
    let mut rows = if a.ensemble {
        let train = GridDataset::read(&a.data)?;
        let dev = GridDataset::read(&a.dev)?;
        check_states(train.num_states, dev.num_states)?;
        let cascade = grid_coarse_to_fine(
            &train.to_examples(),
            &dev.to_examples(),
            &config.grid_config(train.num_states, a.seed)?,
        )?;
        save(&cascade, &a.out.join(GRID_CASCADE_FILE))?;
        let metrics: Vec<GridLevelMetrics> = cascade.levels.iter().map(|l| l.metrics).collect();
        grid_rows(&metrics)
    } else {
        let train = SequenceDataset::read(&a.data)?;
        let dev = SequenceDataset::read(&a.dev)?;
        check_states(train.num_states, dev.num_states)?;
        let cascade = train_cascade(
            &train.to_examples(),
            &dev.to_examples(),
            &config.cascade_config(train.num_states, a.seed)?,
        )?;
        save(&cascade, &a.out.join(CASCADE_FILE))?;
        let levels: Vec<LevelMetrics> = cascade.levels.iter().map(|l| l.dev).collect();
        sequence_rows(&cascade, &levels, &cascade.final_dev)
    };
    if a.timing {
        let ms = u64::try_from(start.elapsed().as_millis()).unwrap_or(u64::MAX);
        for r in &mut rows {
            r.wall_ms = ms;
        }
    }
    let tsv = metrics::to_tsv(&rows);
    write_file(&a.out.join(METRICS_FILE), &tsv)?;
    emit(None, &tsv)
}

fn check_states(train: usize, dev: usize) -> Result<()> {
    if train == dev {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "training data has K={train}, dev data has K={dev}"
        )))
    }
}

fn join(counts: impl Iterator<Item = usize>) -> String {
    counts.map(|c| c.to_string()).collect::<Vec<_>>().join(",")
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let mut trace = String::from("example\tlevel\tsurvivors\n");
    let rows = if a.ensemble {
        let cascade: GridCascade = load(&a.model)?;
        let data = GridDataset::read(&a.data)?;
        let examples = data.to_examples();
        if a.trace.is_some() {
            for (i, ex) in examples.iter().enumerate() {
                match cascade.run(&ex.input) {
                    Ok(levels) => {
                        for (l, s) in levels.iter().enumerate() {
                            let counts = (0..s.num_nodes()).map(|v| s.states(v).len());
                            writeln!(trace, "{i}\t{l}\t{}", join(counts))
                                .expect("writing to a String");
                        }
                    }
                    Err(structcascade_core::Error::Breakdown { .. }) => {
                        writeln!(trace, "{i}\t-\tbreakdown").expect("writing to a String");
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }
        grid_rows(&cascade.evaluate(&examples)?)
    } else {
        let cascade: TrainedCascade = load(&a.model)?;
        let data = SequenceDataset::read(&a.data)?;
        let report = evaluate_cascade(&cascade, &data.to_examples())?;
        for (i, run) in report.runs.iter().enumerate() {
            for (l, counts) in run.survivors.iter().enumerate() {
                writeln!(trace, "{i}\t{l}\t{}", join(counts.iter().copied()))
                    .expect("writing to a String");
            }
        }
        sequence_rows(&cascade, &report.levels, &report.final_metrics)
    };
    if let Some(p) = &a.trace {
        write_file(p, &trace)?;
    }
    emit(a.out.as_deref(), &metrics::to_tsv(&rows))
}

pub const FILTER_STATS_HEADER: &str =
    "level\talpha\tfilter_loss\tpruned_loss\tefficiency_loss\tdensity\texamples";

fn cmd_filter_stats(a: &FilterStatsArgs) -> Result<()> {
    if let Some(alpha) = a.alpha {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Invalid(format!("alpha {alpha} outside [0, 1]")));
        }
    }
    let mut out = String::from(FILTER_STATS_HEADER);
    out.push('\n');
    if a.ensemble {
        let mut cascade: GridCascade = load(&a.model)?;
        if let Some(alpha) = a.alpha {
            cascade.levels.iter_mut().for_each(|l| l.alpha = alpha);
        }
        let data = GridDataset::read(&a.data)?;
        for (i, m) in cascade.evaluate(&data.to_examples())?.iter().enumerate() {
            writeln!(
                out,
                "{i}\t{}\t{}\t{}\t{}\t{}\t{}",
                m.alpha, m.filter_loss, m.filter_loss, m.efficiency_loss, m.density, m.examples
            )
            .expect("writing to a String");
        }
    } else {
        let mut cascade: TrainedCascade = load(&a.model)?;
        if let Some(alpha) = a.alpha {
            cascade.levels.iter_mut().for_each(|l| l.alpha = alpha);
        }
        let data = SequenceDataset::read(&a.data)?;
        let report = evaluate_cascade(&cascade, &data.to_examples())?;
        for (i, m) in report.levels.iter().enumerate() {
            writeln!(
                out,
                "{i}\t{}\t{}\t{}\t{}\t{}\t{}",
                m.alpha, m.filter_loss, m.pruned_loss, m.efficiency_loss, m.density, m.examples
            )
            .expect("writing to a String");
        }
    }
    emit(None, &out)
}

fn cmd_grid_bench(a: &GridBenchArgs) -> Result<()> {
    let rows = grid_bench(a.rows, a.cols, a.states, a.count, a.seed)?;
    let mut csv = String::from(bench::HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.to_csv());
        csv.push('\n');
    }
    emit(a.out.as_deref(), &csv)
}
