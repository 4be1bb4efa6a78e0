//! Command-line front end: `split`, `train`, `score`, `eval`, `report`,
//! `run`. Exit codes: 0 success, 1 runtime failure, 2 usage problems
//! (including a missing config file).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use heldout_core::data::make_holdout_splits;
use heldout_core::metrics::{average_precision, pr_curve};
use heldout_core::rng::SeedTree;
use heldout_core::score::ScoredExample;

use crate::checkpoint;
use crate::error::{CliError, Result};
use crate::experiment::{self, ExperimentConfig, ExperimentRecord};
use crate::report::{self, ReportFormat};

#[derive(Parser)]
#[command(
    name = "heldout",
    about = "Hold-one-class-out anomaly detection benchmark",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the hold-out protocol a config describes
    Split(SplitArgs),
    /// Train one (split, trial) cell and write a checkpoint
    Train(TrainArgs),
    /// Score one split's test set with a saved checkpoint
    Score(ScoreArgs),
    /// Compute average precision from a scores CSV
    Eval(EvalArgs),
    /// Render a persisted experiment record as a table
    Report(ReportArgs),
    /// Run every (split, trial) cell of an experiment
    Run(RunArgs),
}

#[derive(Args)]
struct SplitArgs {
    /// Experiment config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Split index (which class is held out)
    #[arg(long, default_value_t = 0)]
    split: usize,
    /// Trial index within the split
    #[arg(long, default_value_t = 0)]
    trial: usize,
    /// Directory for the checkpoint
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint written by `train`
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0)]
    split: usize,
    /// Directory for per-scorer CSVs
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Scores CSV (example_index,score,is_anomaly)
    #[arg(long)]
    scores: PathBuf,
    /// Optional flags CSV (example_index,is_anomaly) overriding the
    /// scores file's flags
    #[arg(long)]
    flags: Option<PathBuf>,
    /// Directory for the PR-curve CSV
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// record.json written by `run`
    #[arg(long)]
    record: PathBuf,
    /// markdown or csv
    #[arg(long, default_value = "markdown")]
    format: String,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for cells, record, and reports
    #[arg(long)]
    out: PathBuf,
    /// Reuse completed cells found in the output directory
    #[arg(long)]
    resume: bool,
}

/// Entry point used by `main` and by tests; returns the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config_with_seed(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = experiment::load_config(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Split(args) => cmd_split(args),
        Command::Train(args) => cmd_train(args),
        Command::Score(args) => cmd_score(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
        Command::Run(args) => cmd_run(args),
    }
}

fn protocol_splits(
    cfg: &ExperimentConfig,
) -> Result<(Vec<heldout_core::data::HoldOutSplit>, Vec<String>)> {
    let exp = SeedTree::new(cfg.seed);
    let (train, test) = experiment::load_datasets(cfg, &exp)?;
    let names = train.class_names().to_vec();
    let splits = make_holdout_splits(&train, &test, cfg.trials_per_split)?;
    Ok((splits, names))
}

fn cmd_split(args: SplitArgs) -> Result<i32> {
    let cfg = load_config_with_seed(&args.config, args.seed)?;
    let (splits, names) = protocol_splits(&cfg)?;
    for (k, split) in splits.iter().enumerate() {
        println!(
            "split {k}: held-out {}, train {} examples over {} classes, test {} examples, skew {:.4}, trials {}",
            names[split.held_out_class],
            split.train.len(),
            split.train.n_classes(),
            split.test_examples.len(),
            split.skew,
            split.trials
        );
    }
    Ok(0)
}

fn cell_tree(cfg: &ExperimentConfig, split: usize, trial: usize) -> SeedTree {
    SeedTree::new(cfg.seed)
        .child("split")
        .child_index(split as u64)
        .child("trial")
        .child_index(trial as u64)
}

fn pick_split(
    splits: &[heldout_core::data::HoldOutSplit],
    k: usize,
) -> Result<&heldout_core::data::HoldOutSplit> {
    splits.get(k).ok_or_else(|| {
        CliError::Usage(format!(
            "split {k} out of range; the protocol has {} splits",
            splits.len()
        ))
    })
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let cfg = load_config_with_seed(&args.config, args.seed)?;
    if args.trial >= cfg.trials_per_split {
        return Err(CliError::Usage(format!(
            "trial {} out of range; the config runs {} trials per split",
            args.trial, cfg.trials_per_split
        )));
    }
    let (splits, names) = protocol_splits(&cfg)?;
    let split = pick_split(&splits, args.split)?;
    let in_channels = split
        .train
        .image_shape()
        .map(|(c, _, _)| c)
        .ok_or_else(|| CliError::Config("empty training set".into()))?;
    let cell = cell_tree(&cfg, args.split, args.trial);
    let arch = heldout_core::model::CnnConfig {
        in_channels,
        widths: cfg.model.widths.clone(),
        cpc_steps: cfg.model.cpc_steps,
    };
    let model = heldout_core::model::build_model(
        &arch,
        split.train.n_classes(),
        cfg.train.aux_task()?,
        &cell.child("init"),
    )?;
    let tc = cfg.train.to_train_config(cell.child("train").key())?;
    let (trained, log) = heldout_core::model::train(model, split, &tc)?;
    let accuracy = experiment::model_accuracy(&trained, split)?;

    ensure_dir(&args.out)?;
    let path = args
        .out
        .join(format!("model_split{}_trial{}.semm", args.split, args.trial));
    checkpoint::save_model(&path, &trained)?;
    println!(
        "split {} (held-out {}) trial {}: {} epochs, test accuracy {:.4}, checkpoint {}",
        args.split,
        names[split.held_out_class],
        args.trial,
        log.epochs.len(),
        accuracy,
        path.display()
    );
    Ok(0)
}

fn cmd_score(args: ScoreArgs) -> Result<i32> {
    let cfg = load_config_with_seed(&args.config, args.seed)?;
    let (splits, _) = protocol_splits(&cfg)?;
    let split = pick_split(&splits, args.split)?;
    let model = checkpoint::load_model(&args.model)?;
    if model.n_classes != split.train.n_classes() {
        return Err(CliError::Config(format!(
            "checkpoint has {} classes but split {} trains {}",
            model.n_classes,
            args.split,
            split.train.n_classes()
        )));
    }
    ensure_dir(&args.out)?;
    for spec in &cfg.scorers {
        let scored = experiment::score_split(spec, Some(&model), split)?;
        let path = args.out.join(format!("{}.csv", spec.name()));
        fs::write(&path, report::scores_csv(&scored)).map_err(|e| CliError::io(&path, e))?;
        let ap = average_precision(&scored)?;
        println!(
            "{}: ap {:.4} over {} examples (skew {:.4}), scores {}",
            spec.name(),
            ap.average_precision,
            scored.len(),
            ap.skew,
            path.display()
        );
    }
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let text = fs::read_to_string(&args.scores).map_err(|e| CliError::io(&args.scores, e))?;
    let mut scored = report::parse_scores_csv(&text)?;
    if let Some(flags_path) = &args.flags {
        let flags_text =
            fs::read_to_string(flags_path).map_err(|e| CliError::io(flags_path, e))?;
        let flags = report::parse_flags_csv(&flags_text)?;
        if flags.len() != scored.len() {
            return Err(CliError::Config(format!(
                "{} scores but {} flags",
                scored.len(),
                flags.len()
            )));
        }
        scored = scored
            .iter()
            .zip(&flags)
            .map(|(s, &f)| ScoredExample {
                score: s.score,
                is_anomaly: f,
            })
            .collect();
    }
    let ap = average_precision(&scored)?;
    println!("ap {}", report::full_precision(ap.average_precision));
    println!(
        "n {} positives {} negatives {} skew {}",
        scored.len(),
        ap.n_pos,
        ap.n_neg,
        report::full_precision(ap.skew)
    );
    if let Some(out) = &args.out {
        ensure_dir(out)?;
        let points = pr_curve(&scored)?;
        let path = out.join("pr.csv");
        fs::write(&path, report::pr_csv(&points)).map_err(|e| CliError::io(&path, e))?;
        println!("pr curve {}", path.display());
    }
    Ok(0)
}

fn cmd_report(args: ReportArgs) -> Result<i32> {
    let format: ReportFormat = args.format.parse()?;
    let text = fs::read_to_string(&args.record).map_err(|e| CliError::io(&args.record, e))?;
    let record: ExperimentRecord = serde_json::from_str(&text).map_err(|e| CliError::Json {
        path: args.record.clone(),
        detail: e.to_string(),
    })?;
    print!("{}", report::emit_report(&record, format));
    Ok(0)
}

fn cmd_run(args: RunArgs) -> Result<i32> {
    let cfg = load_config_with_seed(&args.config, args.seed)?;
    let (record, stats) = experiment::run_experiment(&cfg, &args.out, args.resume)?;
    println!(
        "{} cells computed, {} reused, {} failed; record {}",
        stats.computed,
        stats.reused,
        stats.failed,
        args.out.join("record.json").display()
    );
    if stats.failed > 0 {
        let failed: Vec<String> = record
            .splits
            .iter()
            .enumerate()
            .flat_map(|(k, s)| {
                s.trials.iter().filter_map(move |t| match &t.outcome {
                    experiment::TrialOutcome::Failed { error } => {
                        Some(format!("split {k} trial {}: {error}", t.trial))
                    }
                    experiment::TrialOutcome::Ok(_) => None,
                })
            })
            .collect();
        eprintln!("error: {} cells failed ({})", stats.failed, failed.join("; "));
        return Ok(1);
    }
    Ok(0)
}
