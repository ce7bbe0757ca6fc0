//! `ccf` command-line driver.
//!
//! Every subcommand prints one JSON summary line listing the artifacts it wrote.
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use ccf_core::baselines::MostPop;
use ccf_core::dataset::{self, Partition, RatingScale, DEFAULT_MAX_HISTORY};
use ccf_core::eval::{evaluate, MetricsFile};
use ccf_core::models::{Model, Scorer};
use ccf_core::simulator::{self, SimulateConfig};
use ccf_core::sweep::{self, SweepConfig};
use ccf_core::training::{self, TrainConfig};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "ccf", version, about = "Counterfactual-constrained recommender training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic world with observational and randomized logs.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a rating log into train/validation/test.
    Split {
        #[arg(long)]
        input: PathBuf,
        /// Randomized-trial test log; without it the split is leave-one-out.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_MAX_HISTORY)]
        max_history: usize,
    },
    /// Train a model on a split directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint (or `mostpop`) on a split partition.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        partition: PartitionArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid search with validation-based selection.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PartitionArg {
    Validation,
    Test,
}

impl From<PartitionArg> for Partition {
    fn from(p: PartitionArg) -> Self {
        match p {
            PartitionArg::Validation => Partition::Validation,
            PartitionArg::Test => Partition::Test,
        }
    }
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome = std::result::Result<Value, Failure>;

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn read_config(path: &Path) -> std::result::Result<String, Failure> {
    fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .map_err(usage)
}

fn paths(ps: &[PathBuf]) -> Value {
    Value::from(ps.iter().map(|p| p.display().to_string()).collect::<Vec<_>>())
}

fn cmd_simulate(config: &Path, out: &Path) -> Outcome {
    let cfg = SimulateConfig::from_json(&read_config(config)?)
        .with_context(|| format!("invalid simulate config {}", config.display()))
        .map_err(usage)?;
    let sim = simulator::simulate(&cfg).map_err(runtime)?;
    let written = simulator::write_simulation(out, &sim).map_err(runtime)?;
    Ok(json!({
        "command": "simulate",
        "artifacts": paths(&written),
        "observational": sim.observational.len(),
        "randomized": sim.randomized.interactions.len(),
        "excluded_users": sim.randomized.excluded_users.len(),
    }))
}

fn cmd_split(input: &Path, test: Option<&Path>, out: &Path, seed: u64, max_history: usize) -> Outcome {
    let mut files = vec![input];
    files.extend(test);
    let (logs, _) = dataset::read_logs(&files, RatingScale::Auto).map_err(runtime)?;
    let ds = match &logs[..] {
        [single] => dataset::leave_one_out_split(single, max_history),
        [train, test] => dataset::randomized_trial_split(train, test, seed, max_history),
        _ => unreachable!("one or two input files"),
    }
    .map_err(runtime)?;
    let written = dataset::write_split(out, &ds, seed).map_err(runtime)?;
    Ok(json!({
        "command": "split",
        "artifacts": paths(&written),
        "num_users": ds.num_users(),
        "num_items": ds.num_items(),
        "train": ds.train.len(),
        "validation": ds.validation.len(),
        "test": ds.test.len(),
    }))
}

fn cmd_train(config: &Path, data: &Path, out: &Path) -> Outcome {
    let cfg = TrainConfig::from_json(&read_config(config)?)
        .with_context(|| format!("invalid train config {}", config.display()))
        .map_err(usage)?;
    let (ds, _) = dataset::read_split(data).map_err(runtime)?;
    let trained = training::train(&ds, &cfg).map_err(runtime)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .with_context(|| format!("cannot create {}", dir.display()))
            .map_err(runtime)?;
    }
    trained.model.save(out).map_err(runtime)?;
    let trace = out.with_file_name("trace.csv");
    training::write_trace(&trace, &trained.trace).map_err(runtime)?;
    let last = trained.trace.last();
    let mut summary = json!({
        "command": "train",
        "artifacts": paths(&[out.to_path_buf(), trace]),
        "model": cfg.model_type.as_str(),
        "rule": cfg.rule.code(),
        "epochs": trained.trace.len(),
        "final_rank_loss": last.map(|t| t.rank_loss),
    });
    if let Some(s) = trained.selection {
        summary["counterfactuals"] = json!({
            "generated": s.generated,
            "passed": s.passed,
            "selected": s.selected,
        });
    }
    Ok(summary)
}

fn cmd_eval(model: &Path, data: &Path, partition: Partition, out: Option<&Path>) -> Outcome {
    let (ds, meta) = dataset::read_split(data).map_err(runtime)?;
    let scorer: Box<dyn Scorer> = if model.as_os_str() == "mostpop" {
        Box::new(MostPop::from_dataset(&ds))
    } else {
        let m = Model::load(model).map_err(runtime)?;
        if m.num_users() != ds.num_users() || m.num_items() != ds.num_items() {
            return Err(runtime(anyhow!(
                "checkpoint covers {} users x {} items, split has {} x {}",
                m.num_users(),
                m.num_items(),
                ds.num_users(),
                ds.num_items()
            )));
        }
        Box::new(m)
    };
    let report = evaluate(scorer.as_ref(), &ds, partition, meta.seed).map_err(runtime)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| {
        model
            .parent()
            .filter(|d| !d.as_os_str().is_empty() && model.as_os_str() != "mostpop")
            .unwrap_or(Path::new("."))
            .join("metrics.json")
    });
    let file = MetricsFile::new(&report, scorer.name(), partition, meta.seed);
    file.write(&out).map_err(runtime)?;
    Ok(json!({
        "command": "eval",
        "artifacts": paths(&[out]),
        "ndcg@10": file.ndcg_at_10,
        "hit@1": file.hit_at_1,
        "num_users": file.num_users,
    }))
}

fn cmd_sweep(config: &Path, data: &Path, out: &Path) -> Outcome {
    let cfg = SweepConfig::from_json(&read_config(config)?)
        .with_context(|| format!("invalid sweep config {}", config.display()))
        .map_err(usage)?;
    let (ds, meta) = dataset::read_split(data).map_err(runtime)?;
    let outcome = sweep::run_sweep(&ds, &cfg, meta.seed).map_err(runtime)?;
    let written = sweep::write_outputs(out, &outcome).map_err(runtime)?;
    let failed = outcome.rows.iter().filter(|r| r.test().is_none()).count();
    Ok(json!({
        "command": "sweep",
        "artifacts": paths(&written),
        "points": outcome.rows.len(),
        "failed": failed,
        "best": outcome.best,
    }))
}

fn dispatch(cli: Cli) -> Outcome {
    match cli.command {
        Command::Simulate { config, out } => cmd_simulate(&config, &out),
        Command::Split {
            input,
            test,
            out,
            seed,
            max_history,
        } => cmd_split(&input, test.as_deref(), &out, seed, max_history),
        Command::Train { config, data, out } => cmd_train(&config, &data, &out),
        Command::Eval {
            model,
            data,
            partition,
            out,
        } => cmd_eval(&model, &data, partition.into(), out.as_deref()),
        Command::Sweep { config, data, out } => cmd_sweep(&config, &data, &out),
    }
}

/// Run the CLI on `argv` (program name first) and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}
