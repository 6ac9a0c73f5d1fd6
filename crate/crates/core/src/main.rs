use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use subpop_lab::algorithms::{run, Method, RunConfig};
use subpop_lab::data::{load_dir, write_dir};
use subpop_lab::harness::report::write_reports;
use subpop_lab::harness::{
    load_records, read_run_log, run_plan, write_run_log, Coordinates, ExperimentPlan, Phase, RunRecord, Status,
    RECORDS_FILE,
};
use subpop_lab::quantify::{dominant_shift, fingerprint, ShiftFingerprint, Thresholds};
use subpop_lab::selection::{select, select_checkpoint, Regime, SelectionOutcome, Strategy};
use subpop_lab::shiftgen::{generate, GenSpec, ShiftType};
use subpop_lab::{Error, Result};

#[derive(Parser)]
#[command(name = "subpop-lab", version, about = "Subpopulation-shift laboratory")]
struct Cli {
    /// Overrides the seed of the generator spec, run config or plan.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Concurrent runs for `sweep` (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Output file or directory of the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a JSON generator spec.
    Generate {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Quantify the shift of a dataset directory.
    Quantify {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train one model from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "max_worst_group_acc")]
        strategy: String,
    },
    /// Execute a JSON experiment plan (resumable).
    Sweep {
        #[arg(long)]
        plan: PathBuf,
    },
    /// Apply a selection strategy to stored runs.
    Select {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        strategy: String,
        #[arg(long, default_value = "FF")]
        regime: String,
    },
    /// Write report tables for a sweep output directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::Config(format!("{}: {e}", parent.display())))?;
            }
            fs::write(p, text + "\n").map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn require_out(out: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    out.ok_or_else(|| Error::Config(format!("{what} needs --out")))
}

#[derive(Serialize)]
struct QuantifyOutput {
    fingerprint: ShiftFingerprint,
    dominant_shift: ShiftType,
}

#[derive(Serialize)]
struct LabeledOutcome {
    dataset: String,
    method: Method,
    regime: Regime,
    phase: Phase,
    seed_index: Option<usize>,
    outcome: SelectionOutcome,
}

fn cmd_generate(spec_path: &Path, seed: Option<u64>, out: PathBuf) -> Result<()> {
    let mut spec: GenSpec = read_json(spec_path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let splits = generate(&spec)?;
    write_dir(&splits, &out)?;
    emit(&spec, Some(&out.join("meta.json")))?;
    eprintln!(
        "wrote {} train / {} val / {} test rows to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_quantify(data: &Path, out: Option<&Path>) -> Result<()> {
    let splits = load_dir(data)?;
    let fp = fingerprint(&splits.train, &splits.test)?;
    let dominant = dominant_shift(&fp, Thresholds::default());
    emit(
        &QuantifyOutput {
            fingerprint: fp,
            dominant_shift: dominant,
        },
        out,
    )
}

fn cmd_train(config: &Path, data: &Path, strategy: &str, seed: Option<u64>, out: PathBuf) -> Result<()> {
    let strategy: Strategy = strategy.parse()?;
    let mut cfg: RunConfig = read_json(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let splits = load_dir(data)?;
    fs::create_dir_all(out.join("logs")).map_err(|e| Error::Config(format!("{}: {e}", out.display())))?;
    let start = Instant::now();
    let mut log = run(&cfg, &splits)?.checkpoints;
    for c in &mut log {
        c.model = None;
    }
    let idx = select_checkpoint(&log, strategy, cfg.regime)?;
    let log_rel = PathBuf::from("logs").join("run.jsonl");
    write_run_log(&out.join(&log_rel), &log)?;
    let dataset = data
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    let record = RunRecord {
        coordinates: Coordinates {
            dataset,
            method: cfg.method,
            regime: cfg.regime,
            trial: 0,
            seed_index: 0,
        },
        phase: Phase::Final,
        seed: cfg.seed,
        hparams: cfg.resolved_hparams(),
        run_log: log_rel,
        strategy,
        selected_checkpoint: Some(idx),
        selected_step: Some(log[idx].step),
        test: Some(log[idx].test.clone()),
        wall_time_secs: start.elapsed().as_secs_f64(),
        status: Status::Ok,
        diagnostic: None,
    };
    let line = serde_json::to_string(&record)? + "\n";
    fs::write(out.join(RECORDS_FILE), line).map_err(|e| Error::Config(format!("{}: {e}", out.display())))?;
    emit(&record, None)
}

fn cmd_sweep(plan_path: &Path, seed: Option<u64>, workers: usize, out: PathBuf) -> Result<()> {
    let mut plan: ExperimentPlan = read_json(plan_path)?;
    if let Some(s) = seed {
        plan.plan_seed = s;
    }
    let outcome = run_plan(&plan, &out, workers)?;
    let failed = outcome.records.iter().filter(|r| !r.record.is_ok()).count();
    eprintln!(
        "{} records ({} trained, {} reused, {} failed, {} skipped pairs) in {}",
        outcome.records.len(),
        outcome.trained,
        outcome.reused,
        failed,
        outcome.skipped.len(),
        out.display()
    );
    Ok(())
}

/// Search-phase trials are selected jointly per (dataset, method, regime);
/// every other record is its own unit.
fn cmd_select(runs: &Path, strategy: &str, regime: &str, out: Option<&Path>) -> Result<()> {
    let strategy: Strategy = strategy.parse()?;
    let regime: Regime = regime.parse()?;
    let records: Vec<RunRecord> = load_records(runs)?
        .into_iter()
        .filter(|r| r.is_ok() && r.coordinates.regime == regime)
        .collect();
    if records.is_empty() {
        return Err(Error::Config(format!("no successful runs under regime {regime} in {}", runs.display())));
    }
    let mut units: BTreeMap<(String, Method, u8, Option<usize>), Vec<&RunRecord>> = BTreeMap::new();
    for r in &records {
        let c = &r.coordinates;
        let seed = (r.phase == Phase::Final).then_some(c.seed_index);
        units
            .entry((c.dataset.clone(), c.method, r.phase as u8, seed))
            .or_default()
            .push(r);
    }
    let mut labeled = Vec::new();
    for ((dataset, method, _, seed_index), mut recs) in units {
        recs.sort_by_key(|r| r.coordinates.trial);
        let trials = recs
            .iter()
            .map(|r| read_run_log(&runs.join(&r.run_log)))
            .collect::<Result<Vec<_>>>()?;
        let mut outcome = select(&trials, strategy, regime)?;
        outcome.trial = recs[outcome.trial].coordinates.trial;
        labeled.push(LabeledOutcome {
            dataset,
            method,
            regime,
            phase: recs[0].phase,
            seed_index,
            outcome,
        });
    }
    if labeled.len() == 1 {
        emit(&labeled.pop().expect("one").outcome, out)
    } else {
        emit(&labeled, out)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { spec } => require_out(cli.out, "generate").and_then(|o| cmd_generate(&spec, cli.seed, o)),
        Command::Quantify { data } => cmd_quantify(&data, cli.out.as_deref()),
        Command::Train {
            config,
            data,
            strategy,
        } => require_out(cli.out, "train").and_then(|o| cmd_train(&config, &data, &strategy, cli.seed, o)),
        Command::Sweep { plan } => require_out(cli.out, "sweep").and_then(|o| cmd_sweep(&plan, cli.seed, cli.workers, o)),
        Command::Select {
            runs,
            strategy,
            regime,
        } => cmd_select(&runs, &strategy, &regime, cli.out.as_deref()),
        Command::Report { runs } => {
            let dest = cli.out.unwrap_or_else(|| runs.join("reports"));
            write_reports(&runs, &dest).map(|paths| {
                for p in paths {
                    eprintln!("wrote {}", p.display());
                }
            })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
