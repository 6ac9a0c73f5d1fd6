//! Experiment plans, resumable parallel execution, and persisted records.

pub mod report;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::algorithms::hparams::{self, Hyperparams};
use crate::algorithms::runner::{run, Method, RunConfig};
use crate::algorithms::Penalty;
use crate::data::{load_dir, write_dir, SplitSet};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::quantify::{dominant_shift, fingerprint, ShiftFingerprint, Thresholds};
use crate::selection::{select_checkpoint, Regime, Strategy};
use crate::shiftgen::{generate, GenSpec, ShiftType};
use crate::trainer::{Architecture, Checkpoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Generated(GenSpec),
    /// Directory holding train.csv, val.csv and test.csv.
    Csv(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub name: String,
    pub source: DatasetSource,
}

impl DatasetEntry {
    pub fn load(&self) -> Result<SplitSet> {
        match &self.source {
            DatasetSource::Generated(spec) => generate(spec),
            DatasetSource::Csv(dir) => load_dir(dir),
        }
    }
}

fn default_regimes() -> Vec<Regime> {
    vec![Regime::TT]
}
fn default_seeds() -> usize {
    3
}
fn default_trials() -> usize {
    16
}
fn default_strategy() -> Strategy {
    Strategy::MaxWorstGroupAcc
}
fn default_steps() -> usize {
    1000
}

/// The experiment grid: datasets × methods × regimes × trials × seeds.
///
/// Trial 0 uses the default hyperparameters and later trials sample the
/// search space. With more than one trial, every trial is trained once
/// (seed index 0) and the winner under `strategy` is re-trained with seed
/// indices `1..=seeds`; with one trial, trial 0 is trained with seed
/// indices `0..seeds`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub datasets: Vec<DatasetEntry>,
    pub methods: Vec<Method>,
    #[serde(default = "default_regimes")]
    pub regimes: Vec<Regime>,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub plan_seed: u64,
    #[serde(default = "default_steps")]
    pub num_steps: usize,
    #[serde(default)]
    pub arch: Architecture,
    #[serde(default)]
    pub eval_every: Option<usize>,
    /// Lets attribute-requiring methods run on class-degenerated groups.
    #[serde(default)]
    pub allow_degenerate: bool,
    #[serde(default)]
    pub dfr_penalty: Penalty,
    /// Per-method overrides applied on top of every trial's values.
    #[serde(default)]
    pub fixed_hparams: BTreeMap<String, Hyperparams>,
}

impl ExperimentPlan {
    pub fn new(datasets: Vec<DatasetEntry>, methods: Vec<Method>) -> Self {
        Self {
            datasets,
            methods,
            regimes: default_regimes(),
            seeds: default_seeds(),
            trials: default_trials(),
            strategy: default_strategy(),
            plan_seed: 0,
            num_steps: default_steps(),
            arch: Architecture::default(),
            eval_every: None,
            allow_degenerate: false,
            dfr_penalty: Penalty::L2,
            fixed_hparams: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() || self.methods.is_empty() || self.regimes.is_empty() {
            return Err(Error::Config("plan needs datasets, methods and regimes".into()));
        }
        if self.seeds == 0 || self.trials == 0 || self.num_steps == 0 {
            return Err(Error::Config("seeds, trials and num_steps must be positive".into()));
        }
        let mut names: Vec<&str> = self.datasets.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("dataset names must be unique".into()));
        }
        if names.iter().any(|n| n.is_empty() || n.contains(['/', '\\'])) {
            return Err(Error::Config("dataset names must be nonempty and contain no path separators".into()));
        }
        for r in &self.regimes {
            Regime::new(r.train_attrs_known, r.val_attrs_known)?;
        }
        Ok(())
    }

    /// (method, regime) pairs that will not run, with the reason.
    pub fn skipped(&self) -> Vec<Skipped> {
        let mut out = Vec::new();
        for &m in &self.methods {
            for &r in &self.regimes {
                if m.requires_train_attributes() && !r.train_attrs_known && !self.allow_degenerate {
                    out.push(Skipped {
                        method: m,
                        regime: r,
                        reason: format!("{m} needs train attributes and degeneration to classes is disabled"),
                    });
                }
            }
        }
        out
    }

    fn feasible(&self, m: Method, r: Regime) -> bool {
        !(m.requires_train_attributes() && !r.train_attrs_known && !self.allow_degenerate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub method: Method,
    pub regime: Regime,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coordinates {
    pub dataset: String,
    pub method: Method,
    pub regime: Regime,
    pub trial: usize,
    pub seed_index: usize,
}

/// First 8 bytes of the SHA-256 of the `|`-joined parts.
fn hash_u64(parts: &[&str]) -> u64 {
    let digest = Sha256::digest(parts.join("|").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Training seed of a grid cell; the regime is deliberately excluded so
/// regimes are compared on identical initializations and batches.
pub fn run_seed(plan_seed: u64, dataset: &str, method: Method, trial: usize, seed_index: usize) -> u64 {
    hash_u64(&[
        &plan_seed.to_string(),
        dataset,
        &method.to_string(),
        &trial.to_string(),
        &seed_index.to_string(),
    ])
}

/// Hyperparameters of `trial` for `method` on `dataset`.
pub fn trial_hparams(plan: &ExperimentPlan, dataset: &str, method: Method, trial: usize) -> Hyperparams {
    let alg = method.hparam_algorithm();
    let mut hp = if trial == 0 {
        hparams::defaults(alg)
    } else {
        let seed = hash_u64(&[&plan.plan_seed.to_string(), dataset, &method.to_string(), &trial.to_string(), "hparams"]);
        hparams::sample(alg, &mut ChaCha8Rng::seed_from_u64(seed))
    };
    if let Some(fixed) = plan.fixed_hparams.get(&method.to_string()) {
        for (k, v) in &fixed.0 {
            hp.set(k, *v);
        }
    }
    hp
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// One run per hyperparameter trial.
    Search,
    /// The winning trial re-trained under the reporting seeds.
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub coordinates: Coordinates,
    pub phase: Phase,
    pub seed: u64,
    pub hparams: Hyperparams,
    /// Relative to the plan's output directory.
    pub run_log: PathBuf,
    pub strategy: Strategy,
    /// Index into the run log of the checkpoint chosen by `strategy`.
    pub selected_checkpoint: Option<usize>,
    pub selected_step: Option<usize>,
    pub test: Option<MetricsReport>,
    pub wall_time_secs: f64,
    pub status: Status,
    pub diagnostic: Option<String>,
}

impl RunRecord {
    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &RunRecord) -> bool {
        let mut a = self.clone();
        a.wall_time_secs = other.wall_time_secs;
        &a == other
    }

    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }

    pub fn test_wga(&self) -> Option<f64> {
        self.test.as_ref().map(|t| t.worst_group_acc)
    }
}

/// Per-dataset shift quantification persisted next to the records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    pub fingerprint: ShiftFingerprint,
    pub dominant_shift: ShiftType,
}

#[derive(Clone, Debug)]
pub struct PlanOutcome {
    pub records: Vec<RecordWithLog>,
    pub trained: usize,
    pub reused: usize,
    pub skipped: Vec<Skipped>,
}

/// A record together with its checkpoint log (models stripped).
#[derive(Clone, Debug)]
pub struct RecordWithLog {
    pub record: RunRecord,
    pub log: Vec<Checkpoint>,
}

pub const RECORDS_FILE: &str = "records.jsonl";
pub const DATASETS_FILE: &str = "datasets.json";

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_run_log(path: &Path, log: &[Checkpoint]) -> Result<()> {
    let mut buf = Vec::new();
    for c in log {
        serde_json::to_writer(&mut buf, c)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn read_run_log(path: &Path) -> Result<Vec<Checkpoint>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

struct Job {
    coords: Coordinates,
    phase: Phase,
    config: RunConfig,
    source: DatasetSource,
}

impl Job {
    fn key(&self) -> Result<String> {
        let payload = serde_json::to_string(&(&self.coords, &self.phase, &self.config, &self.source))?;
        Ok(hex::encode(&Sha256::digest(payload.as_bytes())[..16]))
    }
}

fn execute(job: &Job, splits: &SplitSet, strategy: Strategy, out: &Path) -> Result<(RecordWithLog, bool)> {
    let key = job.key()?;
    let record_path = out.join("runs").join(format!("{key}.json"));
    let log_rel = PathBuf::from("logs").join(format!("{key}.jsonl"));
    if record_path.exists() {
        let text = fs::read_to_string(&record_path).map_err(|e| Error::io(&record_path, e))?;
        let record: RunRecord = serde_json::from_str(&text)?;
        let log = if record.is_ok() { read_run_log(&out.join(&record.run_log))? } else { Vec::new() };
        return Ok((RecordWithLog { record, log }, false));
    }
    let start = Instant::now();
    let result = run(&job.config, splits).and_then(|o| {
        let mut log = o.checkpoints;
        for c in &mut log {
            c.model = None;
        }
        let idx = select_checkpoint(&log, strategy, job.config.regime)?;
        Ok((log, idx))
    });
    let wall = start.elapsed().as_secs_f64();
    let mut record = RunRecord {
        coordinates: job.coords.clone(),
        phase: job.phase,
        seed: job.config.seed,
        hparams: job.config.hparams.clone(),
        run_log: log_rel.clone(),
        strategy,
        selected_checkpoint: None,
        selected_step: None,
        test: None,
        wall_time_secs: wall,
        status: Status::Ok,
        diagnostic: None,
    };
    let log = match result {
        Ok((log, idx)) => {
            record.selected_checkpoint = Some(idx);
            record.selected_step = Some(log[idx].step);
            record.test = Some(log[idx].test.clone());
            write_run_log(&out.join(&log_rel), &log)?;
            log
        }
        Err(e) => {
            warn!("run {:?} failed: {e}", job.coords);
            record.status = Status::Failed;
            record.diagnostic = Some(e.to_string());
            Vec::new()
        }
    };
    write_atomic(&record_path, &serde_json::to_vec_pretty(&record)?)?;
    Ok((RecordWithLog { record, log }, true))
}

fn make_job(plan: &ExperimentPlan, d: &DatasetEntry, m: Method, r: Regime, trial: usize, seed_index: usize, phase: Phase) -> Job {
    let mut config = RunConfig::new(m, run_seed(plan.plan_seed, &d.name, m, trial, seed_index), r);
    config.hparams = trial_hparams(plan, &d.name, m, trial);
    config.arch = plan.arch;
    config.num_steps = plan.num_steps;
    config.eval_every = plan.eval_every;
    config.allow_degenerate = plan.allow_degenerate;
    config.dfr_penalty = plan.dfr_penalty;
    Job {
        coords: Coordinates {
            dataset: d.name.clone(),
            method: m,
            regime: r,
            trial,
            seed_index,
        },
        phase,
        config,
        source: d.source.clone(),
    }
}

fn run_jobs(
    jobs: &[Job],
    data: &BTreeMap<String, SplitSet>,
    strategy: Strategy,
    out: &Path,
    pool: &rayon::ThreadPool,
) -> Result<Vec<(RecordWithLog, bool)>> {
    pool.install(|| {
        jobs.par_iter()
            .map(|j| execute(j, &data[&j.coords.dataset], strategy, out))
            .collect()
    })
}

/// Runs the plan with at most `workers` concurrent runs (0 = all cores),
/// skipping every run whose record already exists under `out`.
pub fn run_plan(plan: &ExperimentPlan, out: &Path, workers: usize) -> Result<PlanOutcome> {
    plan.validate()?;
    for sub in ["runs", "logs", "datasets"] {
        fs::create_dir_all(out.join(sub)).map_err(|e| Error::io(out.join(sub), e))?;
    }
    write_atomic(&out.join("plan.json"), &serde_json::to_vec_pretty(plan)?)?;
    let skipped = plan.skipped();
    for s in &skipped {
        info!("skipping {} under {}: {}", s.method, s.regime, s.reason);
    }
    write_atomic(&out.join("skipped.json"), &serde_json::to_vec_pretty(&skipped)?)?;

    let mut data = BTreeMap::new();
    let mut summaries = Vec::new();
    for d in &plan.datasets {
        let splits = d.load()?;
        let fp = fingerprint(&splits.train, &splits.test)?;
        summaries.push(DatasetSummary {
            name: d.name.clone(),
            dominant_shift: dominant_shift(&fp, Thresholds::default()),
            fingerprint: fp,
        });
        let dir = out.join("datasets").join(&d.name);
        if !dir.join("test.csv").exists() {
            write_dir(&splits, &dir)?;
        }
        data.insert(d.name.clone(), splits);
    }
    write_atomic(&out.join(DATASETS_FILE), &serde_json::to_vec_pretty(&summaries)?)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let cells: Vec<(&DatasetEntry, Method, Regime)> = plan
        .datasets
        .iter()
        .flat_map(|d| {
            plan.methods
                .iter()
                .flat_map(move |&m| plan.regimes.iter().map(move |&r| (d, m, r)))
        })
        .filter(|&(_, m, r)| plan.feasible(m, r))
        .collect();

    let mut results = Vec::new();
    let winners: Vec<usize> = if plan.trials > 1 {
        let search: Vec<Job> = cells
            .iter()
            .flat_map(|&(d, m, r)| (0..plan.trials).map(move |t| make_job(plan, d, m, r, t, 0, Phase::Search)))
            .collect();
        let found = run_jobs(&search, &data, plan.strategy, out, &pool)?;
        let winners = found
            .chunks(plan.trials)
            .map(|chunk| winning_trial(chunk.iter().map(|(r, _)| r), plan.strategy))
            .collect();
        results.extend(found);
        winners
    } else {
        vec![0; cells.len()]
    };
    let seed_range = if plan.trials > 1 { 1..=plan.seeds } else { 0..=plan.seeds - 1 };
    let finals: Vec<Job> = cells
        .iter()
        .zip(&winners)
        .flat_map(|(&(d, m, r), &t)| seed_range.clone().map(move |s| make_job(plan, d, m, r, t, s, Phase::Final)))
        .collect();
    results.extend(run_jobs(&finals, &data, plan.strategy, out, &pool)?);

    let trained = results.iter().filter(|(_, fresh)| *fresh).count();
    let reused = results.len() - trained;
    let mut records: Vec<RecordWithLog> = results.into_iter().map(|(r, _)| r).collect();
    records.sort_by(|a, b| {
        (&a.record.coordinates, a.record.phase as u8).cmp(&(&b.record.coordinates, b.record.phase as u8))
    });
    let mut buf = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut buf, &r.record)?;
        buf.write_all(b"\n").map_err(|e| Error::io(out.join(RECORDS_FILE), e))?;
    }
    write_atomic(&out.join(RECORDS_FILE), &buf)?;
    info!("plan done: {trained} trained, {reused} reused");
    Ok(PlanOutcome {
        records,
        trained,
        reused,
        skipped,
    })
}

/// Best trial by the strategy's score at each trial's selected
/// checkpoint; failed trials never win unless all failed. Ties → earliest.
fn winning_trial<'a>(trials: impl Iterator<Item = &'a RecordWithLog>, strategy: Strategy) -> usize {
    let mut best = 0;
    let mut best_score: Option<f64> = None;
    for (t, r) in trials.enumerate() {
        let score = r
            .record
            .selected_checkpoint
            .and_then(|i| r.log.get(i))
            .and_then(|c| strategy.score(r.record.coordinates.regime, &c.val, &c.test));
        if crate::metrics::compare_optional(score, best_score) == std::cmp::Ordering::Greater {
            best = t;
            best_score = score;
        }
    }
    best
}

/// Records of a completed output directory.
pub fn load_records(out: &Path) -> Result<Vec<RunRecord>> {
    let path = out.join(RECORDS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn load_dataset_summaries(out: &Path) -> Result<Vec<DatasetSummary>> {
    let path = out.join(DATASETS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}
