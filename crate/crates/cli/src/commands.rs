use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use parec::analysis::{
    attention_map, export_grid, grid_file_name, model_positional_correlation, GridFormat,
};
use parec::dataset::{
    dataset_stats, load_interactions, preprocess, DatasetStats, FilterMode, InteractionDataset,
    LogFormat, Phase, PreprocessConfig, DATASET_HEADER, DATASET_TSV,
};
use parec::evaluation::{evaluate, RankingReport};
use parec::model::{
    load_checkpoint, save_checkpoint, AttentionSpec, CheckpointManifest, ModelParams, ModelSpec,
    CHECKPOINT_JSON,
};
use parec::training::{run_experiment_with, train_with, EpochRecord, ExperimentReport, SELECTION_K};

use crate::config::{Overrides, PhaseArg, RunConfig, Variant};

pub const CONFIG_COPY: &str = "config.json";
pub const RUN_MANIFEST: &str = "run.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const SUMMARY: &str = "summary.json";
pub const EXPERIMENT_REPORT: &str = "experiment.json";
pub const STATS: &str = "stats.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

pub enum Failure {
    /// Invalid invocation or configuration; every problem found.
    Usage(Vec<String>),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = Result<(), Failure>;

fn ensure_valid(problems: Vec<String>) -> Outcome {
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Failure::Usage(problems))
    }
}

fn occupied(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn check_output_dir(dir: &Path, force: bool, problems: &mut Vec<String>) {
    if dir.exists() && !dir.is_dir() {
        problems.push(format!("output {} exists and is not a directory", dir.display()));
    } else if occupied(dir) && !force {
        problems.push(format!(
            "output directory {} is not empty; pass --force to overwrite",
            dir.display()
        ));
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// SHA-256 over the dataset's item table followed by its header.
pub fn dataset_hash(dir: &Path) -> anyhow::Result<String> {
    let mut h = Sha256::new();
    for name in [DATASET_TSV, DATASET_HEADER] {
        let path = dir.join(name);
        h.update(fs::read(&path).with_context(|| format!("reading {}", path.display()))?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, clap::Args)]
pub struct PrepareArgs {
    /// Raw interaction log.
    #[arg(long)]
    pub input: PathBuf,
    /// `dat` (user::item::rating::timestamp) or `tsv` (user, item, timestamp).
    #[arg(long, default_value = "dat")]
    pub format: LogFormat,
    /// Minimum interactions per user and per item.
    #[arg(long = "min-count", default_value_t = 5)]
    pub min_count: usize,
    /// Drop in one sweep instead of iterating to a fixed point.
    #[arg(long = "single-pass")]
    pub single_pass: bool,
    /// Keep a random subset of this many users.
    #[arg(long = "subsample-users")]
    pub subsample_users: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Serialize)]
struct PrepareStats {
    #[serde(flatten)]
    stats: DatasetStats,
    source: PathBuf,
    preprocess: PreprocessConfig,
    subsample_users: Option<usize>,
    seed: u64,
    dataset_hash: String,
}

pub fn prepare(args: &PrepareArgs) -> Outcome {
    let mut problems = Vec::new();
    if !args.input.is_file() {
        problems.push(format!("input file {} does not exist", args.input.display()));
    }
    if args.min_count == 0 {
        problems.push("min-count must be positive".into());
    }
    if args.subsample_users == Some(0) {
        problems.push("subsample-users must be positive".into());
    }
    check_output_dir(&args.out, args.force, &mut problems);
    ensure_valid(problems)?;
    Ok(run_prepare(args)?)
}

fn run_prepare(args: &PrepareArgs) -> anyhow::Result<()> {
    let cfg = PreprocessConfig {
        min_count: args.min_count,
        filter: if args.single_pass {
            FilterMode::SinglePass
        } else {
            FilterMode::FixedPoint
        },
    };
    let raw = load_interactions(&args.input, args.format)?;
    let mut ds = preprocess(&raw, &cfg)?;
    if let Some(count) = args.subsample_users {
        ds = ds.subsample_users(count, args.seed, &cfg)?;
    }
    ds.write(&args.out)?;
    let stats = dataset_stats(&ds);
    write_json(
        &args.out.join(STATS),
        &PrepareStats {
            stats,
            source: args.input.clone(),
            preprocess: cfg,
            subsample_users: args.subsample_users,
            seed: args.seed,
            dataset_hash: dataset_hash(&args.out)?,
        },
    )?;
    println!(
        "prepared {}: {} users, {} items, {} interactions, avg length {:.2}",
        args.out.display(),
        stats.num_users,
        stats.num_items,
        stats.num_interactions,
        stats.avg_length
    );
    Ok(())
}

/// Everything a run needs, checked before anything is written.
struct Plan {
    cfg: RunConfig,
    dataset_dir: PathBuf,
    ds: InteractionDataset,
    spec: ModelSpec,
    out: PathBuf,
}

fn plan(flags: &Overrides, repeats: Option<usize>) -> Result<Plan, Failure> {
    let mut cfg = flags.resolve().map_err(|e| Failure::Usage(vec![e]))?;
    if let Some(r) = repeats {
        cfg.repeats = r;
    }
    let mut problems = Vec::new();
    let ds = match &cfg.dataset {
        None => {
            problems.push("no dataset given (--dataset or `dataset` in the config)".into());
            None
        }
        Some(dir) if !dir.join(DATASET_TSV).is_file() => {
            problems.push(format!("{} is not a prepared dataset directory", dir.display()));
            None
        }
        Some(dir) => match InteractionDataset::read(dir) {
            Ok(ds) => Some(ds),
            Err(e) => {
                problems.push(format!("cannot read dataset {}: {e}", dir.display()));
                None
            }
        },
    };
    let num_items = ds.as_ref().map_or(1, InteractionDataset::num_items);
    problems.extend(cfg.model.problems(num_items));
    problems.extend(cfg.train.problems());
    if repeats.is_some() && cfg.repeats % 2 == 0 {
        problems.push(format!("repeats must be odd, got {}", cfg.repeats));
    }
    match &cfg.out {
        None => problems.push("no output directory given (--out or `out` in the config)".into()),
        Some(out) => check_output_dir(out, flags.force, &mut problems),
    }
    ensure_valid(problems)?;
    let ds = ds.expect("validated");
    let dataset_dir = fs::canonicalize(cfg.dataset.as_ref().expect("validated"))
        .map_err(|e| Failure::Runtime(e.into()))?;
    cfg.dataset = Some(dataset_dir.clone());
    let out = cfg.out.clone().expect("validated");
    Ok(Plan {
        spec: cfg.model.spec(ds.num_items()),
        cfg,
        dataset_dir,
        ds,
        out,
    })
}

#[derive(Debug, Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seeds: Vec<u64>,
    pub dataset: PathBuf,
    pub dataset_hash: String,
    pub spec: ModelSpec,
    pub version: String,
}

fn start_run(plan: &Plan, command: &str, seeds: Vec<u64>) -> anyhow::Result<fs::File> {
    fs::create_dir_all(&plan.out).with_context(|| format!("creating {}", plan.out.display()))?;
    write_json(&plan.out.join(CONFIG_COPY), &plan.cfg)?;
    write_json(
        &plan.out.join(RUN_MANIFEST),
        &RunManifest {
            command: command.into(),
            seeds,
            dataset: plan.dataset_dir.clone(),
            dataset_hash: dataset_hash(&plan.dataset_dir)?,
            spec: plan.spec,
            version: env!("CARGO_PKG_VERSION").into(),
        },
    )?;
    let log = plan.out.join(TRAIN_LOG);
    fs::File::create(&log).with_context(|| format!("creating {}", log.display()))
}

#[derive(Serialize)]
struct TrainSummary {
    variant: Variant,
    best_epoch: usize,
    epochs_run: usize,
    best_val_hr10: Option<f64>,
    test: RankingReport,
}

pub fn train(flags: &Overrides) -> Outcome {
    Ok(run_train(&plan(flags, None)?)?)
}

fn run_train(plan: &Plan) -> anyhow::Result<()> {
    let cfg = &plan.cfg.train;
    let mut log = start_run(plan, "train", vec![cfg.seed])?;
    let mut log_error = None;
    let outcome = train_with(&plan.ds, &plan.spec, cfg, |rec| {
        println!(
            "epoch {:>4}  loss {:.4}  val hr@10 {:.4}  ndcg@10 {:.4}  {:.1}s",
            rec.epoch, rec.train_loss, rec.val_hr10, rec.val_ndcg10, rec.seconds
        );
        if let Err(e) = writeln!(log, "{}", rec.to_json_line()) {
            log_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_error {
        return Err(anyhow::Error::from(e).context("writing training log"));
    }
    save_checkpoint(
        &plan.out.join(CHECKPOINT_DIR),
        &outcome.params,
        &CheckpointManifest {
            spec: plan.spec,
            seed: cfg.seed,
            epoch: outcome.best_epoch,
        },
    )?;
    let test = evaluate(
        &outcome.params,
        &plan.spec,
        &plan.ds,
        Phase::Test,
        cfg.eval_batch_size,
        SELECTION_K,
        cfg.exclude_seen,
    )?;
    println!(
        "best epoch {} of {}; test hr@10 {:.4} ndcg@10 {:.4}; run saved to {}",
        outcome.best_epoch,
        outcome.log.len(),
        test.hr,
        test.ndcg,
        plan.out.display()
    );
    write_json(
        &plan.out.join(SUMMARY),
        &TrainSummary {
            variant: plan.cfg.model.variant,
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.log.len(),
            best_val_hr10: outcome.best_val_hr10,
            test,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct ExperimentLine<'a> {
    run: usize,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

pub fn experiment(flags: &Overrides, repeats: Option<usize>) -> Outcome {
    let repeats = repeats.unwrap_or_else(|| flags.resolve().map_or(3, |c| c.repeats));
    Ok(run_repeats(&plan(flags, Some(repeats))?)?)
}

fn run_repeats(plan: &Plan) -> anyhow::Result<()> {
    let cfg = &plan.cfg.train;
    let seeds = (0..plan.cfg.repeats as u64).map(|r| cfg.seed + r).collect();
    let mut log = start_run(plan, "experiment", seeds)?;
    let mut log_error = None;
    let report: ExperimentReport =
        run_experiment_with(&plan.ds, &plan.spec, cfg, plan.cfg.repeats, |run, rec| {
            println!(
                "run {run}  epoch {:>4}  loss {:.4}  val hr@10 {:.4}",
                rec.epoch, rec.train_loss, rec.val_hr10
            );
            let line = serde_json::to_string(&ExperimentLine { run, record: rec })
                .expect("record serializes");
            if let Err(e) = writeln!(log, "{line}") {
                log_error.get_or_insert(e);
            }
        })?;
    if let Some(e) = log_error {
        return Err(anyhow::Error::from(e).context("writing training log"));
    }
    write_json(&plan.out.join(EXPERIMENT_REPORT), &report)?;
    for r in &report.runs {
        println!(
            "seed {}: test hr@10 {:.4} ndcg@10 {:.4} (best epoch {})",
            r.seed, r.test_hr10, r.test_ndcg10, r.best_epoch
        );
    }
    println!(
        "median of {}: hr@10 {:.4} ndcg@10 {:.4}",
        report.repeats, report.median_hr10, report.median_ndcg10
    );
    Ok(())
}

/// Checkpoint directory and the run directory holding it, if any.
fn locate_checkpoint(path: &Path) -> Option<(PathBuf, Option<PathBuf>)> {
    if path.join(CHECKPOINT_JSON).is_file() {
        let parent = path.parent().filter(|p| p.join(CONFIG_COPY).is_file());
        Some((path.to_owned(), parent.map(Path::to_owned)))
    } else if path.join(CHECKPOINT_DIR).join(CHECKPOINT_JSON).is_file() {
        Some((path.join(CHECKPOINT_DIR), Some(path.to_owned())))
    } else {
        None
    }
}

#[derive(Debug, Clone, clap::Args)]
pub struct EvalArgs {
    /// Run directory or checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub phase: PhaseArg,
    /// Prepared dataset; defaults to the one recorded in the run directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = SELECTION_K)]
    pub k: usize,
    #[arg(long = "exclude-seen")]
    pub exclude_seen: bool,
    #[arg(long = "batch-size", default_value_t = 256)]
    pub batch_size: usize,
    /// Report path; defaults to `report_<phase>.json` beside the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

pub fn eval(args: &EvalArgs) -> Outcome {
    let mut problems = Vec::new();
    let located = locate_checkpoint(&args.checkpoint);
    if located.is_none() {
        problems.push(format!("no checkpoint found at {}", args.checkpoint.display()));
    }
    let run_dir = located.as_ref().and_then(|(_, r)| r.clone());
    let dataset = args.dataset.clone().or_else(|| {
        let cfg = RunConfig::load(&run_dir.as_ref()?.join(CONFIG_COPY)).ok()?;
        cfg.dataset
    });
    if dataset.is_none() {
        problems.push("no dataset given and none recorded in the run directory".into());
    }
    if args.k == 0 {
        problems.push("k must be positive".into());
    }
    if args.batch_size == 0 {
        problems.push("batch-size must be positive".into());
    }
    let out = args.out.clone().or_else(|| {
        let (ckpt, run) = located.as_ref()?;
        let name = format!("report_{}.json", phase_name(args.phase));
        Some(run.as_ref().unwrap_or(ckpt).join(name))
    });
    if let Some(out) = &out {
        if out.exists() && !args.force {
            problems.push(format!("{} exists; pass --force to overwrite", out.display()));
        }
    }
    ensure_valid(problems)?;
    let (ckpt, _) = located.expect("validated");
    let dataset = dataset.expect("validated");
    let (params, manifest) = load_checkpoint(&ckpt).map_err(|e| Failure::Runtime(e.into()))?;
    let ds = InteractionDataset::read(&dataset).map_err(|e| Failure::Runtime(e.into()))?;
    if ds.num_items() != manifest.spec.dims.num_items {
        return Err(Failure::Usage(vec![format!(
            "checkpoint expects {} items but {} has {}",
            manifest.spec.dims.num_items,
            dataset.display(),
            ds.num_items()
        )]));
    }
    let out = out.expect("located checkpoint gives a default");
    Ok(run_eval(args, &params, &manifest.spec, &ds, &out)?)
}

fn phase_name(phase: PhaseArg) -> &'static str {
    match phase {
        PhaseArg::Valid => "valid",
        PhaseArg::Test => "test",
    }
}

fn run_eval(
    args: &EvalArgs,
    params: &ModelParams,
    spec: &ModelSpec,
    ds: &InteractionDataset,
    out: &Path,
) -> anyhow::Result<()> {
    let phase = match args.phase {
        PhaseArg::Valid => Phase::Valid,
        PhaseArg::Test => Phase::Test,
    };
    let report = evaluate(params, spec, ds, phase, args.batch_size, args.k, args.exclude_seen)?;
    report.write(out)?;
    println!(
        "{}: hr@{k} {:.4} ndcg@{k} {:.4} over {} users; report {}",
        phase_name(args.phase),
        report.hr,
        report.ndcg,
        report.num_users,
        out.display(),
        k = args.k
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Figure {
    /// Learned attention weights per block.
    Attention,
    /// Correlation of position embeddings.
    Correlation,
}

#[derive(Debug, Clone, clap::Args)]
pub struct VisualizeArgs {
    /// Run directory or checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub what: Figure,
    /// Output directory; defaults to `figures/` in the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Keep raw row-stochastic attention instead of row-max scaling.
    #[arg(long)]
    pub raw: bool,
    #[arg(long)]
    pub force: bool,
}

pub fn visualize(args: &VisualizeArgs) -> Outcome {
    let Some((ckpt, run)) = locate_checkpoint(&args.checkpoint) else {
        return Err(Failure::Usage(vec![format!(
            "no checkpoint found at {}",
            args.checkpoint.display()
        )]));
    };
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| run.as_ref().unwrap_or(&ckpt).join("figures"));
    let (params, manifest) = load_checkpoint(&ckpt).map_err(|e| Failure::Runtime(e.into()))?;
    let mut problems = Vec::new();
    let attention = manifest.spec.attention;
    let dot_product = matches!(attention, AttentionSpec::DotProduct { .. });
    match args.what {
        Figure::Attention if dot_product => problems.push(
            "attention maps of dot-product models depend on the input sequence and are not exported".into(),
        ),
        Figure::Correlation if !dot_product => problems.push(format!(
            "{} has no position embedding to correlate",
            Variant::of(&attention)
        )),
        _ => {}
    }
    check_output_dir(&out, args.force, &mut problems);
    ensure_valid(problems)?;
    Ok(run_visualize(args, &params, &manifest.spec, &out)?)
}

fn run_visualize(
    args: &VisualizeArgs,
    params: &ModelParams,
    spec: &ModelSpec,
    out: &Path,
) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let label = Variant::of(&spec.attention).name();
    let grids = match args.what {
        Figure::Attention => (1..=spec.dims.num_blocks)
            .map(|b| Ok((label.to_string(), b, attention_map(params, spec, b, !args.raw)?)))
            .collect::<anyhow::Result<Vec<_>>>()?,
        Figure::Correlation => vec![(
            format!("{label}_correlation"),
            0,
            model_positional_correlation(params)?,
        )],
    };
    for (name, block, grid) in grids {
        for format in [GridFormat::Csv, GridFormat::Pgm] {
            let path = out.join(grid_file_name(&name, block, spec.dims.n, format));
            export_grid(&grid, &path, format)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
