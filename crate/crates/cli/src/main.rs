//! Operator entry point for the two-step scene-graph prompting harness.
//!
//! Subcommands:
//!
//! - `run` — execute a benchmark run from a config file, writing records
//!   and a report under the runs root.
//! - `score` — recompute a report from a stored records file.
//! - `report` — print the report for an existing run directory.
//! - `ablate` — run a variant × token-budget matrix and print a combined
//!   comparison table.
//! - `synth-gen` — generate a deterministic synthetic scene world with
//!   ground-truth tasks (and optionally matched image pairs).
//! - `cassette record` / `cassette verify` — capture backend traffic to a
//!   replayable cassette, and check a cassette's integrity/coverage.
//!
//! Exit codes: 0 on success (including runs with per-task errors, which
//! are recorded and reported), 1 on fatal errors, 2 on usage or
//! configuration errors.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use ccot_core::backend::{Backend, Cassette, CassetteMode};
use ccot_core::bench::{
    load_tasks, render_report_csv, render_report_json, render_summary_table, score_records,
    write_mcq_tasks, DatasetFormat, ScoreReport, TaskInstance,
};
use ccot_core::config::{CassetteSection, ConfigError, DatasetSection, HarnessConfig};
use ccot_core::pipeline::{harvest_sg_map, run_tasks, RunRecord};
use ccot_core::prompt::{SlotOrder, VariantKind};
use ccot_core::runstore::{read_records, RunManifest, RunStore, StoreError};
use ccot_core::sg::Lexicons;
use ccot_core::synthworld::{gen_pair_world, gen_world};

// ---------------------------------------------------------------------------
// Command-line surface
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "ccot",
    version,
    about = "Evaluation harness for two-step scene-graph prompting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a benchmark evaluation and write records plus a report.
    Run(RunArgs),
    /// Recompute a report from a stored records file.
    Score(ScoreArgs),
    /// Print the report for an existing run directory.
    Report(ReportArgs),
    /// Run a variant x budget matrix and print a comparison table.
    Ablate(AblateArgs),
    /// Generate a synthetic scene world with ground-truth tasks.
    SynthGen(SynthGenArgs),
    /// Record or verify backend-response cassettes.
    #[command(subcommand)]
    Cassette(CassetteCommand),
}

#[derive(Args)]
struct RunArgs {
    /// Harness configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run identifier (default: "<variant>-<first 12 hash chars>").
    #[arg(long)]
    run_id: Option<String>,
    /// Continue an interrupted run instead of refusing its directory.
    #[arg(long)]
    resume: bool,
    /// Override the configured variant.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<VariantKind>,
    /// Override the step-1 token budget.
    #[arg(long)]
    sg_token_budget: Option<u32>,
    /// Override the answering-prompt slot order (sg_c_p_e or sg_p_c_e).
    #[arg(long, value_parser = parse_slot_order)]
    slot_order: Option<SlotOrder>,
    /// Override the pipeline seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the worker-pool size.
    #[arg(long)]
    workers: Option<usize>,
    /// Override the dataset file.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Override the directory runs are written under.
    #[arg(long)]
    runs_root: Option<PathBuf>,
    /// Records file to harvest scene graphs from (injected_sg variant).
    #[arg(long)]
    sg_source: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Records file (JSONL) to score.
    #[arg(long)]
    records: PathBuf,
    /// Task file to cross-check against (ids must match the records).
    #[arg(long)]
    tasks: Option<PathBuf>,
    /// Format of the task file.
    #[arg(long, default_value = "mcq-jsonl")]
    format: DatasetFormat,
    /// Image root for resolving task file paths.
    #[arg(long)]
    image_root: Option<PathBuf>,
    /// Also write the JSON report to this path.
    #[arg(long)]
    out_json: Option<PathBuf>,
    /// Also write the CSV report to this path.
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory (contains manifest.json and records.jsonl).
    #[arg(long)]
    run: PathBuf,
    /// Print the full JSON report instead of the summary table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// Harness configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated variants (e.g. ccot,object_list,no_json).
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    /// Comma-separated step-1 token budgets (e.g. 128,256).
    #[arg(long, value_delimiter = ',')]
    budgets: Vec<u32>,
    /// Override the directory runs are written under.
    #[arg(long)]
    runs_root: Option<PathBuf>,
    /// Prefix for per-cell run ids (default "ablate").
    #[arg(long, default_value = "ablate")]
    run_prefix: String,
}

#[derive(Args)]
struct SynthGenArgs {
    /// World seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Number of scenes.
    #[arg(long, default_value_t = 100)]
    scenes: usize,
    /// Questions generated per scene.
    #[arg(long, default_value_t = 5)]
    questions_per_scene: usize,
    /// Also generate this many matched image pairs.
    #[arg(long)]
    pairs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum CassetteCommand {
    /// Run with recording forced on, capturing every backend response.
    Record(CassetteRecordArgs),
    /// Check a cassette parses, and optionally that it covers a run.
    Verify(CassetteVerifyArgs),
}

#[derive(Args)]
struct CassetteRecordArgs {
    /// Harness configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Cassette file to write (default: the config's cassette path).
    #[arg(long)]
    path: Option<PathBuf>,
    /// Run identifier (default: "<variant>-<first 12 hash chars>").
    #[arg(long)]
    run_id: Option<String>,
    /// Continue an interrupted recording run.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct CassetteVerifyArgs {
    /// Cassette file (JSONL) to verify.
    #[arg(long)]
    path: PathBuf,
    /// Records file whose request digests must all be present.
    #[arg(long)]
    records: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<VariantKind, String> {
    s.parse()
}

fn parse_slot_order(s: &str) -> Result<SlotOrder, String> {
    match s {
        "sg_c_p_e" => Ok(SlotOrder::SgCPE),
        "sg_p_c_e" => Ok(SlotOrder::SgPCE),
        other => Err(format!(
            "unknown slot order {other:?}; expected sg_c_p_e or sg_p_c_e"
        )),
    }
}

// ---------------------------------------------------------------------------
// Error discipline: usage/config problems exit 2, everything fatal exits 1
// ---------------------------------------------------------------------------

enum CliError {
    Usage(anyhow::Error),
    Fatal(anyhow::Error),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.into())
    }
}

fn usage(msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(anyhow!("{msg}"))
}

fn fatal<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError::Fatal(e.into())
}

/// A failed resume means the config no longer matches the stored run —
/// that is an operator problem, not an environment one.
fn store_err(e: StoreError) -> CliError {
    match e {
        StoreError::ConfigMismatch { .. } => CliError::Usage(e.into()),
        other => CliError::Fatal(other.into()),
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Score(args) => cmd_score(args),
        Command::Report(args) => cmd_report(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::SynthGen(args) => cmd_synth_gen(args),
        Command::Cassette(CassetteCommand::Record(args)) => cmd_cassette_record(args),
        Command::Cassette(CassetteCommand::Verify(args)) => cmd_cassette_verify(args),
    };
    match result {
        Ok(()) => {}
        Err(CliError::Usage(e)) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
        Err(CliError::Fatal(e)) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let mut cfg = HarnessConfig::load(&args.config)?;
    apply_overrides(&mut cfg, &args)?;
    cfg.validate()?;

    let tasks = load_configured_tasks(&cfg)?;
    let backend = cfg.build_backend()?;
    let judge = cfg.build_judge()?;
    let summary = execute_run(&cfg, &tasks, backend, judge, args.run_id, args.resume)?;
    print!("{}", render_summary_table(&summary.report));
    if summary.n_errors > 0 {
        println!("{} task(s) recorded an error", summary.n_errors);
    }
    println!("run directory: {}", summary.dir.display());
    Ok(())
}

/// Flags win over the config file. Overrides land before hashing, so the
/// printed config hash describes what actually ran.
fn apply_overrides(cfg: &mut HarnessConfig, args: &RunArgs) -> Result<(), CliError> {
    if let Some(kind) = args.variant {
        cfg.pipeline.variant.kind = kind;
    }
    if let Some(budget) = args.sg_token_budget {
        cfg.pipeline.sg_token_budget = budget;
    }
    if let Some(order) = args.slot_order {
        cfg.template.slot_order_step2 = order;
    }
    if let Some(seed) = args.seed {
        cfg.pipeline.seed = seed;
    }
    if let Some(workers) = args.workers {
        cfg.backend.concurrency = workers;
    }
    if let Some(path) = &args.dataset {
        match &mut cfg.dataset {
            Some(section) => section.path = path.clone(),
            None => {
                cfg.dataset = Some(DatasetSection {
                    path: path.clone(),
                    format: DatasetFormat::McqJsonl,
                    image_root: None,
                });
            }
        }
    }
    if let Some(root) = &args.runs_root {
        cfg.runs_root = root.clone();
    }
    if let Some(source) = &args.sg_source {
        cfg.pipeline.variant.params.sg_source = Some(source.display().to_string());
    }
    Ok(())
}

fn load_configured_tasks(cfg: &HarnessConfig) -> Result<Vec<TaskInstance>, CliError> {
    let dataset = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| usage("config has no dataset section; add one or pass --dataset"))?;
    let tasks = load_tasks(
        &dataset.path,
        dataset.format,
        dataset.image_root.as_deref(),
    )
    .map_err(fatal)?;
    if tasks.is_empty() {
        return Err(usage(format!(
            "dataset {} contains no tasks",
            dataset.path.display()
        )));
    }
    Ok(tasks)
}

struct RunSummary {
    dir: PathBuf,
    report: ScoreReport,
    n_errors: usize,
}

/// Shared run driver: hash, open (or resume) the store, execute pending
/// tasks, score, and persist the report. Prints the config hash first so
/// operators can check it against the stored manifest.
fn execute_run(
    cfg: &HarnessConfig,
    tasks: &[TaskInstance],
    backend: Arc<dyn Backend>,
    judge: Option<Arc<dyn Backend>>,
    run_id: Option<String>,
    resume: bool,
) -> Result<RunSummary, CliError> {
    let hash = cfg.config_hash()?;
    println!("config hash: {hash}");

    let variant = cfg.pipeline.variant.clone();
    let injected = match variant.kind {
        VariantKind::InjectedSg => {
            let source = variant.params.sg_source.as_ref().ok_or_else(|| {
                usage("variant injected_sg needs a records file; pass --sg-source")
            })?;
            Some(harvest_sg_map(Path::new(source)).map_err(fatal)?)
        }
        _ => None,
    };

    let run_id = run_id.unwrap_or_else(|| format!("{}-{}", variant.kind, &hash[..12]));
    let mut store = if resume {
        RunStore::open_or_resume(&cfg.runs_root, &run_id, &hash).map_err(store_err)?
    } else {
        let manifest = RunManifest::new(
            run_id.clone(),
            hash.clone(),
            variant.kind.as_str(),
            backend.id(),
            tasks.len(),
        );
        RunStore::create(&cfg.runs_root, manifest).map_err(|e| match e {
            StoreError::AlreadyExists(path) => CliError::Usage(anyhow!(
                "run already exists at {}; pass --resume to continue it or pick a new --run-id",
                path.display()
            )),
            other => fatal(other),
        })?
    };

    let done = store.completed().clone();
    let pending: Vec<TaskInstance> = tasks
        .iter()
        .filter(|t| !done.contains(&t.task_id))
        .cloned()
        .collect();
    println!(
        "run {run_id}: variant {}, {} task(s), {} already recorded",
        variant.kind,
        tasks.len(),
        done.len()
    );

    let tpl = cfg.template.to_template_set();
    let pcfg = cfg.to_pipeline_cfg(hash);
    let mut append_err: Option<StoreError> = None;
    let mut finished = 0usize;
    run_tasks(
        &pending,
        &variant,
        injected.as_ref(),
        backend.as_ref(),
        judge.as_deref(),
        &tpl,
        &pcfg,
        |rec: &RunRecord| {
            if append_err.is_none() {
                if let Err(e) = store.append_record(rec) {
                    append_err = Some(e);
                    return;
                }
            }
            finished += 1;
            if let Some(detail) = &rec.error {
                eprintln!("task {}: {detail}", rec.task_id);
            }
            if finished.is_multiple_of(50) {
                eprintln!("{finished}/{} task(s) done", pending.len());
            }
        },
    );
    if let Some(e) = append_err {
        return Err(fatal(e).into_fatal_context("writing run records"));
    }
    store.finish().map_err(fatal)?;

    let records = read_records(&store.dir().join("records.jsonl")).map_err(fatal)?;
    let report = score_records(&records).map_err(fatal)?;
    store.write_report(&report).map_err(fatal)?;
    let n_errors = records.iter().filter(|r| r.error.is_some()).count();
    Ok(RunSummary {
        dir: store.dir().to_path_buf(),
        report,
        n_errors,
    })
}

impl CliError {
    fn into_fatal_context(self, what: &str) -> CliError {
        match self {
            CliError::Fatal(e) => CliError::Fatal(e.context(what.to_string())),
            other => other,
        }
    }
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

fn cmd_score(args: ScoreArgs) -> Result<(), CliError> {
    let records = read_records(&args.records).map_err(fatal)?;
    if let Some(task_path) = &args.tasks {
        let tasks = load_tasks(task_path, args.format, args.image_root.as_deref())
            .map_err(fatal)?;
        check_task_coverage(&records, &tasks)?;
    }
    let report = score_records(&records).map_err(fatal)?;
    if let Some(path) = &args.out_json {
        std::fs::write(path, render_report_json(&report))
            .with_context(|| format!("writing {}", path.display()))
            .map_err(CliError::Fatal)?;
    }
    if let Some(path) = &args.out_csv {
        std::fs::write(path, render_report_csv(&report))
            .with_context(|| format!("writing {}", path.display()))
            .map_err(CliError::Fatal)?;
    }
    print!("{}", render_report_json(&report));
    Ok(())
}

fn check_task_coverage(records: &[RunRecord], tasks: &[TaskInstance]) -> Result<(), CliError> {
    let recorded: BTreeSet<&str> = records.iter().map(|r| r.task_id.as_str()).collect();
    let expected: BTreeSet<&str> = tasks.iter().map(|t| t.task_id.as_str()).collect();
    if recorded == expected {
        return Ok(());
    }
    let missing: Vec<&str> = expected.difference(&recorded).copied().take(5).collect();
    let extra: Vec<&str> = recorded.difference(&expected).copied().take(5).collect();
    Err(fatal(anyhow!(
        "records do not cover the task file: {} task(s) missing (e.g. {:?}), {} record(s) unmatched (e.g. {:?})",
        expected.difference(&recorded).count(),
        missing,
        recorded.difference(&expected).count(),
        extra,
    )))
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let manifest_path = args.run.join("manifest.json");
    let manifest_text = std::fs::read_to_string(&manifest_path)
        .with_context(|| format!("reading {}", manifest_path.display()))
        .map_err(CliError::Fatal)?;
    let manifest: RunManifest = serde_json::from_str(&manifest_text)
        .with_context(|| format!("parsing {}", manifest_path.display()))
        .map_err(CliError::Fatal)?;

    let records = read_records(&args.run.join("records.jsonl")).map_err(fatal)?;
    let report = score_records(&records).map_err(fatal)?;

    if args.json {
        print!("{}", render_report_json(&report));
        return Ok(());
    }
    println!("run:         {}", manifest.run_id);
    println!("variant:     {}", manifest.variant);
    println!("backend:     {}", manifest.backend_id);
    println!("config hash: {}", manifest.config_hash);
    println!(
        "records:     {} of {} planned task(s)",
        records.len(),
        manifest.n_tasks
    );
    match &manifest.finished_at {
        Some(at) => println!("finished:    {at}"),
        None => println!("finished:    (run still open)"),
    }
    print!("{}", render_summary_table(&report));

    let stored = args.run.join("report.json");
    if let Ok(text) = std::fs::read_to_string(&stored) {
        if text != render_report_json(&report) {
            println!("note: stored report.json is stale; rerun `score` to refresh it");
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    if args.variants.is_empty() && args.budgets.is_empty() {
        return Err(usage(
            "ablation matrix is empty; pass --variants and/or --budgets",
        ));
    }
    let mut base = HarnessConfig::load(&args.config)?;
    if let Some(root) = &args.runs_root {
        base.runs_root = root.clone();
    }
    base.validate()?;

    let variants: Vec<VariantKind> = if args.variants.is_empty() {
        vec![base.pipeline.variant.kind]
    } else {
        args.variants
            .iter()
            .map(|s| s.parse::<VariantKind>().map_err(usage))
            .collect::<Result<_, _>>()?
    };
    let budgets: Vec<u32> = if args.budgets.is_empty() {
        vec![base.pipeline.sg_token_budget]
    } else {
        args.budgets.clone()
    };

    // One backend (and cassette) serves every cell, so repeated prompts
    // across cells cost a single upstream call.
    let tasks = load_configured_tasks(&base)?;
    let backend = base.build_backend()?;
    let judge = base.build_judge()?;

    let mut rows: Vec<(VariantKind, u32, ScoreReport)> = Vec::new();
    for &kind in &variants {
        for &budget in &budgets {
            let mut cell = base.clone();
            cell.pipeline.variant.kind = kind;
            cell.pipeline.sg_token_budget = budget;
            cell.validate()?;
            let run_id = format!("{}-{kind}-{budget}", args.run_prefix);
            println!("--- cell: variant {kind}, budget {budget} ---");
            let summary =
                execute_run(&cell, &tasks, backend.clone(), judge.clone(), Some(run_id), false)?;
            if summary.n_errors > 0 {
                println!("{} task(s) recorded an error", summary.n_errors);
            }
            rows.push((kind, budget, summary.report));
        }
    }

    println!();
    println!("{:<16} {:>6} {:>10} {:>6}", "variant", "budget", "accuracy", "n");
    for (kind, budget, report) in &rows {
        println!(
            "{:<16} {:>6} {:>10.6} {:>6}",
            kind.as_str(),
            budget,
            report.overall,
            report.counts.den
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// synth-gen
// ---------------------------------------------------------------------------

fn cmd_synth_gen(args: SynthGenArgs) -> Result<(), CliError> {
    if args.scenes == 0 || args.questions_per_scene == 0 {
        return Err(usage("--scenes and --questions-per-scene must be positive"));
    }
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(CliError::Fatal)?;

    let lexicons = Lexicons::default_english();
    let (world, questions) =
        gen_world(args.seed, args.scenes, args.questions_per_scene, &lexicons).map_err(fatal)?;
    let scenes_path = args.out.join("scenes.jsonl");
    world.save(&scenes_path).map_err(fatal)?;
    let tasks: Vec<TaskInstance> = questions.into_iter().map(|q| q.task).collect();
    let tasks_path = args.out.join("tasks.jsonl");
    write_mcq_tasks(&tasks_path, &tasks)
        .with_context(|| format!("writing {}", tasks_path.display()))
        .map_err(CliError::Fatal)?;
    println!(
        "wrote {} scene(s) to {} and {} task(s) to {}",
        world.len(),
        scenes_path.display(),
        tasks.len(),
        tasks_path.display()
    );

    if let Some(n_pairs) = args.pairs {
        if n_pairs == 0 {
            return Err(usage("--pairs must be positive when given"));
        }
        let (pair_world, pair_tasks) = gen_pair_world(args.seed, n_pairs, &lexicons).map_err(fatal)?;
        let pair_scenes_path = args.out.join("pair-scenes.jsonl");
        pair_world.save(&pair_scenes_path).map_err(fatal)?;
        let pair_tasks_path = args.out.join("pair-tasks.jsonl");
        write_pair_tasks(&pair_tasks_path, &pair_tasks).map_err(CliError::Fatal)?;
        println!(
            "wrote {} pair scene(s) to {} and {} pair task(s) to {}",
            pair_world.len(),
            pair_scenes_path.display(),
            pair_tasks.len(),
            pair_tasks_path.display()
        );
    }
    Ok(())
}

fn write_pair_tasks(path: &Path, tasks: &[TaskInstance]) -> anyhow::Result<()> {
    let mut out = String::new();
    for task in tasks {
        let captions = task
            .captions
            .as_ref()
            .ok_or_else(|| anyhow!("pair task {} has no captions", task.task_id))?;
        let line = serde_json::json!({
            "id": task.task_id,
            "images": task.image_refs,
            "captions": captions,
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

// ---------------------------------------------------------------------------
// cassette
// ---------------------------------------------------------------------------

fn cmd_cassette_record(args: CassetteRecordArgs) -> Result<(), CliError> {
    let mut cfg = HarnessConfig::load(&args.config)?;
    let path = args
        .path
        .or_else(|| cfg.backend.cassette.path.clone())
        .ok_or_else(|| usage("no cassette path; pass --path or set backend.cassette.path"))?;
    cfg.backend.cassette = CassetteSection {
        mode: CassetteMode::Record,
        path: Some(path.clone()),
    };
    cfg.validate()?;

    let tasks = load_configured_tasks(&cfg)?;
    let backend = cfg.build_backend()?;
    let judge = cfg.build_judge()?;
    let summary = execute_run(&cfg, &tasks, backend, judge, args.run_id, args.resume)?;
    print!("{}", render_summary_table(&summary.report));
    if summary.n_errors > 0 {
        println!("{} task(s) recorded an error", summary.n_errors);
    }
    let cassette = Cassette::load(&path).map_err(fatal)?;
    println!(
        "cassette {}: {} recorded response(s)",
        path.display(),
        cassette.len()
    );
    Ok(())
}

fn cmd_cassette_verify(args: CassetteVerifyArgs) -> Result<(), CliError> {
    let cassette = Cassette::load(&args.path).map_err(fatal)?;
    println!(
        "cassette {}: {} entry(ies), all lines parse",
        args.path.display(),
        cassette.len()
    );
    let Some(records_path) = &args.records else {
        return Ok(());
    };

    let records = read_records(records_path).map_err(fatal)?;
    let mut needed: BTreeMap<&str, &str> = BTreeMap::new();
    for rec in &records {
        for field in [&rec.step1_prompt_digest, &rec.step2_prompt_digest] {
            let Some(joined) = field else { continue };
            // Pair-protocol records join their sub-call digests with '+'.
            for digest in joined.split('+').filter(|d| !d.is_empty()) {
                needed.entry(digest).or_insert(rec.task_id.as_str());
            }
        }
    }
    let missing: Vec<(&str, &str)> = needed
        .iter()
        .filter(|(digest, _)| cassette.get(digest).is_none())
        .map(|(d, t)| (*d, *t))
        .collect();
    if missing.is_empty() {
        println!(
            "covers all {} request digest(s) from {}",
            needed.len(),
            records_path.display()
        );
        return Ok(());
    }
    let preview: Vec<String> = missing
        .iter()
        .take(5)
        .map(|(digest, task)| format!("{digest} (task {task})"))
        .collect();
    Err(fatal(anyhow!(
        "{} of {} request digest(s) missing from the cassette, e.g. {}",
        missing.len(),
        needed.len(),
        preview.join(", ")
    )))
}
