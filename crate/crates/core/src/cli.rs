//! Command-line front end.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{self, Event, GeneratorConstants, Regime, SplitManifest, GENERATOR};
use crate::dfw;
use crate::error::{Error, Result};
use crate::eval::{self, ReportContext};
use crate::train::{self, Checkpoint, Method, TrainConfig};

pub const SEED_ENV: &str = "DRIFTFOLLOW_SEED";
pub const DEFAULT_SEED: u64 = 42;
pub const REPRO_EVENTS: usize = 600;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_MISSING: i32 = 5;

fn at_least<const MIN: u64>(s: &str) -> std::result::Result<u64, String> {
    match s.parse::<u64>() {
        Ok(n) if n >= MIN => Ok(n),
        Ok(_) => Err(format!("must be at least {MIN}")),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "driftfollow",
    version,
    about = "Continual-learning LSTM car-following controller: generate, split, train, evaluate, report",
    after_help = "Exit codes: 0 success, 2 usage, 3 I/O or parse error, 4 numeric failure, 5 missing artifacts.\n\
                  The seed falls back to $DRIFTFOLLOW_SEED, then 42."
)]
pub struct Cli {
    /// Worker threads [default: available cores]; 1 gives a fully serial run
    #[arg(long, global = true, value_parser = at_least::<1>)]
    pub jobs: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic IDM car-following events as JSON-Lines
    Generate(GenerateArgs),
    /// Split events into three speed tasks with train/val/test tags
    Split(SplitArgs),
    /// Train one method (or all) over the task curriculum
    Train(TrainArgs),
    /// Evaluate checkpoints into a stage matrix and render the report
    Evaluate(EvalArgs),
    /// Same outputs as `evaluate`
    Report(EvalArgs),
    /// Full pipeline: generate, split, train all methods, evaluate, report
    Repro(ReproArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Total number of events, spread evenly over the regimes
    #[arg(long, default_value_t = 300, value_parser = at_least::<1>)]
    pub count: u64,
    /// Comma-separated regimes to draw from (low, mid, high)
    #[arg(long, value_delimiter = ',', default_value = "low,mid,high")]
    pub regimes: Vec<Regime>,
    /// Sampling interval in seconds
    #[arg(long, default_value_t = 0.1)]
    pub dt: f64,
    /// RNG seed [default: $DRIFTFOLLOW_SEED or 42]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output event file (.jsonl, or .csv for the long format)
    #[arg(long, default_value = "events.jsonl")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Input event file (.jsonl or long-format .csv)
    #[arg(long = "in", default_value = "events.jsonl")]
    pub input: PathBuf,
    /// Shuffle seed for the train/val/test partition [default: $DRIFTFOLLOW_SEED or 42]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory receiving task1..3.jsonl and manifest.json
    #[arg(long, default_value = "tasks")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `split`
    #[arg(long, default_value = "tasks")]
    pub tasks_dir: PathBuf,
    /// joint, baseline, ewc, mas, or all
    #[arg(long, default_value = "all")]
    pub method: String,
    /// `key = value` config file; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Initialization and shuffling seed [default: config, then $DRIFTFOLLOW_SEED, then 42]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epochs per task [default: 5]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Regularization strength [default: 100 for ewc, 1000 for mas]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Directory receiving checkpoints, histories and run_config.txt
    #[arg(long, default_value = "checkpoints")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory written by `split`
    #[arg(long, default_value = "tasks")]
    pub tasks_dir: PathBuf,
    /// Directory holding *.dfw checkpoints
    #[arg(long, default_value = "checkpoints")]
    pub checkpoints_dir: PathBuf,
    /// Seed picking the exported trajectory events [default: $DRIFTFOLLOW_SEED or 42]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory receiving stage_matrix.csv, report.md and traj_task<k>.csv
    #[arg(long, default_value = "report")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReproArgs {
    /// Seed for every stage [default: $DRIFTFOLLOW_SEED or 42]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of synthetic events
    #[arg(long, default_value_t = REPRO_EVENTS as u64, value_parser = at_least::<9>)]
    pub count: u64,
    /// Training config overrides applied to every method
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output root (events, tasks/, checkpoints/, report files)
    #[arg(long, default_value = "repro")]
    pub out_dir: PathBuf,
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::InvalidInput(_) | Error::Parse { .. } | Error::Io { .. } => EXIT_IO,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::InvalidState(_) => EXIT_MISSING,
    }
}

/// Seed precedence: flag, then `$DRIFTFOLLOW_SEED`, then 42.
pub fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

pub fn main() -> i32 {
    main_with(std::env::args())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        builder = builder.num_threads(j as usize);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Generate(a) => cmd_generate(&a).map(|_| ()),
        Command::Split(a) => cmd_split(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Evaluate(a) | Command::Report(a) => cmd_evaluate(&a).map(|_| ()),
        Command::Repro(a) => cmd_repro(&a),
    })
}

#[derive(Serialize)]
struct RegimeSummary {
    regime: Regime,
    count: usize,
    mean_fv_speed: f64,
    min_event_mean: f64,
    max_event_mean: f64,
}

#[derive(Serialize)]
struct GenerateManifest<'a> {
    out: String,
    count: u64,
    dt: f64,
    seed: u64,
    regimes: Vec<RegimeSummary>,
    generator: &'a GeneratorConstants,
}

/// `<out stem>.manifest.json` next to the event file.
pub fn generate_manifest_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("events");
    out.with_file_name(format!("{stem}.manifest.json"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidState(e.to_string()))?;
    fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<Vec<Event>> {
    if a.regimes.is_empty() {
        return Err(Error::InvalidArgument("--regimes needs at least one regime".into()));
    }
    if !(a.dt > 0.0) || !a.dt.is_finite() {
        return Err(Error::InvalidArgument(format!("--dt must be positive, got {}", a.dt)));
    }
    let seed = resolve_seed(a.seed)?;
    let k = a.regimes.len() as u64;
    let mut events = Vec::with_capacity(a.count as usize);
    let mut summaries = Vec::new();
    for (i, &regime) in a.regimes.iter().enumerate() {
        // remainder goes to the first regimes listed
        let n = a.count / k + u64::from((i as u64) < a.count % k);
        if n == 0 {
            continue;
        }
        let batch = data::generate_events(regime, n as usize, a.dt, seed)?;
        let means: Vec<f64> = batch.iter().map(data::mean_fv_speed).collect();
        let s = RegimeSummary {
            regime,
            count: batch.len(),
            mean_fv_speed: means.iter().sum::<f64>() / means.len() as f64,
            min_event_mean: means.iter().copied().fold(f64::INFINITY, f64::min),
            max_event_mean: means.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
        println!(
            "{:<5} {:>5} events  mean FV speed {:6.2} m/s  (event means {:.2}..{:.2})",
            regime, s.count, s.mean_fv_speed, s.min_event_mean, s.max_event_mean
        );
        summaries.push(s);
        events.extend(batch);
    }
    ensure_parent(&a.out)?;
    data::save_events(&events, &a.out)?;
    write_json(
        &generate_manifest_path(&a.out),
        &GenerateManifest {
            out: a.out.display().to_string(),
            count: a.count,
            dt: a.dt,
            seed,
            regimes: summaries,
            generator: &GENERATOR,
        },
    )?;
    println!("wrote {} events to {}", events.len(), a.out.display());
    Ok(events)
}

pub fn cmd_split(a: &SplitArgs) -> Result<SplitManifest> {
    let seed = resolve_seed(a.seed)?;
    let events = data::load_events(&a.input)?;
    let (tasks, bounds) = data::split_tasks(&events, seed)?;
    let manifest = SplitManifest::new(&tasks, bounds, seed, &a.input.display().to_string());
    data::save_task_dir(&a.out_dir, &tasks, &manifest)?;
    println!(
        "boundaries: p{} = {:.4} m/s, p{} = {:.4} m/s",
        data::LOWER_SPLIT_PERCENTILE,
        bounds.lower,
        data::UPPER_SPLIT_PERCENTILE,
        bounds.upper
    );
    for t in &tasks {
        println!(
            "task {} {}: {} events (train {}, val {}, test {})",
            t.task_id,
            t.speed_range,
            t.len(),
            t.train.len(),
            t.val.len(),
            t.test.len()
        );
    }
    Ok(manifest)
}

fn parse_methods(list: &str) -> Result<Vec<Method>> {
    if list.eq_ignore_ascii_case("all") {
        return Ok(Method::ALL.to_vec());
    }
    let mut out = Vec::new();
    for part in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let m: Method = part.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("--method names no method".into()));
    }
    Ok(out)
}

fn read_config(path: Option<&Path>) -> Result<BTreeMap<String, String>> {
    match path {
        None => Ok(BTreeMap::new()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            train::parse_config_text(&text)
        }
    }
}

/// Resolves one method's configuration: defaults, then the config file, then
/// flags. The method itself always comes from `method`.
pub fn resolve_train_config(
    method: Method,
    file: &BTreeMap<String, String>,
    overrides: &[(&str, String)],
    data_dt: f64,
) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::for_method(method);
    if !file.contains_key("seed") {
        cfg.seed = resolve_seed(None)?;
    }
    if !file.contains_key("dt") {
        cfg.dt = data_dt;
    }
    for (k, v) in file {
        if k != "method" {
            cfg.set(k, v)?;
        }
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn task_dt(tasks: &[data::TaskSet; 3]) -> Result<f64> {
    tasks
        .iter()
        .flat_map(|t| t.train.iter().chain(&t.val).chain(&t.test))
        .map(|e| e.dt)
        .next()
        .ok_or_else(|| Error::InvalidInput("task files hold no events".into()))
}

pub fn train_methods(
    tasks: &[data::TaskSet; 3],
    methods: &[Method],
    file: &BTreeMap<String, String>,
    overrides: &[(&str, String)],
    out_dir: &Path,
) -> Result<Vec<Checkpoint>> {
    let dt = task_dt(tasks)?;
    let configs = methods
        .iter()
        .map(|&m| resolve_train_config(m, file, overrides, dt))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut echo = String::new();
    for cfg in &configs {
        echo.push_str(&format!("# {}\n{}", cfg.method.label(), cfg.to_config_text()));
    }
    let cfg_path = out_dir.join("run_config.txt");
    fs::write(&cfg_path, echo).map_err(|e| Error::io(&cfg_path, e))?;

    let mut all = Vec::new();
    for cfg in &configs {
        let started = Instant::now();
        let run = train::run_curriculum(tasks, cfg)?;
        for c in &run.checkpoints {
            dfw::save_checkpoint(c, &out_dir.join(c.file_name()))?;
        }
        let hpath = out_dir.join(format!("{}_history.csv", cfg.method.name()));
        fs::write(&hpath, train::history_csv(&run.history)).map_err(|e| Error::io(&hpath, e))?;
        let last = run.history.last();
        println!(
            "{:<11} {} checkpoint(s) in {:.1}s; final train loss {:.4}, val spacing MSE {:.4}",
            cfg.method.label(),
            run.checkpoints.len(),
            started.elapsed().as_secs_f64(),
            last.map_or(f64::NAN, |r| r.train_loss),
            last.map_or(f64::NAN, |r| r.val_mse_spacing)
        );
        all.extend(run.checkpoints);
    }
    Ok(all)
}

pub fn cmd_train(a: &TrainArgs) -> Result<Vec<Checkpoint>> {
    let methods = parse_methods(&a.method)?;
    let file = read_config(a.config.as_deref())?;
    let mut overrides: Vec<(&str, String)> = Vec::new();
    if let Some(s) = a.seed {
        overrides.push(("seed", s.to_string()));
    }
    if let Some(e) = a.epochs {
        overrides.push(("epochs", e.to_string()));
    }
    if let Some(l) = a.lambda {
        overrides.push(("lambda", l.to_string()));
    }
    let (tasks, _) = data::load_task_dir(&a.tasks_dir)?;
    train_methods(&tasks, &methods, &file, &overrides, &a.out_dir)
}

/// Loads every `*.dfw` in `dir`, sorted by file name.
pub fn discover_checkpoints(dir: &Path) -> Result<Vec<Checkpoint>> {
    let entries = match fs::read_dir(dir) {
        Ok(rd) => rd,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::InvalidState(format!("no checkpoints found: {} does not exist", dir.display())))
        }
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut paths = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "dfw") {
            paths.push(p);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidState(format!("no checkpoints found in {}", dir.display())));
    }
    paths.iter().map(|p| dfw::load_checkpoint(p)).collect()
}

pub fn evaluate_dirs(tasks_dir: &Path, checkpoints_dir: &Path, out_dir: &Path, seed: u64) -> Result<eval::StageMatrix> {
    let (tasks, _) = data::load_task_dir(tasks_dir)?;
    let checkpoints = discover_checkpoints(checkpoints_dir)?;
    let dt = task_dt(&tasks)?;
    let matrix = eval::build_stage_matrix(&checkpoints, &tasks, dt)?;
    let ctx = ReportContext {
        checkpoints: &checkpoints,
        tasks: &tasks,
        dt,
        seed,
    };
    let written = eval::render_report(&matrix, Some(&ctx), out_dir)?;
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(matrix)
}

pub fn cmd_evaluate(a: &EvalArgs) -> Result<eval::StageMatrix> {
    let seed = resolve_seed(a.seed)?;
    let matrix = evaluate_dirs(&a.tasks_dir, &a.checkpoints_dir, &a.out_dir, seed)?;
    print!("{}", eval::report_markdown(&matrix));
    Ok(matrix)
}

pub fn cmd_repro(a: &ReproArgs) -> Result<()> {
    let started = Instant::now();
    let seed = resolve_seed(a.seed)?;
    let root = &a.out_dir;
    let events_path = root.join("events.jsonl");
    let tasks_dir = root.join("tasks");
    let ck_dir = root.join("checkpoints");

    cmd_generate(&GenerateArgs {
        count: a.count,
        regimes: Regime::ALL.to_vec(),
        dt: 0.1,
        seed: Some(seed),
        out: events_path.clone(),
    })?;
    cmd_split(&SplitArgs {
        input: events_path,
        seed: Some(seed),
        out_dir: tasks_dir.clone(),
    })?;
    let file = read_config(a.config.as_deref())?;
    let (tasks, _) = data::load_task_dir(&tasks_dir)?;
    // stale checkpoints from an earlier run would leak into discovery
    if ck_dir.exists() {
        for entry in fs::read_dir(&ck_dir).map_err(|e| Error::io(&ck_dir, e))? {
            let p = entry.map_err(|e| Error::io(&ck_dir, e))?.path();
            if p.extension().is_some_and(|x| x == "dfw") {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    train_methods(&tasks, &Method::ALL, &file, &[("seed", seed.to_string())], &ck_dir)?;
    let matrix = evaluate_dirs(&tasks_dir, &ck_dir, root, seed)?;
    print!("{}", eval::report_markdown(&matrix));
    println!("repro finished in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn count_zero_is_a_usage_error() {
        let err = Cli::try_parse_from(["driftfollow", "generate", "--count", "0"]).unwrap_err();
        assert!(err.use_stderr());
        assert_eq!(err.exit_code(), EXIT_USAGE);
    }

    #[test]
    fn unknown_flags_are_rejected() {
        assert!(Cli::try_parse_from(["driftfollow", "split", "--bogus", "1"]).is_err());
    }

    #[test]
    fn method_lists() {
        assert_eq!(parse_methods("all").unwrap(), Method::ALL.to_vec());
        assert_eq!(parse_methods("ewc,mas,ewc").unwrap(), vec![Method::Ewc, Method::Mas]);
        assert!(parse_methods("sgd").is_err());
    }

    #[test]
    fn flags_override_config_file() {
        let file: BTreeMap<String, String> =
            [("epochs".to_string(), "2".to_string()), ("lambda".to_string(), "7".to_string())].into();
        let cfg = resolve_train_config(Method::Ewc, &file, &[("epochs", "3".into())], 0.1).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.reg.lambda, 7.0);
        let cfg = resolve_train_config(Method::Mas, &BTreeMap::new(), &[], 0.1).unwrap();
        assert_eq!(cfg.reg.lambda, 1000.0);
    }

    #[test]
    fn manifest_path() {
        assert_eq!(generate_manifest_path(Path::new("a/ev.jsonl")), Path::new("a/ev.manifest.json"));
    }
}
