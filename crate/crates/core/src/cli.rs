//! The `dualpriv` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::accountant::{calibrate_sigma, PrivacySpec, SigmaResult};
use crate::error::Error;
use crate::harness::{
    mia_evaluate, plan_privacy, sweep_topk, train_on, write_csv, Method, MiaReport, RunConfig,
    RunReport, REPORT_SCHEMA_VERSION,
};
use crate::model::{Dataset, Model};
use crate::numeric::{Mat64, SeededRng};
use crate::tokens::{prune_and_fuse, AttentionStack, ClsAxis, PruneConfig, PrunedTokens, TokenSet};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "dualpriv",
    version,
    about = "Differentially private training with update and token pruning"
)]
pub struct Cli {
    #[arg(long, value_enum, default_value_t = LogLevel::Warn, global = true)]
    pub log_level: LogLevel,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum LogLevel {
    Error,
    Warn,
    Info,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Noise multiplier for a privacy budget.
    Calibrate {
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        q: f64,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        clip: f64,
    },
    /// Run one experiment from a TOML config.
    Train {
        config: PathBuf,
        #[arg(long, env = "DUALPRIV_SEED")]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also write the (pruned) train and test sets used by the run.
        #[arg(long)]
        dump_data: bool,
    },
    /// Run a config once per top-K% value.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,20,40,60,80,100")]
        grid: Vec<f64>,
        #[arg(long, default_value_t = 2)]
        workers: usize,
        #[arg(long, env = "DUALPRIV_SEED")]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Prune and fuse one token set.
    PruneDemo {
        input: PathBuf,
        #[arg(long)]
        keep: usize,
        #[arg(long)]
        centers: usize,
        #[arg(long, default_value_t = 0.0)]
        sigma_fuse: f64,
        #[arg(long, value_enum, default_value_t = AxisArg::Row)]
        cls_axis: AxisArg,
        #[arg(long, env = "DUALPRIV_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Loss-threshold membership inference against a saved model.
    Attack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        members: PathBuf,
        #[arg(long)]
        nonmembers: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect run reports into one CSV table.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AxisArg {
    Row,
    Column,
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

type CliResult<T> = std::result::Result<T, Failure>;

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    schema_version: u32,
    #[serde(flatten)]
    body: T,
}

fn versioned<T>(body: T) -> Versioned<T> {
    Versioned {
        schema_version: REPORT_SCHEMA_VERSION,
        body,
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PruneInput {
    tokens: Vec<Vec<f64>>,
    heads: Vec<Vec<Vec<f64>>>,
}

struct Logger(LogLevel);

impl Logger {
    fn info(&self, msg: impl std::fmt::Display) {
        if self.0 >= LogLevel::Info {
            eprintln!("info: {msg}");
        }
    }
}

pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli, &mut std::io::stdout()) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Runtime(m) => eprintln!("runtime error: {m}"),
            }
            f.code()
        }
    }
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> CliResult<()> {
    let log = Logger(cli.log_level);
    match cli.command {
        Command::Calibrate {
            eps,
            delta,
            q,
            steps,
            clip,
        } => {
            let result = cmd_calibrate(eps, delta, q, steps, clip)?;
            emit(stdout, None, &versioned(result))
        }
        Command::Train {
            config,
            seed,
            out,
            dump_data,
        } => {
            let cfg = load_config(&config, seed)?;
            let (train_set, test_set) = load_data(&cfg)?;
            log.info(format!(
                "training {} on {} samples, seed {}",
                cfg.method.name(),
                train_set.len(),
                cfg.seed
            ));
            let outcome = train_on(&cfg, &train_set, &test_set).map_err(runtime)?;
            fs::create_dir_all(&out).map_err(runtime)?;
            write_json(&out.join("report.json"), &outcome.report)?;
            write_rows(&out.join("report.csv"), &[&outcome.report])?;
            outcome
                .model
                .save(&out.join("model.json"))
                .map_err(runtime)?;
            if dump_data {
                // attack inputs must match what the model actually saw
                let (tr, te) = pruned_data(&cfg, &train_set, &test_set)?;
                tr.save(&out.join("train.json")).map_err(runtime)?;
                te.save(&out.join("test.json")).map_err(runtime)?;
            }
            log.info(format!("wrote {}", out.display()));
            emit(stdout, None, &outcome.report)
        }
        Command::Sweep {
            config,
            grid,
            workers,
            seed,
            out,
        } => {
            let cfg = load_config(&config, seed)?;
            load_data(&cfg)?;
            if cfg.method != Method::Dualpriv {
                return Err(usage(
                    "sweep varies top_k_percent, which only method = \"dualpriv\" uses",
                ));
            }
            if grid.iter().any(|&p| !(p > 0.0 && p <= 100.0)) {
                return Err(usage("grid values must be in (0, 100]"));
            }
            let reports = sweep_topk(&cfg, &grid, workers).map_err(runtime)?;
            fs::create_dir_all(&out).map_err(runtime)?;
            for r in &reports {
                write_json(&out.join(format!("report_pk{}.json", r.top_k_percent)), r)?;
            }
            let refs: Vec<&RunReport> = reports.iter().collect();
            write_rows(&out.join("sweep.csv"), &refs)?;
            let mut buf = Vec::new();
            write_csv(
                &mut buf,
                &refs.iter().map(|r| r.csv_row()).collect::<Vec<_>>(),
            )
            .map_err(runtime)?;
            stdout.write_all(&buf).map_err(runtime)
        }
        Command::PruneDemo {
            input,
            keep,
            centers,
            sigma_fuse,
            cls_axis,
            seed,
            out,
        } => {
            let axis = match cls_axis {
                AxisArg::Row => ClsAxis::Row,
                AxisArg::Column => ClsAxis::Column,
            };
            let cfg = PruneConfig {
                keep,
                centers,
                sigma_fuse,
                cls_axis: axis,
            };
            let pruned = cmd_prune_demo(&input, &cfg, seed)?;
            emit(stdout, out.as_deref(), &versioned(pruned))
        }
        Command::Attack {
            model,
            members,
            nonmembers,
            out,
        } => {
            let report = cmd_attack(&model, &members, &nonmembers)?;
            emit(stdout, out.as_deref(), &report)
        }
        Command::Report { reports, out } => {
            let loaded = reports
                .iter()
                .map(|p| read_report(p))
                .collect::<CliResult<Vec<_>>>()?;
            let refs: Vec<&RunReport> = loaded.iter().collect();
            match out {
                Some(path) => write_rows(&path, &refs),
                None => {
                    let rows: Vec<_> = refs.iter().map(|r| r.csv_row()).collect();
                    let mut buf = Vec::new();
                    write_csv(&mut buf, &rows).map_err(runtime)?;
                    stdout.write_all(&buf).map_err(runtime)
                }
            }
        }
    }
}

pub fn cmd_calibrate(
    eps: f64,
    delta: f64,
    q: f64,
    steps: usize,
    clip: f64,
) -> CliResult<SigmaResult> {
    let spec = PrivacySpec {
        epsilon: eps,
        delta,
        sample_rate: q,
        steps,
        clip,
    };
    spec.validate().map_err(usage)?;
    calibrate_sigma(&spec).map_err(|e| match e {
        Error::Unreachable { .. } => usage(e),
        other => runtime(other),
    })
}

/// Parses, applies the seed override and validates everything that can be
/// checked before training.
pub fn load_config(path: &Path, seed: Option<u64>) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut cfg: RunConfig =
        toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn load_data(cfg: &RunConfig) -> CliResult<(Dataset, Dataset)> {
    let (tr, te) = cfg.data.load().map_err(usage)?;
    let steps = tr.len().div_ceil(cfg.train.batch_size.max(1)) * cfg.epochs;
    if cfg.train.batch_size > tr.len() {
        return Err(usage(format!(
            "batch size {} exceeds dataset size {}",
            cfg.train.batch_size,
            tr.len()
        )));
    }
    plan_privacy(cfg, tr.len(), steps).map_err(usage)?;
    Ok((tr, te))
}

fn pruned_data(cfg: &RunConfig, tr: &Dataset, te: &Dataset) -> CliResult<(Dataset, Dataset)> {
    if cfg.prune.is_none() {
        return Ok((tr.clone(), te.clone()));
    }
    crate::harness::preprocess(cfg, tr, te).map_err(runtime)
}

pub fn cmd_prune_demo(input: &Path, cfg: &PruneConfig, seed: u64) -> CliResult<PrunedTokens> {
    let text = fs::read_to_string(input).map_err(|e| usage(format!("{}: {e}", input.display())))?;
    let parsed: PruneInput = serde_json::from_str(&text).map_err(usage)?;
    let tokens = TokenSet::from_rows(&parsed.tokens).map_err(usage)?;
    let heads = parsed
        .heads
        .iter()
        .map(|h| Mat64::from_rows(h))
        .collect::<crate::Result<Vec<_>>>()
        .map_err(usage)?;
    let stack = AttentionStack::new(heads).map_err(usage)?;
    if stack.size() != tokens.len() {
        return Err(usage(format!(
            "attention is {0}x{0} but there are {1} tokens",
            stack.size(),
            tokens.len()
        )));
    }
    cfg.validate(tokens.len()).map_err(usage)?;
    let mut rng = SeededRng::new(seed, 0);
    prune_and_fuse(&tokens, &stack, cfg, &mut rng).map_err(runtime)
}

pub fn cmd_attack(model: &Path, members: &Path, nonmembers: &Path) -> CliResult<MiaReport> {
    let model = Model::load(model).map_err(usage)?;
    let members = Dataset::load(members).map_err(usage)?;
    let nonmembers = Dataset::load(nonmembers).map_err(usage)?;
    for d in [&members, &nonmembers] {
        if d.is_empty() {
            return Err(usage("membership sets must be nonempty"));
        }
        for s in &d.samples {
            if s.input_dim() != model.spec.input_dim || s.label >= model.spec.num_classes {
                return Err(usage(format!(
                    "dataset '{}' does not match the model (input_dim {}, {} classes)",
                    d.kind, model.spec.input_dim, model.spec.num_classes
                )));
            }
        }
    }
    mia_evaluate(&model, &members, &nonmembers).map_err(runtime)
}

fn read_report(path: &Path) -> CliResult<RunReport> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let r: RunReport =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if r.schema_version != REPORT_SCHEMA_VERSION {
        return Err(usage(format!(
            "{}: schema_version {} is not supported",
            path.display(),
            r.schema_version
        )));
    }
    Ok(r)
}

fn emit<T: Serialize>(stdout: &mut dyn Write, out: Option<&Path>, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    match out {
        Some(p) => fs::write(p, text + "\n").map_err(runtime),
        None => writeln!(stdout, "{text}").map_err(runtime),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    fs::write(path, text + "\n").map_err(runtime)
}

fn write_rows(path: &Path, reports: &[&RunReport]) -> CliResult<()> {
    let rows: Vec<_> = reports.iter().map(|r| r.csv_row()).collect();
    let file = fs::File::create(path).map_err(runtime)?;
    write_csv(file, &rows).map_err(runtime)
}
