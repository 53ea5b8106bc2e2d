use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde_json::Value;

use lipscan::bounds::{duality_report, verify_cor1, verify_cor2, verify_thm1, verify_thm2, BoundReport};
use lipscan::data::{load_csv, write_csv, Dataset, Split};
use lipscan::nn::{init_params, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use lipscan::probes::{run_probes, Metric, ProbeContext, ProbeReport};
use lipscan::sweep::{emit_reports, read_results_csv, run_sweep, write_charts, SweepConfig, DEFAULT_CHARTS};
use lipscan::train::sgd_train;
use lipscan::{Error, Network64};

const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_DATA: u8 = 4;
const EXIT_NUMERICAL: u8 = 5;

/// Lipschitz, curvature and gradient-bound probes for piece-wise linear networks.
#[derive(Parser, Debug)]
#[command(name = "lipscan", version)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug, -vvv trace). Logs go to stderr.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// JSON configuration file; every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.lr=0.01`. Values
    /// are parsed as JSON and fall back to plain strings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one network of the configured family and write a checkpoint,
    /// its history and the train/test data as CSV.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Width to train; defaults to the first configured width.
        #[arg(long)]
        width: Option<usize>,
        /// Seed for initialisation and shuffling; defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for model.ckpt, train.csv, test.csv and history.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure a checkpoint and print a JSON report to stdout.
    Probe {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint written by `train` or a sweep with `save_checkpoints`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV (label first) used as the training set.
        #[arg(long)]
        data: PathBuf,
        /// Optional test CSV for test error and loss.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Comma-separated metrics; defaults to the configured set.
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<String>>,
    },
    /// Run a width sweep and write its reports.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the gradient inequalities on a checkpoint; prints JSON lines and
    /// exits non-zero when an asserted bound is violated.
    VerifyBounds {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint written by `train` or a sweep with `save_checkpoints`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV (label first) the bounds are evaluated on.
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated bound ids: thm1, cor1, thm2, cor2, duality.
        #[arg(long, value_delimiter = ',', default_value = "thm1,cor1,cor2,duality")]
        bounds: Vec<String>,
        /// Minibatch size for cor2; 1 gives the exact identity.
        #[arg(long, default_value_t = 1)]
        batch_size: usize,
    },
    /// Render SVG charts from a results.csv.
    Report {
        /// results.csv written by `sweep`.
        #[arg(long = "in")]
        input: PathBuf,
        /// Comma-separated results.csv columns to chart; defaults to the standard set.
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<String>>,
        /// Output directory; defaults to `charts/` next to the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Config(String),
    Lib(Error),
    BoundViolation(usize),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Lib(e) => write!(f, "{e}"),
            CliError::BoundViolation(n) => write!(f, "{n} asserted bound(s) violated"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::BoundViolation(_) => EXIT_NUMERICAL,
            CliError::Lib(e) => match e {
                Error::Config(_) | Error::Json(_) | Error::WrongLoss | Error::UnsupportedLayer(_) | Error::TooLarge { .. } => {
                    EXIT_CONFIG
                }
                Error::Io { .. }
                | Error::Parse { .. }
                | Error::CorruptFile { .. }
                | Error::ArchMismatch(_)
                | Error::ShapeMismatch(_)
                | Error::DimensionMismatch { .. }
                | Error::LabelOutOfRange { .. }
                | Error::EmptyDataset
                | Error::IndexOutOfRange { .. }
                | Error::EmptyIndices
                | Error::MissingReference
                | Error::ZeroNormSample
                | Error::InsufficientData(_)
                | Error::RejectNoHidden
                | Error::StaleTrace => EXIT_DATA,
                _ => EXIT_NUMERICAL,
            },
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Sets `root[a][b]...` for a dotted key, creating objects along the way.
fn apply_override(root: &mut Value, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override '{assignment}' is not KEY=VALUE")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Usage(format!("malformed override key '{key}'")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("{}: not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        node = obj.entry((*part).to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("key has at least one part")
}

fn load_config(args: &ConfigArgs) -> CliResult<SweepConfig> {
    let mut root = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            serde_json::from_str::<Value>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for o in &args.overrides {
        apply_override(&mut root, o)?;
    }
    let cfg: SweepConfig = serde_path_to_error::deserialize(root).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("at '{path}': {}", e.into_inner()))
    })?;
    cfg.validate().map_err(|e| match e {
        Error::Config(m) => CliError::Config(m),
        other => CliError::Lib(other),
    })?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string(value).map_err(Error::from)?);
    Ok(())
}

/// Loads a label-first CSV shaped for `net`, keeping the network's class count.
fn load_data(path: &Path, net: &Network64, split: Split) -> CliResult<Dataset<f64>> {
    let ds = load_csv(path, true, 0, Some(net.input_shape()))?;
    let ds = if ds.num_classes() < net.num_classes() {
        Dataset::new(ds.shape(), ds.inputs().to_vec(), ds.labels().to_vec(), net.num_classes(), split)?
    } else {
        ds.with_split(split)
    };
    if ds.num_classes() > net.num_classes() {
        return Err(Error::LabelOutOfRange { label: ds.num_classes() - 1, classes: net.num_classes() }.into());
    }
    Ok(ds)
}

fn cmd_train(cfg: &SweepConfig, width: Option<usize>, seed: Option<u64>, out: &Path) -> CliResult<()> {
    let width = width.unwrap_or(cfg.widths[0]);
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let (train, test) = cfg.build_datasets()?;
    let mut net = cfg.build_network(width)?;
    init_params(&mut net, seed, cfg.init);
    let theta_init = net.theta().to_vec();
    let tcfg = lipscan::train::TrainConfig { seed, ..cfg.train.clone() };
    let history = sgd_train(&mut net, &train, Some(&test), &tcfg, &mut |_, _| Ok(()))?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    let ckpt = Checkpoint {
        network: net,
        theta_init,
        meta: CheckpointMeta { epoch: tcfg.epochs, seed, init_scheme: cfg.init, train_fingerprint: tcfg.fingerprint() },
    };
    save_checkpoint(&ckpt, &out.join("model.ckpt"))?;
    write_csv(&train, &out.join("train.csv"))?;
    write_csv(&test, &out.join("test.csv"))?;
    let hist = out.join("history.json");
    std::fs::write(&hist, serde_json::to_vec_pretty(&history).map_err(Error::from)?)
        .map_err(|e| Error::Io { path: hist, source: e })?;
    let last = history.last();
    log::info!("trained width {width} seed {seed}: final train error {:?}", last.map(|r| r.train_err));
    print_json(&serde_json::json!({
        "checkpoint": out.join("model.ckpt"),
        "width": width,
        "seed": seed,
        "params": ckpt.network.param_count(),
        "final": last,
    }))
}

fn cmd_probe(
    cfg: &SweepConfig,
    checkpoint: &Path,
    data: &Path,
    test: Option<&Path>,
    metrics: Option<&[String]>,
) -> CliResult<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let net = &ckpt.network;
    let train = load_data(data, net, Split::Train)?;
    let test = test.map(|p| load_data(p, net, Split::Test)).transpose()?;
    let init = Network64::with_theta(net.architecture().clone(), ckpt.theta_init.clone())?;
    let mut pcfg = cfg.probe.clone();
    if let Some(list) = metrics {
        pcfg.metrics = list
            .iter()
            .map(|m| Metric::parse(m.trim()))
            .collect::<lipscan::Result<_>>()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let ctx = ProbeContext {
        net,
        init: Some(&init),
        train: &train,
        test: test.as_ref(),
        loss: cfg.loss(),
        lr: (cfg.train.lr > 0.0).then_some(cfg.train.lr),
    };
    let mut report = ProbeReport { seed: ckpt.meta.seed, epoch: ckpt.meta.epoch, ..ProbeReport::default() };
    run_probes(&ctx, &train, &pcfg, &mut report)?;
    print_json(&report)
}

fn cmd_verify(cfg: &SweepConfig, checkpoint: &Path, data: &Path, bounds: &[String], batch: usize) -> CliResult<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let net = &ckpt.network;
    let ds = load_data(data, net, Split::Train)?;
    let kind = cfg.loss();
    let mut reports: Vec<BoundReport> = Vec::new();
    for id in bounds {
        let id = id.trim();
        let mut r = match id {
            "thm1" => verify_thm1(net, &ds)?,
            "cor1" => vec![verify_cor1(net, &ds, kind)?],
            "thm2" => verify_thm2(net, &ds, kind, &cfg.probe.hutchinson)?,
            "cor2" => verify_cor2(net, &ds, kind, batch, cfg.probe.noise.num_batches.max(1), cfg.probe.noise.seed)?,
            "duality" => vec![duality_report(net, &ds, ds.len())?],
            other => return Err(CliError::Usage(format!("unknown bound '{other}'"))),
        };
        reports.append(&mut r);
    }
    for r in &reports {
        print_json(r)?;
    }
    let violated = reports.iter().filter(|r| !r.passes()).count();
    if violated > 0 {
        return Err(CliError::BoundViolation(violated));
    }
    Ok(())
}

fn cmd_sweep(mut cfg: SweepConfig, out: Option<PathBuf>) -> CliResult<()> {
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    let result = run_sweep(&cfg)?;
    let summary = emit_reports(&result, &cfg.output_dir)?;
    print_json(&summary)
}

fn cmd_report(input: &Path, metrics: Option<&[String]>, out: Option<PathBuf>) -> CliResult<()> {
    let rows = read_results_csv(input)?;
    let metrics: Vec<&str> = match metrics {
        Some(m) => m.iter().map(|s| s.trim()).collect(),
        None => DEFAULT_CHARTS.to_vec(),
    };
    let dir = out.unwrap_or_else(|| input.parent().unwrap_or(Path::new(".")).join("charts"));
    let paths = write_charts(&rows, &metrics, &dir).map_err(|e| match e {
        Error::Config(m) => CliError::Usage(m),
        other => CliError::Lib(other),
    })?;
    print_json(&paths)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { cfg, width, seed, out } => cmd_train(&load_config(&cfg)?, width, seed, &out),
        Command::Probe { cfg, checkpoint, data, test, metrics } => {
            cmd_probe(&load_config(&cfg)?, &checkpoint, &data, test.as_deref(), metrics.as_deref())
        }
        Command::Sweep { cfg, out } => cmd_sweep(load_config(&cfg)?, out),
        Command::VerifyBounds { cfg, checkpoint, data, bounds, batch_size } => {
            cmd_verify(&load_config(&cfg)?, &checkpoint, &data, &bounds, batch_size)
        }
        Command::Report { input, metrics, out } => cmd_report(&input, metrics.as_deref(), out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lipscan: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
