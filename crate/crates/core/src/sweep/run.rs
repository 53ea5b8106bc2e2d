use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::SweepConfig;
use crate::bounds::{duality_report, verify_cor1, verify_cor2, verify_thm1, verify_thm2, BoundReport};
use crate::data::{gen_probe_set, Dataset, ProbeSource};
use crate::error::{Error, Result};
use crate::nn::{init_params, save_checkpoint, Checkpoint, CheckpointMeta, Network};
use crate::probes::{run_probes, HutchinsonConfig, Metric, ProbeConfig, ProbeContext, ProbeReport};
use crate::rng::derive_seed;
use crate::train::{sgd_train, TrainConfig, TrainHistory};

/// A sweep fails when more than this fraction of its cells fail.
pub const MAX_FAILED_FRACTION: f64 = 0.1;

/// Samples used by the layer-duality check at each probe epoch.
const DUALITY_SAMPLES: usize = 50;

/// Environment variable capping the worker pool.
pub const WORKERS_ENV: &str = "LIPSCAN_WORKERS";

/// Everything produced by one `(width, seed)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellRecord {
    pub fingerprint: String,
    pub width: usize,
    pub seed: u64,
    pub rows: Vec<ProbeReport>,
    pub bounds: Vec<BoundReport>,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedCell {
    pub width: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub config: SweepConfig,
    pub fingerprint: String,
    /// Probe rows in `(width, seed, epoch, split)` order.
    pub rows: Vec<ProbeReport>,
    pub bounds: Vec<BoundReport>,
    /// Per-cell training histories in `(width, seed)` order.
    pub histories: Vec<(usize, u64, TrainHistory)>,
    pub failed: Vec<FailedCell>,
    /// Cells loaded from a previous run instead of recomputed.
    pub resumed: usize,
}

impl SweepResult {
    pub fn widths(&self) -> Vec<usize> {
        self.config.widths.clone()
    }

    pub fn final_epoch(&self) -> usize {
        self.config.train.epochs
    }
}

/// Worker count from `LIPSCAN_WORKERS`, defaulting to available parallelism.
pub fn worker_count() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{WORKERS_ENV} must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn split_rank(split: &str) -> (u8, &str) {
    match split {
        "train" => (0, ""),
        "test" => (1, ""),
        other => (2, other),
    }
}

/// Canonical row order: width, seed, epoch, then train, test and probe splits.
pub fn sort_rows(rows: &mut [ProbeReport]) {
    rows.sort_by(|a, b| {
        (a.width, a.seed, a.epoch, split_rank(&a.split)).cmp(&(b.width, b.seed, b.epoch, split_rank(&b.split)))
    });
}

fn cell_path(dir: &Path, width: usize, seed: u64) -> PathBuf {
    dir.join("cells").join(format!("w{width:05}_s{seed}.json"))
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn load_cell(path: &Path, fingerprint: &str) -> Option<CellRecord> {
    let bytes = fs::read(path).ok()?;
    match serde_json::from_slice::<CellRecord>(&bytes) {
        Ok(rec) if rec.fingerprint == fingerprint => Some(rec),
        Ok(_) => {
            log::info!("{} belongs to a different configuration; recomputing", path.display());
            None
        }
        Err(e) => {
            log::warn!("ignoring unreadable cell file {}: {e}", path.display());
            None
        }
    }
}

/// Data shared by every cell.
struct Shared {
    train: Dataset<f64>,
    test: Dataset<f64>,
    probe_sets: Vec<Dataset<f64>>,
}

fn per_sample_metrics(cfg: &ProbeConfig) -> BTreeSet<Metric> {
    [Metric::Errors, Metric::Lipschitz, Metric::UpperBound, Metric::LossJacobian, Metric::ParamGrad, Metric::Confidence]
        .into_iter()
        .filter(|m| cfg.metrics.contains(m))
        .collect()
}

/// Probe configuration for one cell: every seed is derived from the cell seed.
fn cell_probe_config(cfg: &ProbeConfig, seed: u64) -> ProbeConfig {
    let mut p = cfg.clone();
    p.seed = derive_seed(cfg.seed, "probe", seed);
    p.power.seed = derive_seed(cfg.power.seed, "probe-power", seed);
    p.hutchinson.seed = derive_seed(cfg.hutchinson.seed, "probe-hutchinson", seed);
    p.noise.seed = derive_seed(cfg.noise.seed, "probe-noise", seed);
    p
}

fn skippable(e: &Error) -> bool {
    matches!(
        e,
        Error::WrongLoss | Error::UnsupportedLayer(_) | Error::PreconditionViolated(_) | Error::ZeroNormSample
    )
}

fn run_bounds(cfg: &SweepConfig, net: &Network<f64>, train: &Dataset<f64>, seed: u64) -> Result<Vec<BoundReport>> {
    let kind = cfg.loss();
    let mut out = Vec::new();
    for id in &cfg.bounds {
        let r = match id.as_str() {
            "thm1" => verify_thm1(net, train),
            "cor1" => verify_cor1(net, train, kind).map(|r| vec![r]),
            "thm2" => verify_thm2(net, train, kind, &HutchinsonConfig { seed, ..cfg.probe.hutchinson }),
            "cor2" => verify_cor2(net, train, kind, 1, train.len(), derive_seed(seed, "cor2", 0)),
            "duality" => duality_report(net, train, DUALITY_SAMPLES).map(|r| vec![r]),
            other => return Err(Error::Config(format!("unknown bound '{other}'"))),
        };
        match r {
            Ok(mut reports) => out.append(&mut reports),
            Err(e) if skippable(&e) => log::debug!("bound {id} not applicable: {e}"),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn run_cell(cfg: &SweepConfig, shared: &Shared, width: usize, seed: u64, fingerprint: &str) -> Result<CellRecord> {
    let mut net = cfg.build_network(width)?;
    init_params(&mut net, seed, cfg.init);
    let init = net.clone();
    let schedule = cfg.probe_schedule();
    let tcfg = TrainConfig { seed, checkpoint_epochs: schedule, ..cfg.train.clone() };
    let pcfg = cell_probe_config(&cfg.probe, seed);
    let test_cfg = ProbeConfig { metrics: per_sample_metrics(&pcfg), ..pcfg.clone() };
    let set_cfg = ProbeConfig { metrics: [Metric::Lipschitz, Metric::UpperBound].into_iter().collect(), ..pcfg.clone() };
    let lr = (cfg.train.lr > 0.0).then_some(cfg.train.lr);
    let train_fp = tcfg.fingerprint();

    let mut rows = Vec::new();
    let mut bounds = Vec::new();
    let mut hook = |epoch: usize, net: &Network<f64>| -> Result<()> {
        let started = Instant::now();
        let ctx = ProbeContext {
            net,
            init: Some(&init),
            train: &shared.train,
            test: Some(&shared.test),
            loss: cfg.loss(),
            lr,
        };
        let base = ProbeReport { width, seed, epoch, ..ProbeReport::default() };
        let mut row = base.clone();
        run_probes(&ctx, &shared.train, &pcfg, &mut row)?;
        rows.push(row);
        if cfg.probe_test_split {
            let mut row = base.clone();
            run_probes(&ctx, &shared.test, &test_cfg, &mut row)?;
            rows.push(row);
        }
        for set in &shared.probe_sets {
            let mut row = base.clone();
            run_probes(&ctx, set, &set_cfg, &mut row)?;
            rows.push(row);
        }
        for mut b in run_bounds(cfg, net, &shared.train, derive_seed(seed, "bounds", epoch as u64))? {
            b.width = Some(width);
            b.seed = Some(seed);
            b.epoch = Some(epoch);
            bounds.push(b);
        }
        if cfg.save_checkpoints {
            let ckpt = Checkpoint {
                network: net.clone(),
                theta_init: init.theta().to_vec(),
                meta: CheckpointMeta { epoch, seed, init_scheme: cfg.init, train_fingerprint: train_fp.clone() },
            };
            let path = cfg.output_dir.join("checkpoints").join(format!("w{width:05}_s{seed}_e{epoch}.ckpt"));
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            save_checkpoint(&ckpt, &path)?;
        }
        log::debug!("width {width} seed {seed} epoch {epoch}: probes took {:.2}s", started.elapsed().as_secs_f64());
        Ok(())
    };
    let history = sgd_train(&mut net, &shared.train, Some(&shared.test), &tcfg, &mut hook)?;
    Ok(CellRecord { fingerprint: fingerprint.to_string(), width, seed, rows, bounds, history })
}

/// [`run_sweep_with_workers`] with the pool size from `LIPSCAN_WORKERS`.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    run_sweep_with_workers(cfg, worker_count()?)
}

/// Outcome of one cell: the record and whether it was resumed from disk.
type CellOutcome = (usize, u64, Result<(CellRecord, bool)>);

/// Trains and probes every `(width, seed)` cell on a pool of `workers`
/// threads. Completed cells are persisted under `output_dir/cells` and reused
/// when the same configuration is run again. Results do not depend on the
/// number of workers.
pub fn run_sweep_with_workers(cfg: &SweepConfig, workers: usize) -> Result<SweepResult> {
    cfg.validate()?;
    let workers = workers.max(1);
    let fingerprint = cfg.fingerprint();
    let (train, test) = cfg.build_datasets()?;
    let probe_sets = cfg
        .probe_sets
        .iter()
        .map(|kind| {
            let seed = derive_seed(cfg.dataset.seed, "probe-set", *kind as u64);
            gen_probe_set(*kind, ProbeSource::Dataset(&train), cfg.probe_set_size, seed, cfg.jitter_amplitude)
        })
        .collect::<Result<Vec<_>>>()?;
    let shared = Shared { train, test, probe_sets };
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;

    let cells: Vec<(usize, u64)> =
        cfg.widths.iter().flat_map(|w| cfg.seeds.iter().map(move |s| (*w, *s))).collect();
    log::info!("sweep {fingerprint}: {} cells on {workers} worker(s)", cells.len());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    let outcomes: Vec<CellOutcome> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(width, seed)| {
                let path = cell_path(&cfg.output_dir, width, seed);
                if let Some(rec) = load_cell(&path, &fingerprint) {
                    log::info!("width {width} seed {seed}: resumed");
                    return (width, seed, Ok((rec, true)));
                }
                let started = Instant::now();
                let out = run_cell(cfg, &shared, width, seed, &fingerprint).and_then(|rec| {
                    write_atomic(&path, &serde_json::to_vec(&rec)?)?;
                    Ok((rec, false))
                });
                match &out {
                    Ok(_) => log::info!("width {width} seed {seed}: done in {:.1}s", started.elapsed().as_secs_f64()),
                    Err(e) => log::warn!("width {width} seed {seed}: failed: {e}"),
                }
                (width, seed, out)
            })
            .collect()
    });

    let total = outcomes.len();
    let mut result = SweepResult {
        config: cfg.clone(),
        fingerprint,
        rows: Vec::new(),
        bounds: Vec::new(),
        histories: Vec::new(),
        failed: Vec::new(),
        resumed: 0,
    };
    for (width, seed, out) in outcomes {
        match out {
            Ok((rec, resumed)) => {
                result.resumed += usize::from(resumed);
                result.rows.extend(rec.rows);
                result.bounds.extend(rec.bounds);
                result.histories.push((width, seed, rec.history));
            }
            Err(e) => result.failed.push(FailedCell { width, seed, error: e.to_string() }),
        }
    }
    let failed = result.failed.len();
    if failed as f64 > MAX_FAILED_FRACTION * total as f64 {
        return Err(Error::SweepFailed { failed, total });
    }
    sort_rows(&mut result.rows);
    Ok(result)
}
