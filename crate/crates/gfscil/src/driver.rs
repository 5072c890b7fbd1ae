//! Multi-seed runs and variant sweeps, with their on-disk layout:
//!
//! ```text
//! <out>/<config-hash>/<seed>/report.json
//! <out>/<config-hash>/<seed>/params.json
//! <out>/<config-hash>/aggregate.{json,csv,dat}
//! <out>/<config-hash>/ablation.{json,csv,dat}     (ablate only)
//! ```

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use gfscil_core::eval::{aggregate, EvalError};
use gfscil_core::graph::GraphDataset;
use gfscil_core::trainer::{train_and_evaluate, Counters, TrainError};

use crate::checkpoint::{self, CheckpointError};
use crate::config::RunConfig;
use crate::dataset::DatasetError;
use crate::fsutil::{atomic_write, FsError};
use crate::report::{emit_all, AggregateFile, Report, RunReport, TableRow, VariantTable, AGGREGATE_FORMAT, TABLE_FORMAT};
use crate::variants::Variant;

#[derive(Debug, thiserror::Error)]
pub enum DriverError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{method}, seed {seed}: {source}")]
    Train { method: String, seed: u64, source: TrainError },
    #[error(transparent)]
    Fs(#[from] FsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("aggregate: {0}")]
    Eval(#[from] EvalError),
}

/// Where outputs go and how many seeds run at once.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_root: PathBuf,
    pub jobs: usize,
    /// Skip writing files; reports are still returned.
    pub dry: bool,
}

impl RunOptions {
    pub fn new(out_root: impl Into<PathBuf>) -> Self {
        Self { out_root: out_root.into(), jobs: 1, dry: false }
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub method: String,
    pub dir: PathBuf,
    pub reports: Vec<RunReport>,
    pub aggregate: AggregateFile,
}

/// The effective config of `variant` (or `cfg` itself).
pub fn variant_config(cfg: &RunConfig, variant: Option<Variant>) -> RunConfig {
    let mut out = cfg.clone();
    if let Some(v) = variant {
        v.apply(&mut out.train);
    }
    out
}

fn run_seed(cfg: &RunConfig, ds: &GraphDataset, method: &str, hash: &str, seed: u64, dir: &Path, dry: bool) -> Result<RunReport, DriverError> {
    let (split, train) = cfg.for_seed(seed);
    let outcome = train_and_evaluate(ds, &split, &train)
        .map_err(|source| DriverError::Train { method: method.into(), seed, source })?;
    let report = RunReport::new(method, hash, &cfg.dataset, &split, &train, &outcome);
    if !dry {
        let seed_dir = dir.join(seed.to_string());
        checkpoint::save(&outcome.stage.final_params, &seed_dir.join("params.json"))?;
        atomic_write(&seed_dir.join("report.json"), Report::Run(report.clone()).to_json().as_bytes())?;
    }
    Ok(report)
}

/// Runs every seed of `cfg` (as modified by `variant`) and aggregates.
pub fn run_method(
    cfg: &RunConfig,
    variant: Option<Variant>,
    ds: &GraphDataset,
    opts: &RunOptions,
    log: &(dyn Fn(&str) + Sync),
) -> Result<RunSummary, DriverError> {
    let cfg = variant_config(cfg, variant);
    let method = variant.map_or_else(|| "run".to_string(), |v| v.to_string());
    let hash = cfg.hash();
    let dir = opts.out_root.join(&hash);

    let slots: Mutex<Vec<Option<Result<RunReport, DriverError>>>> = Mutex::new(cfg.seeds.iter().map(|_| None).collect());
    let next = Mutex::new(0usize);
    let worker = || loop {
        let i = {
            let mut n = next.lock().expect("seed counter lock");
            let i = *n;
            *n += 1;
            i
        };
        let Some(&seed) = cfg.seeds.get(i) else { break };
        let result = run_seed(&cfg, ds, &method, &hash, seed, &dir, opts.dry);
        match &result {
            Ok(r) => {
                let last = r.accuracy.last().map_or(f64::NAN, |row| row.overall);
                log(&format!("{method} seed {seed}: final accuracy {:.2}%", 100.0 * last));
            }
            Err(e) => log(&format!("{method} seed {seed}: {e}")),
        }
        slots.lock().expect("result lock")[i] = Some(result);
    };
    let jobs = opts.jobs.clamp(1, cfg.seeds.len());
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }
    let reports = slots
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every seed ran"))
        .collect::<Result<Vec<_>, _>>()?;

    let matrices: Vec<_> = reports.iter().map(|r| r.accuracy.clone()).collect();
    let mut counters = Counters::default();
    for r in &reports {
        counters.merge(&r.counters());
    }
    let aggregate = AggregateFile {
        format: AGGREGATE_FORMAT.into(),
        method: method.clone(),
        config_hash: hash,
        seeds: cfg.seeds.clone(),
        dataset: cfg.dataset.clone(),
        split: cfg.split.clone(),
        train: cfg.train.clone(),
        report: aggregate(&matrices)?,
        counters,
    };
    if !opts.dry {
        emit_all(&Report::Aggregate(aggregate.clone()), &dir, "aggregate")?;
    }
    Ok(RunSummary { method, dir, reports, aggregate })
}

/// Runs each variant and collects one table row per variant.
pub fn run_ablation(
    cfg: &RunConfig,
    variants: &[Variant],
    ds: &GraphDataset,
    opts: &RunOptions,
    log: &(dyn Fn(&str) + Sync),
) -> Result<(VariantTable, Vec<RunSummary>), DriverError> {
    let mut rows = Vec::with_capacity(variants.len());
    let mut summaries = Vec::with_capacity(variants.len());
    for &v in variants {
        let summary = run_method(cfg, Some(v), ds, opts, log)?;
        rows.push(TableRow::from_aggregate(v, &summary.aggregate));
        summaries.push(summary);
    }
    let table = VariantTable { format: TABLE_FORMAT.into(), seeds: cfg.seeds.clone(), rows };
    if !opts.dry {
        emit_all(&Report::Table(table.clone()), &opts.out_root.join(cfg.hash()), "ablation")?;
    }
    Ok((table, summaries))
}
