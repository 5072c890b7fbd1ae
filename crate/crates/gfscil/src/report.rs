//! Report files: per-seed JSON, multi-seed aggregates, stage tables as CSV
//! and plain-text plot series.

use std::fmt::Write as _;
use std::path::Path;

use gfscil_core::episodes::SplitConfig;
use gfscil_core::eval::{AccuracyMatrix, AggregateReport, MeanStd};
use gfscil_core::trainer::{Counters, RunOutcome, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::DatasetSource;
use crate::fsutil::{atomic_write, read_file, FsError};
use crate::variants::{Flags, Variant};

pub const RUN_FORMAT: &str = "gfscil-run/1";
pub const AGGREGATE_FORMAT: &str = "gfscil-aggregate/1";
pub const TABLE_FORMAT: &str = "gfscil-table/1";

/// Everything one seed produced. Contains no timings, so identical inputs
/// give identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub method: String,
    pub config_hash: String,
    pub seed: u64,
    pub dataset: DatasetSource,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub accuracy: AccuracyMatrix,
    pub meta_loss_curve: Vec<f64>,
    /// Fine-tuning losses per novel task.
    pub inc_losses: Vec<Vec<f64>>,
    /// Incremental buffer size before each novel task.
    pub buffer_sizes: Vec<usize>,
    pub meta_counters: Counters,
    pub stage_counters: Counters,
}

impl RunReport {
    pub fn new(method: &str, config_hash: &str, dataset: &DatasetSource, split: &SplitConfig, train: &TrainConfig, out: &RunOutcome) -> Self {
        Self {
            format: RUN_FORMAT.into(),
            method: method.into(),
            config_hash: config_hash.into(),
            seed: train.seed,
            dataset: dataset.clone(),
            split: split.clone(),
            train: train.clone(),
            accuracy: out.stage.accuracy.clone(),
            meta_loss_curve: out.meta.loss_curve.clone(),
            inc_losses: out.stage.inc_losses.clone(),
            buffer_sizes: out.stage.buffer_sizes.clone(),
            meta_counters: out.meta.counters,
            stage_counters: out.stage.counters,
        }
    }

    /// Meta plus incremental counters.
    pub fn counters(&self) -> Counters {
        let mut c = self.meta_counters;
        c.merge(&self.stage_counters);
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateFile {
    pub format: String,
    pub method: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub dataset: DatasetSource,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub report: AggregateReport,
    pub counters: Counters,
}

impl AggregateFile {
    pub fn final_overall(&self) -> MeanStd {
        self.report.rows.last().map_or(MeanStd { mean: f64::NAN, std: f64::NAN }, |r| r.overall)
    }
}

/// One row of a variant comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub variant: Variant,
    pub flags: Flags,
    pub config_hash: String,
    /// Overall accuracy per stage.
    pub stages: Vec<MeanStd>,
    pub counters: Counters,
}

impl TableRow {
    pub fn from_aggregate(variant: Variant, agg: &AggregateFile) -> Self {
        Self {
            variant,
            flags: variant.flags(),
            config_hash: agg.config_hash.clone(),
            stages: agg.report.rows.iter().map(|r| r.overall).collect(),
            counters: agg.counters,
        }
    }

    pub fn final_mean(&self) -> f64 {
        self.stages.last().map_or(f64::NAN, |s| s.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantTable {
    pub format: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<TableRow>,
}

impl VariantTable {
    pub fn row(&self, v: Variant) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.variant == v)
    }
}

/// Any report file, told apart by its `format` field.
#[derive(Debug, Clone, PartialEq)]
pub enum Report {
    Run(RunReport),
    Aggregate(AggregateFile),
    Table(VariantTable),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Json,
    Csv,
    PlotData,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Csv => "csv",
            Format::PlotData => "dat",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Fs(#[from] FsError),
    #[error("{origin}: {source}")]
    Json { origin: String, source: serde_json::Error },
    #[error("{origin}: unknown report format {found:?}")]
    Format { origin: String, found: String },
}

pub fn stage_name(stage: usize) -> String {
    if stage == 0 {
        "Base".into()
    } else {
        format!("Task {stage}")
    }
}

/// `mean±std` in percent with two decimals.
fn cell(m: &MeanStd) -> String {
    format!("{:.2}±{:.2}", 100.0 * m.mean, 100.0 * m.std)
}

fn point(m: f64) -> MeanStd {
    MeanStd { mean: m, std: 0.0 }
}

/// Per-stage cells of one accuracy table: overall, then one per task.
fn stage_rows(rows: &[(MeanStd, Vec<MeanStd>)]) -> String {
    let tasks = rows.len();
    let mut out = String::from("stage,overall");
    for t in 0..tasks {
        write!(out, ",{}", if t == 0 { "base".to_string() } else { format!("task {t}") }).unwrap();
    }
    out.push('\n');
    for (s, (overall, per_task)) in rows.iter().enumerate() {
        write!(out, "{},{}", stage_name(s), cell(overall)).unwrap();
        for t in 0..tasks {
            out.push(',');
            if let Some(m) = per_task.get(t) {
                out.push_str(&cell(m));
            }
        }
        out.push('\n');
    }
    out
}

impl Report {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ReportError> {
        let json = |source| ReportError::Json { origin: origin.into(), source };
        let value: serde_json::Value = serde_json::from_str(text).map_err(json)?;
        let format = value.get("format").and_then(|f| f.as_str()).unwrap_or_default().to_string();
        match format.as_str() {
            RUN_FORMAT => Ok(Report::Run(serde_json::from_value(value).map_err(json)?)),
            AGGREGATE_FORMAT => Ok(Report::Aggregate(serde_json::from_value(value).map_err(json)?)),
            TABLE_FORMAT => Ok(Report::Table(serde_json::from_value(value).map_err(json)?)),
            _ => Err(ReportError::Format { origin: origin.into(), found: format }),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ReportError> {
        Self::parse(&read_file(path)?, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        let s = match self {
            Report::Run(r) => serde_json::to_string_pretty(r),
            Report::Aggregate(a) => serde_json::to_string_pretty(a),
            Report::Table(t) => serde_json::to_string_pretty(t),
        };
        s.expect("reports serialize") + "\n"
    }

    /// One row per stage plus a header. Run reports have zero spread.
    /// Variant tables have one row per variant instead.
    pub fn to_csv(&self) -> String {
        match self {
            Report::Run(r) => stage_rows(
                &r.accuracy
                    .rows
                    .iter()
                    .map(|row| (point(row.overall), row.per_task.iter().map(|&a| point(a)).collect()))
                    .collect::<Vec<_>>(),
            ),
            Report::Aggregate(a) => {
                stage_rows(&a.report.rows.iter().map(|row| (row.overall, row.per_task.clone())).collect::<Vec<_>>())
            }
            Report::Table(t) => {
                let stages = t.rows.iter().map(|r| r.stages.len()).max().unwrap_or(0);
                let mut out = String::from("variant,mctf,sir,kd");
                for s in 0..stages {
                    write!(out, ",{}", stage_name(s)).unwrap();
                }
                out.push('\n');
                for r in &t.rows {
                    let f = r.flags;
                    write!(out, "{},{},{},{}", r.variant, f.mctf as u8, f.sir as u8, f.kd as u8).unwrap();
                    for s in &r.stages {
                        write!(out, ",{}", cell(s)).unwrap();
                    }
                    out.push('\n');
                }
                out
            }
        }
    }

    /// Series of `stage accuracy` lines, one block per method, blocks
    /// separated by a blank line and introduced by `# <method>`.
    pub fn to_plot_data(&self) -> String {
        let series: Vec<(String, Vec<f64>)> = match self {
            Report::Run(r) => vec![(r.method.clone(), r.accuracy.rows.iter().map(|x| x.overall).collect())],
            Report::Aggregate(a) => vec![(a.method.clone(), a.report.rows.iter().map(|x| x.overall.mean).collect())],
            Report::Table(t) => {
                t.rows.iter().map(|r| (r.variant.to_string(), r.stages.iter().map(|s| s.mean).collect())).collect()
            }
        };
        let mut out = String::new();
        for (i, (name, ys)) in series.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            writeln!(out, "# {name}").unwrap();
            for (x, y) in ys.iter().enumerate() {
                writeln!(out, "{x} {y:?}").unwrap();
            }
        }
        out
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Json => self.to_json(),
            Format::Csv => self.to_csv(),
            Format::PlotData => self.to_plot_data(),
        }
    }
}

/// Writes `report` to `path` atomically.
pub fn emit_report(report: &Report, format: Format, path: &Path) -> Result<(), FsError> {
    atomic_write(path, report.render(format).as_bytes())
}

/// Writes `<dir>/<stem>.{json,csv,dat}`.
pub fn emit_all(report: &Report, dir: &Path, stem: &str) -> Result<(), FsError> {
    for format in [Format::Json, Format::Csv, Format::PlotData] {
        emit_report(report, format, &dir.join(format!("{stem}.{}", format.extension())))?;
    }
    Ok(())
}
