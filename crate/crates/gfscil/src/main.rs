use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gfscil::config::{DatasetSource, RunConfig, OUT_ENV};
use gfscil::dataset::{save_dataset, DatasetError};
use gfscil::driver::{run_ablation, run_method, DriverError, RunOptions};
use gfscil::gradcheck::{run_suite, Fault};
use gfscil::report::{Format, Report};
use gfscil::variants::Variant;
use gfscil_core::graph::{generate_sbm, SbmConfig};

/// Meta continual learning for few-shot class-incremental node
/// classification.
#[derive(Parser)]
#[command(name = "gfscil", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train, run the incremental stage and report, once per seed.
    Run {
        #[command(flatten)]
        common: Common,
        /// Train a named variant instead of the configured flags.
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Run a set of variants and write a combined table keyed by their flags.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variants; defaults to the config's list, then to
        /// baseline,a,b,c,d,e,f,g.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<Variant>>,
    },
    /// Compare every analytic gradient with central finite differences.
    CheckGrad {
        /// Corrupt one derivative rule, as OP=FACTOR. Testing aid.
        #[arg(long, hide = true, value_parser = parse_fault)]
        inject_fault: Option<Fault>,
    },
    /// Write a synthetic stochastic-block-model dataset directory.
    GenSbm {
        /// Destination directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SbmConfig::default().classes)]
        classes: usize,
        #[arg(long, default_value_t = SbmConfig::default().nodes_per_class)]
        nodes_per_class: usize,
        #[arg(long, default_value_t = SbmConfig::default().intra_edge_prob)]
        intra: f64,
        #[arg(long, default_value_t = SbmConfig::default().inter_edge_prob)]
        inter: f64,
        #[arg(long, default_value_t = SbmConfig::default().feature_dim)]
        feature_dim: usize,
        /// Standard deviation of the feature noise.
        #[arg(long, default_value_t = SbmConfig::default().feature_noise)]
        noise: f64,
        /// Length of the class mean vectors.
        #[arg(long, default_value_t = SbmConfig::default().mean_scale)]
        mean_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a report, aggregate or ablation table in another format.
    ShowReport {
        /// A report file, or a directory holding ablation.json,
        /// aggregate.json or report.json.
        path: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; the built-in synthetic benchmark if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.meta_epochs=60`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Comma-separated seeds, replacing the config's list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Dataset directory, replacing the config's dataset.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output root. Falls back to the config's out_dir, then `runs`.
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// Seeds trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn parse_fault(s: &str) -> Result<Fault, String> {
    let (op, factor) = s.split_once('=').ok_or("expected OP=FACTOR")?;
    let factor = factor.parse().map_err(|_| format!("bad factor {factor:?}"))?;
    // op names are compared against static primitive names on the tape
    Ok(Fault { op: Box::leak(op.to_string().into_boxed_str()), factor })
}

/// A failure and the exit status it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl ToString) -> Self {
        Self { code: 2, msg: msg.to_string() }
    }

    fn run(msg: impl ToString) -> Self {
        Self { code: 1, msg: msg.to_string() }
    }
}

impl From<DriverError> for Failure {
    fn from(e: DriverError) -> Self {
        match e {
            DriverError::Dataset(d) => Failure::usage(d),
            other => Failure::run(other),
        }
    }
}

fn load(common: &Common) -> Result<(RunConfig, gfscil_core::graph::GraphDataset, RunOptions), Failure> {
    let mut cfg = RunConfig::resolve(common.config.as_deref(), &common.overrides).map_err(Failure::usage)?;
    if let Some(seeds) = &common.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(path) = &common.dataset {
        cfg.dataset = DatasetSource::Path { path: path.clone() };
    }
    cfg.validate().map_err(Failure::usage)?;
    let ds = cfg.dataset.load().map_err(|e: DatasetError| Failure::usage(e))?;
    let mut opts = RunOptions::new(cfg.out_root(common.out.as_deref()));
    opts.jobs = common.jobs;
    Ok((cfg, ds, opts))
}

fn log(msg: &str) {
    eprintln!("{msg}");
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { common, variant } => {
            let (cfg, ds, opts) = load(&common)?;
            let summary = run_method(&cfg, variant, &ds, &opts, &log)?;
            print!("{}", Report::Aggregate(summary.aggregate).to_csv());
            eprintln!("wrote {}", summary.dir.display());
        }
        Command::Ablate { common, variants } => {
            let (cfg, ds, opts) = load(&common)?;
            let variants = variants
                .or_else(|| (!cfg.variants.is_empty()).then(|| cfg.variants.clone()))
                .unwrap_or_else(|| Variant::ABLATION.to_vec());
            let (table, _) = run_ablation(&cfg, &variants, &ds, &opts, &log)?;
            print!("{}", Report::Table(table).to_csv());
            eprintln!("wrote {}", opts.out_root.join(cfg.hash()).display());
        }
        Command::CheckGrad { inject_fault } => {
            let checks = run_suite(inject_fault).map_err(Failure::run)?;
            for c in &checks {
                println!("{}", c.line());
            }
            let failed = checks.iter().filter(|c| !c.passed()).count();
            if failed > 0 {
                return Err(Failure::run(format!("{failed} of {} gradient checks failed", checks.len())));
            }
        }
        Command::GenSbm { out, classes, nodes_per_class, intra, inter, feature_dim, noise, mean_scale, seed } => {
            let sbm = SbmConfig {
                classes,
                nodes_per_class,
                intra_edge_prob: intra,
                inter_edge_prob: inter,
                feature_dim,
                feature_noise: noise,
                mean_scale,
                seed,
            };
            let ds = generate_sbm(&sbm).map_err(Failure::usage)?;
            save_dataset(&ds, &out).map_err(Failure::run)?;
            eprintln!("wrote {} nodes, {} edges to {}", ds.num_nodes(), ds.edges().len(), out.display());
        }
        Command::ShowReport { path, format } => {
            let file = resolve_report(&path).ok_or_else(|| Failure::usage(format!("no report at {}", path.display())))?;
            let report = Report::load(&file).map_err(Failure::usage)?;
            print!("{}", report.render(format));
        }
    }
    Ok(())
}

fn resolve_report(path: &Path) -> Option<PathBuf> {
    if path.is_file() {
        return Some(path.to_path_buf());
    }
    ["ablation.json", "aggregate.json", "report.json"].iter().map(|f| path.join(f)).find(|p| p.is_file())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
