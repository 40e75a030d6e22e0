use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fedsparse_core::harness::{read_metrics_csv, MetricsReport};
use fedsparse_core::pool_service::{self, PoolStore};
use fedsparse_core::sparse_ts::{ingest_csv, write_csv, SparseSeries};
use fedsparse_core::synth::{gen_domain, heterogeneous_specs, DomainSpec};
use fedsparse_core::{
    dnn_baseline, emit_report, run_ablation_grid, run_experiment, AblationMode, DomainData, RunConfig,
};
use log::info;

#[derive(Parser)]
#[command(name = "fedsparse", version, about = "Heterogeneous federated learning on sparse time series")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a heterogeneous target/source pair as CSV.
    Synth(SynthArgs),
    /// Run or inspect a model pool.
    Pool {
        #[command(subcommand)]
        command: PoolCommand,
    },
    /// Train one mode (plus the DNN baseline unless disabled).
    Train(RunArgs),
    /// Train all four ablation modes on identical data and seeds.
    Ablate(RunArgs),
    /// Print the aggregate table of a finished run.
    Report {
        /// Directory holding metrics.csv.
        dir: PathBuf,
    },
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for target.csv and source.csv.
    #[arg(short, long)]
    out: PathBuf,
    /// Domain spec as TOML; flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Target patients (the source gets ten times as many).
    #[arg(long)]
    patients: Option<usize>,
    #[arg(long)]
    events: Option<usize>,
    #[arg(long)]
    nf: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum PoolCommand {
    /// Serve an in-memory pool over TCP until killed.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: String,
    },
    /// List the entries held by a pool.
    List {
        #[arg(long, env = pool_service::POOL_ENV)]
        endpoint: String,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Target domain CSV (patient_id,time,channel,value).
    #[arg(long)]
    target: PathBuf,
    /// Source domain CSVs.
    #[arg(long)]
    source: Vec<PathBuf>,
    /// Run configuration TOML; flags below override it.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Feature count; defaults to the highest channel in the target.
    #[arg(long)]
    nf: Option<usize>,
    /// Federation mode: no, random, always or hfl.
    #[arg(long)]
    mode: Option<AblationMode>,
    /// Pool endpoint: memory, file://DIR, tcp://HOST:PORT or HOST:PORT.
    #[arg(long, env = pool_service::POOL_ENV)]
    pool: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Train a single label channel instead of all of them.
    #[arg(long)]
    label_index: Option<usize>,
    /// Skip the DNN baseline.
    #[arg(long)]
    no_baseline: bool,
    /// Train only the DNN baseline.
    #[arg(long, conflicts_with = "no_baseline")]
    baseline_only: bool,
    /// Output directory for metrics.csv, audit.jsonl and summary.json.
    #[arg(short, long, default_value = "fedsparse-out")]
    out: PathBuf,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                RunConfig::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(p) = &self.pool {
            cfg.pool = p.clone();
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(r) = self.repeats {
            cfg.repeats = r;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if self.label_index.is_some() {
            cfg.label_index = self.label_index;
        }
        if self.no_baseline {
            cfg.baseline = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_domain(path: &Path, nf: Option<usize>) -> Result<DomainData> {
    let series = ingest_csv(path).with_context(|| format!("reading {}", path.display()))?;
    let nf = match nf {
        Some(n) => n,
        None => infer_nf(&series).with_context(|| format!("{} holds no events", path.display()))?,
    };
    let name = path.file_stem().map_or("domain".into(), |s| s.to_string_lossy().into_owned());
    Ok(DomainData::new(name, nf, series)?)
}

fn infer_nf(series: &[SparseSeries]) -> Option<usize> {
    series.iter().flat_map(|s| &s.events).map(|e| e.channel).max()
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut base = match &args.spec {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => DomainSpec::default(),
    };
    if let Some(p) = args.patients {
        base.n_patients = p;
    }
    if let Some(e) = args.events {
        base.events_per_patient = e;
    }
    if let Some(n) = args.nf {
        base.nf = n;
    }
    base.validate()?;
    let (target, source) = heterogeneous_specs(&base, args.seed);
    std::fs::create_dir_all(&args.out)?;
    for (spec, seed, file) in [(&target, args.seed, "target.csv"), (&source, args.seed.wrapping_add(1), "source.csv")] {
        let series = gen_domain(spec, seed)?;
        let path = args.out.join(file);
        write_csv(&series, std::fs::File::create(&path)?)?;
        println!("{}: {} patients", path.display(), series.len());
    }
    Ok(())
}

fn run(args: &RunArgs, ablate: bool) -> Result<bool> {
    let cfg = args.config()?;
    let target = load_domain(&args.target, args.nf)?;
    let sources = args
        .source
        .iter()
        .map(|p| load_domain(p, Some(target.nf)))
        .collect::<Result<Vec<_>>>()?;
    info!("target {} patients, {} source domain(s), pool {}", target.series.len(), sources.len(), cfg.pool);
    let report = if args.baseline_only {
        dnn_baseline(&cfg, &target)?
    } else if ablate {
        run_ablation_grid(&cfg, &target, &sources)?
    } else {
        run_experiment(&cfg, &target, &sources)?
    };
    for path in emit_report(&report, &args.out)? {
        println!("wrote {}", path.display());
    }
    print_aggregates(&report);
    if report.failed_repeats > 0 {
        eprintln!("{} repeat(s) failed", report.failed_repeats);
    }
    Ok(report.failed_repeats == 0)
}

fn print_aggregates(report: &MetricsReport) {
    println!("{:<12} {:>4} {:>12} {:>12} {:>4} {:>7}", "system", "task", "valid_mse", "test_mse", "rank", "repeats");
    for a in &report.aggregates {
        println!(
            "{:<12} {:>4} {:>12.6} {:>12.6} {:>4} {:>7}",
            a.system, a.task, a.valid_mse, a.test_mse, a.rank, a.repeats
        );
    }
}

fn report(dir: &Path) -> Result<bool> {
    let rows = read_metrics_csv(dir.join("metrics.csv"))?;
    if rows.is_empty() {
        bail!("{} has no metrics rows", dir.display());
    }
    println!("{:<12} {:>4} {:>12} {:>12} {:>4}", "system", "task", "valid_mse", "test_mse", "rank");
    for r in rows.iter().filter(|r| r.repeat == "mean") {
        println!(
            "{:<12} {:>4} {:>12.6} {:>12.6} {:>4}",
            r.system,
            r.task,
            r.valid_mse,
            r.test_mse,
            r.rank.unwrap_or(0)
        );
    }
    let failed = rows.iter().filter(|r| r.failed).count();
    if failed > 0 {
        println!("{failed} failed repeat(s)");
    }
    Ok(failed == 0)
}

fn pool(cmd: &PoolCommand) -> Result<()> {
    match cmd {
        PoolCommand::Serve { listen } => {
            let server = pool_service::serve(listen.as_str(), Arc::new(PoolStore::new()))?;
            println!("pool listening on {}", server.local_addr());
            server.join();
        }
        PoolCommand::List { endpoint } => {
            let client = pool_service::connect(endpoint)?;
            for e in client.fetch(None)? {
                println!("{}\t{}\tv{}\t{} params", e.user_id, e.feature_index, e.version, e.weights.param_count());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let outcome = match &cli.command {
        Command::Synth(a) => synth(a).map(|_| true),
        Command::Pool { command } => pool(command).map(|_| true),
        Command::Train(a) => run(a, false),
        Command::Ablate(a) => run(a, true),
        Command::Report { dir } => report(dir),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
