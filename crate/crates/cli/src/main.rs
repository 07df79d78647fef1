//! `aerodepth` command line.
//!
//! Exit codes: 0 success, 1 data or quality failure, 2 configuration or
//! usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aerodepth::pipeline::{
    run_pipeline, run_single_stage, synth_run_config, PipelineError, RunConfig, Stage,
};
use aerodepth::synth::{generate, write_dataset, SynthSpec};
use clap::{Args, Parser, Subcommand};

/// Environment variable holding the default worker count.
const WORKERS_ENV: &str = "AERODEPTH_WORKERS";
/// Pipeline config written next to each synthetic dataset.
const SYNTH_CONFIG_FILE: &str = "pipeline.json";

#[derive(Parser)]
#[command(name = "aerodepth", version, about = "Metric depth, DSM and orthophoto from monocular depth and tie points")]
struct Cli {
    /// Log filter (error, warn, info, debug, trace); RUST_LOG takes precedence.
    #[arg(long, global = true)]
    log_level: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and a matching pipeline config.
    Synth {
        /// Synthetic dataset spec (JSON).
        spec: PathBuf,
        /// Output dataset directory.
        out: PathBuf,
        /// Override the spec seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit per-image depth models and write metric depth maps.
    Recover(StageArgs),
    /// Back-project recovered depth into a colored point cloud.
    Cloud(StageArgs),
    /// Grid the point cloud into a hole-filled DSM.
    Dsm(StageArgs),
    /// Build the true orthophoto from the DSM.
    Ortho(StageArgs),
    /// Compare outputs with ground truth.
    Eval(StageArgs),
    /// Run all enabled stages in order.
    Pipeline(StageArgs),
}

#[derive(Args)]
struct StageArgs {
    /// Run config (JSON).
    config: PathBuf,
    /// Worker threads [default: config, then $AERODEPTH_WORKERS, then all cores].
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// DSM cell size, meters.
    #[arg(long)]
    cell_size: Option<f64>,
    /// Fusion pixel stride.
    #[arg(long)]
    stride: Option<usize>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn init_logging(level: Option<&str>) {
    let env = env_logger::Env::default().default_filter_or(level.unwrap_or("info"));
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn default_workers() -> Result<usize, Failure> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(usage(format!("{WORKERS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn load_config(args: &StageArgs, log_level: Option<&str>) -> Result<(RunConfig, usize), Failure> {
    let mut cfg = RunConfig::load(&args.config)?;
    init_logging(log_level.or(Some(cfg.log_level.as_str())));
    if let Some(d) = &args.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(m) = &args.manifest {
        cfg.manifest = m.clone();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.cell_size.is_some() {
        cfg.dsm.cell_size = args.cell_size;
    }
    if args.stride.is_some() {
        cfg.fusion.stride = args.stride;
    }
    if let Some(w) = args.workers {
        cfg.workers = Some(w);
    }
    cfg.validate()?;
    let workers = match cfg.workers {
        Some(w) => w,
        None => default_workers()?,
    };
    Ok((cfg, workers))
}

fn synth(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let classify = |e: aerodepth::synth::SynthError| Failure {
        code: if e.is_config_error() { 2 } else { 1 },
        message: e.to_string(),
    };
    let mut spec = SynthSpec::load(spec_path).map_err(classify)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let ds = generate(&spec).map_err(classify)?;
    let manifest = write_dataset(&ds, out).map_err(classify)?;
    let mut cfg = synth_run_config(Path::new(""), Path::new("output"), ds.aoi, spec.truth_dsm_cell_size);
    cfg.seed = spec.seed;
    let mut text = serde_json::to_string_pretty(&cfg).expect("config serializes");
    text.push('\n');
    let cfg_path = out.join(SYNTH_CONFIG_FILE);
    std::fs::write(&cfg_path, text).map_err(|e| Failure {
        code: 1,
        message: format!("{}: {e}", cfg_path.display()),
    })?;
    log::info!(
        "wrote {} images, {} tie points; manifest {}, config {}",
        ds.views.len(),
        ds.tie_points.points.len(),
        manifest.display(),
        cfg_path.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let level = cli.log_level.as_deref();
    let (args, stage) = match cli.command {
        Command::Synth { spec, out, seed } => {
            init_logging(level);
            return synth(&spec, &out, seed);
        }
        Command::Pipeline(a) => (a, None),
        Command::Recover(a) => (a, Some(Stage::Recover)),
        Command::Cloud(a) => (a, Some(Stage::Cloud)),
        Command::Dsm(a) => (a, Some(Stage::Dsm)),
        Command::Ortho(a) => (a, Some(Stage::Ortho)),
        Command::Eval(a) => (a, Some(Stage::Eval)),
    };
    let (cfg, workers) = load_config(&args, level)?;
    log::info!("using {workers} worker(s)");
    match stage {
        None => {
            let summary = run_pipeline(cfg, workers)?;
            if let Some(e) = &summary.eval {
                if let Some(c) = e.completeness {
                    log::info!("DSM completeness {c:.4}");
                }
                if let Some(m) = e.mrmse {
                    log::info!("mRMSE {m:.4} m");
                }
            }
        }
        Some(s) => {
            run_single_stage(cfg, s, workers)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
