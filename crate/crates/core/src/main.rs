use std::io::{self, BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tryon::bridge::{serve, ToyBridge};
use tryon::pipeline::config::DEFAULT_TOY_VARIANCE;
use tryon::pipeline::{run_tryon, write_fixture, BackboneMode, GuidanceKind, JobConfig, RunOptions};
use tryon::Error;

#[derive(Parser)]
#[command(name = "tryon", version, about = "Training-free virtual try-on")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a try-on job end to end.
    Run(JobArgs),
    /// Run the job up to and including garment morphing.
    Morph(StageArgs),
    /// Run the job up to and including the proxy image.
    Proxy(StageArgs),
    /// Serve the toy denoiser over the bridge protocol on stdin/stdout.
    BridgeToy {
        #[arg(long, default_value_t = DEFAULT_TOY_VARIANCE)]
        variance: f64,
    },
    /// Write a small synthetic job into a directory.
    Fixture {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StagePolicy {
    Fresh,
    Resume,
}

#[derive(Args)]
struct JobArgs {
    /// Job config; repeat to run several jobs concurrently, one thread each.
    #[arg(long, required = true)]
    config: Vec<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<BackboneMode>,
    #[arg(long)]
    guidance: Option<GuidanceKind>,
    /// Principal components kept by the guidance projection.
    #[arg(long = "m")]
    components: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory; with several configs, job `i` writes to `DIR/job{i}`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `resume` skips stages whose artifacts from a previous identical run
    /// are intact.
    #[arg(long, value_enum, default_value_t = StagePolicy::Fresh)]
    stage: StagePolicy,
    /// Same as `--stage resume`.
    #[arg(long)]
    resume: bool,
}

fn load_config(path: &Path, out: Option<PathBuf>) -> tryon::Result<JobConfig> {
    let mut cfg = JobConfig::load(path)?;
    if let Some(out) = out {
        cfg.out = out;
    }
    Ok(cfg)
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Validation(_) | Error::Format { .. } | Error::InvalidArgument(_) => 2,
        _ => 3,
    }
}

fn config_error(e: Error) -> (Error, u8) {
    let code = if matches!(e, Error::Io { .. }) {
        2
    } else {
        exit_code(&e)
    };
    (e, code)
}

fn stage_error(e: Error) -> (Error, u8) {
    let code = exit_code(&e);
    (e, code)
}

fn execute(command: Command) -> Result<(), (Error, u8)> {
    match command {
        Command::Run(args) => {
            let many = args.config.len() > 1;
            let results: Vec<Result<(), (Error, u8)>> = std::thread::scope(|scope| {
                let handles: Vec<_> = args
                    .config
                    .iter()
                    .enumerate()
                    .map(|(i, config)| {
                        let out = match (&args.out, many) {
                            (Some(dir), true) => Some(dir.join(format!("job{i}"))),
                            (out, _) => out.clone(),
                        };
                        let args = &args;
                        scope.spawn(move || run_job(args, config, out))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("job thread panicked"))
                    .collect()
            });
            let mut worst: Option<(Error, u8)> = None;
            for r in results {
                if let Err((e, code)) = r {
                    if many {
                        eprintln!("error: {e}");
                    }
                    if worst.as_ref().is_none_or(|(_, c)| code > *c) {
                        worst = Some((e, code));
                    }
                }
            }
            if let Some(err) = worst {
                return Err(err);
            }
        }
        Command::Morph(args) => run_partial(args, "morph")?,
        Command::Proxy(args) => run_partial(args, "proxy")?,
        Command::BridgeToy { variance } => {
            let stdin = io::stdin();
            let stdout = io::stdout();
            let mut backend = ToyBridge::new(variance);
            serve(
                BufReader::new(stdin.lock()),
                BufWriter::new(stdout.lock()),
                &mut backend,
            )
            .map_err(stage_error)?;
        }
        Command::Fixture { out } => {
            let path = write_fixture(&out).map_err(stage_error)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn run_job(args: &JobArgs, config: &Path, out: Option<PathBuf>) -> Result<(), (Error, u8)> {
    let mut cfg = load_config(config, out).map_err(config_error)?;
    let s = &mut cfg.sampling;
    s.seed = args.seed.unwrap_or(s.seed);
    s.mode = args.mode.unwrap_or(s.mode);
    s.guidance = args.guidance.unwrap_or(s.guidance);
    s.components = args.components.unwrap_or(s.components);
    s.steps = args.steps.unwrap_or(s.steps);
    let opts = RunOptions {
        resume: args.resume || args.stage == StagePolicy::Resume,
        stop_after: None,
    };
    let report = run_tryon(&cfg, opts).map_err(stage_error)?;
    for stage in &report.stages {
        for w in &stage.warnings {
            log::warn!("{}: {w}", stage.stage);
        }
    }
    println!("{}", cfg.out.join("result.png").display());
    Ok(())
}

fn run_partial(args: StageArgs, last: &'static str) -> Result<(), (Error, u8)> {
    let cfg = load_config(&args.config, args.out).map_err(config_error)?;
    let opts = RunOptions {
        resume: false,
        stop_after: Some(last),
    };
    run_tryon(&cfg, opts).map_err(stage_error)?;
    println!("{}", cfg.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err((err, code)) => {
            eprintln!("error: {err}");
            ExitCode::from(code)
        }
    }
}
