//! `vise` command-line front end.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 partial failure (failed
//! episodes above the configured tolerance), 3 backend unreachable.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use vise_core::backends::{NoiseProfile, StubServer};
use vise_core::dataset::{generate_synthetic_dataset, DatasetIndex, SceneSpec};
use vise_core::metrics::{render_csv, render_table, report_to_json, Report};
use vise_core::pipeline::Variant;
use vise_core::runner::{
    cmd_inspect, cmd_report, cmd_resume, cmd_run, strip_json_comments, RunConfig, RunSummary,
    RunnerError,
};

#[derive(Parser)]
#[command(name = "vise", version, about = "Few-shot classification and segmentation evaluation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset utilities.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Execute a fresh run described by a config file.
    Run(RunArgs),
    /// Continue an interrupted run; refuses on config mismatch.
    Resume(RunArgs),
    /// Render reports from one or more run directories.
    Report(ReportArgs),
    /// Dump one episode transcript and write audit images beside it.
    Inspect {
        /// Path of a transcript JSON file.
        transcript: PathBuf,
    },
    /// Serve the bundled stub backends over HTTP (for contract tests and
    /// remote-profile experiments against synthetic data).
    Serve {
        /// Dataset manifest backing the stub.
        #[arg(long)]
        manifest: PathBuf,
        /// Optional noise profile JSON file; exact oracle when omitted.
        #[arg(long)]
        noise: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Generate a synthetic dataset from a scene-spec JSON file.
    Synth {
        /// Scene spec JSON; `-` or a missing file field uses defaults.
        spec: PathBuf,
        /// Output directory for images plus manifest.json.
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run config file (JSON; // and /* */ comments allowed).
    #[arg(short, long)]
    config: PathBuf,
    /// Flag overrides win over file values.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    episodes: Option<u64>,
    /// Comma-separated fold ids, e.g. `0,1,2,3`.
    #[arg(long, value_delimiter = ',')]
    folds: Option<Vec<u32>>,
    #[arg(long)]
    n_ways: Option<u32>,
    #[arg(long)]
    k_shots: Option<u32>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    variant: Option<CliVariant>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliVariant {
    Full,
    VlmBoxes,
    BoxFill,
}

impl From<CliVariant> for Variant {
    fn from(v: CliVariant) -> Variant {
        match v {
            CliVariant::Full => Variant::Full,
            CliVariant::VlmBoxes => Variant::VlmBoxes,
            CliVariant::BoxFill => Variant::BoxFill,
        }
    }
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories to merge into one comparison table.
    dirs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Write to a file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Re-derive per-class pixel counts from the stored masks and check
    /// them against the results file.
    #[arg(long)]
    verify: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
    Json,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_backend_unreachable() {
                3
            } else {
                1
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32, RunnerError> {
    match cli.command {
        Command::Dataset {
            command: DatasetCommand::Synth { spec, out, seed },
        } => {
            let scene = load_scene_spec(&spec)?;
            let manifest = generate_synthetic_dataset(&scene, seed, &out)?;
            println!("wrote {}", manifest.display());
            Ok(0)
        }
        Command::Run(args) => {
            let config = load_config(&args)?;
            finish_run(cmd_run(&config), &config)
        }
        Command::Resume(args) => {
            let config = load_config(&args)?;
            finish_run(cmd_resume(&config), &config)
        }
        Command::Report(args) => {
            if args.dirs.is_empty() {
                return Err(RunnerError::Config("no run directories given".into()));
            }
            let report = cmd_report(&args.dirs, args.verify)?;
            let rendered = render(&report, args.format);
            match args.out {
                Some(path) => {
                    std::fs::write(&path, rendered)?;
                    println!("wrote {}", path.display());
                }
                None => print!("{rendered}"),
            }
            Ok(0)
        }
        Command::Inspect { transcript } => {
            let report = cmd_inspect(&transcript)?;
            print!("{}", report.text);
            Ok(0)
        }
        Command::Serve { manifest, noise } => {
            let index = DatasetIndex::load_manifest(&manifest)?;
            let profile = match noise {
                None => NoiseProfile::default(),
                Some(path) => {
                    let text = std::fs::read_to_string(&path)?;
                    serde_json::from_str(&strip_json_comments(&text))
                        .map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))?
                }
            };
            let server = StubServer::spawn(&index, profile)
                .map_err(|e| RunnerError::Config(e.to_string()))?;
            println!("stub server listening at {}", server.base_url());
            println!("endpoints: /v1/detect /v1/segment /v1/chat (ctrl-c to stop)");
            loop {
                std::thread::sleep(std::time::Duration::from_secs(3600));
            }
        }
    }
}

fn load_scene_spec(path: &PathBuf) -> Result<SceneSpec, RunnerError> {
    if path.as_os_str() == "-" {
        return Ok(SceneSpec::default());
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&strip_json_comments(&text))
        .map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))
}

fn load_config(args: &RunArgs) -> Result<RunConfig, RunnerError> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(episodes) = args.episodes {
        config.episodes_per_fold = episodes;
    }
    if let Some(folds) = &args.folds {
        config.folds = Some(folds.clone());
    }
    if let Some(n) = args.n_ways {
        config.n_ways = n;
    }
    if let Some(k) = args.k_shots {
        config.k_shots = k;
    }
    if let Some(dir) = &args.output_dir {
        config.output_dir = dir.clone();
    }
    if let Some(parallelism) = args.parallelism {
        config.parallelism = parallelism;
    }
    if let Some(variant) = args.variant {
        config.pipeline.variant = variant.into();
    }
    Ok(config)
}

fn finish_run(result: Result<RunSummary, RunnerError>, config: &RunConfig) -> Result<i32, RunnerError> {
    let summary = result?;
    print!("{}", render_table(&summary.report));
    println!(
        "{} episode(s), {} failed, results in {}",
        summary.episodes,
        summary.failed,
        summary.output_dir.display()
    );
    if summary.failed > config.failure_tolerance {
        Ok(2)
    } else {
        Ok(0)
    }
}

fn render(report: &Report, format: Format) -> String {
    match format {
        Format::Table => render_table(report),
        Format::Csv => render_csv(report),
        Format::Json => report_to_json(report),
    }
}
