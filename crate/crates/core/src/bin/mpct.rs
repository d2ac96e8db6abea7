//! Command-line entry point. Prints results as JSON on stdout; failures
//! print `{"error": <category>, "message": ...}` on stderr and exit with
//! the category's code.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mpct::cli;
use mpct::config::ExperimentConfig;
use mpct::error::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mpct",
    version,
    about = "Missing-phase CT synthesis and tumor subtype classification"
)]
struct Args {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the phantom, training and permutation seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for evaluation; training is single-threaded.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom dataset and its split.
    PhantomGen {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the configured mode, resuming from checkpoints in the run directory.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Synthesize the missing phases of one case.
    Synthesize {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        case: PathBuf,
        /// Comma-separated phases to write, e.g. `1,4`; all missing phases by default.
        #[arg(long)]
        missing: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict the subtype distribution of one case.
    Classify {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        case: PathBuf,
    },
    /// Run the simulated-drop protocol on the test split for one or more runs.
    Evaluate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Error::Argument(format!("--{name} is required (or set paths.{name}_dir)")))
}

fn print<T: serde::Serialize>(v: &T) -> Result<()> {
    println!(
        "{}",
        serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?
    );
    Ok(())
}

fn run(args: Args) -> Result<()> {
    let cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    }
    .with_overrides(args.seed, args.threads)?;
    match args.command {
        Command::PhantomGen { out } => {
            let out = required(out, &cfg.paths.data_dir, "data")?;
            print(&cli::cmd_phantom_gen(&cfg, &out)?)
        }
        Command::Train { data, run } => {
            let data = required(data, &cfg.paths.data_dir, "data")?;
            let run = required(run, &cfg.paths.run_dir, "run")?;
            print(&cli::cmd_train(&cfg, &data, &run)?)
        }
        Command::Synthesize {
            run,
            case,
            missing,
            out,
        } => {
            let missing = missing.as_deref().map(cli::parse_phase_list).transpose()?;
            print(&cli::cmd_synthesize(&run, &case, missing.as_ref(), &out)?)
        }
        Command::Classify { run, case } => print(&cli::cmd_classify(&run, &case)?),
        Command::Evaluate { data, runs, out } => {
            let data = required(data, &cfg.paths.data_dir, "data")?;
            let cmp = cli::cmd_evaluate(&runs, &data, &out, args.threads)?;
            print(&cmp.p_values)?;
            eprint!("{}", cmp.table(&mpct::volumes::SUBTYPE_NAMES));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::json!({ "error": e.category(), "message": e.to_string() });
            eprintln!("{msg}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
