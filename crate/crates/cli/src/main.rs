use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use phri_cli::commands::{
    cmd_compare, cmd_eval, cmd_generate, cmd_iterate, cmd_serve, cmd_train, cmd_transfer, dataset_dir, iterate_dir,
};
use phri_cli::{CliError, Profile, RunConfig};
use phri_core::pipeline::{TransferContext, reports_csv};

#[derive(Parser)]
#[command(
    name = "phri",
    version,
    about = "Intent prediction and game-theoretic assistance for physical HRI"
)]
struct Cli {
    /// TOML file layered over the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// desk or paper; overrides the profile named in the config file.
    #[arg(long, global = true)]
    profile: Option<Profile>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record the initial dataset without a predictor.
    Generate,
    /// Train a fresh model on a dataset directory.
    Train {
        /// Defaults to the dataset written by `generate`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the collect-train loop and report every iteration.
    Iterate,
    /// Fine-tune the head of a model in a new context.
    Transfer {
        #[arg(long)]
        model: PathBuf,
        /// new_trajectory, new_user, or object.
        #[arg(long)]
        context: TransferContext,
    },
    /// Closed-loop evaluation of a model on the held-out jobs.
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
    /// Interaction force under MG, IMP, and (with a model) GT.
    Compare {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Serve live sessions over WebSocket until interrupted.
    Serve {
        #[arg(long)]
        addr: Option<String>,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), cli.profile)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = config(&cli)?;
    match cli.command {
        Command::Generate => {
            let s = cmd_generate(&cfg)?;
            println!("{} episodes written to {}", s.episodes, s.dir.display());
        }
        Command::Train { data } => {
            let data = data.unwrap_or_else(|| dataset_dir(&cfg));
            let s = cmd_train(&cfg, &data)?;
            println!("model written to {}", s.model_path.display());
            print!("{}", reports_csv([&s.report]));
        }
        Command::Iterate => {
            let result = cmd_iterate(&cfg)?;
            println!(
                "{} models written to {} ({})",
                result.iterations.len(),
                iterate_dir(&cfg).display(),
                if result.converged {
                    "converged"
                } else {
                    "iteration cap reached"
                }
            );
            print!("{}", reports_csv(result.reports()));
        }
        Command::Transfer { model, context } => {
            let r = cmd_transfer(&cfg, &model, context)?;
            println!(
                "{}: e_rms {:.4} mm -> {:.4} mm ({:+.1}%), {} of {} parameters trained in {:.2} s",
                r.model.version_tag,
                r.pre.longest().e_rms * 1e3,
                r.post.longest().e_rms * 1e3,
                -100.0 * r.improvement(),
                r.trainable_parameters,
                r.total_parameters,
                r.seconds
            );
            print!("{}", r.csv());
        }
        Command::Eval { model } => {
            let r = cmd_eval(&cfg, &model)?;
            print!("{}", reports_csv([&r]));
        }
        Command::Compare { model } => {
            let r = cmd_compare(&cfg, model.as_deref())?;
            print!("{}", r.csv());
        }
        Command::Serve { addr } => {
            let addr = addr.unwrap_or_else(|| cfg.serve.address.clone());
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::io(std::path::Path::new("runtime"), e))?;
            rt.block_on(cmd_serve(&cfg, &addr))?;
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(tracing::Level::INFO)
        .with_target(false)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
