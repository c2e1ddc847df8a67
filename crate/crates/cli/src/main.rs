use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use thingtwin_cli::{load_config, run_pipeline, run_stage, serve, OrchestratorError, Stage};

#[derive(Parser)]
#[command(name = "thingtwin", version, about = "Digital-twin heating pipeline")]
struct Cli {
    /// JSON pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set dqn.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the manual thermostat on the plant and write sensor and presence CSVs.
    Generate,
    /// Fit all thermal models and the occupancy twin; keep the best thermal twin.
    Fit,
    /// Train the DQN agent inside the twin-built environment.
    Train,
    /// Evaluate the agent, the thermostat and the ideal bound on the plant.
    Eval,
    /// Serve the thing directory and the bridge over HTTP.
    Serve,
    /// generate, fit, train and eval, then write the run manifest.
    Pipeline,
    /// Print the effective configuration.
    ShowConfig,
}

fn run(cli: Cli) -> Result<(), OrchestratorError> {
    let cfg = load_config(cli.config.as_deref(), &cli.set).map_err(OrchestratorError::Config)?;
    let stage = match cli.command {
        Command::Generate => Stage::Generate,
        Command::Fit => Stage::Fit,
        Command::Train => Stage::Train,
        Command::Eval => Stage::Eval,
        Command::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
            return Ok(());
        }
        Command::Pipeline => {
            let manifest = run_pipeline(&cfg)?;
            for s in &manifest.stages {
                println!("{:<9} {:>8.2}s", s.stage.as_str(), s.seconds);
            }
            println!("manifest: {}", thingtwin_cli::manifest_path(&cfg).display());
            return Ok(());
        }
        Command::Serve => {
            let rt = tokio::runtime::Runtime::new().map_err(|e| OrchestratorError::Stage {
                stage: Stage::Serve,
                message: e.to_string(),
            })?;
            return rt.block_on(serve(&cfg, async {
                let _ = tokio::signal::ctrl_c().await;
            }));
        }
    };
    for path in run_stage(stage, &cfg)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
