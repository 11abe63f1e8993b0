use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lbgm_core::harness::{self, RawConfig};

#[derive(Parser)]
#[command(
    name = "lbgm",
    about = "Federated learning simulator with look-back gradient recycling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment described by a config file.
    Run {
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// `section.key=value`, repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let Command::Run {
        config,
        seed,
        out,
        overrides,
    } = Cli::parse().command;

    let result = (|| -> lbgm_core::Result<harness::RunReport> {
        let text = std::fs::read_to_string(&config).map_err(|e| lbgm_core::Error::Io {
            path: config.clone(),
            source: e,
        })?;
        let mut raw = RawConfig::parse(&text)?;
        for o in &overrides {
            raw.set_override(o)?;
        }
        if let Some(seed) = seed {
            raw.set_override(&format!("seed={seed}"))?;
        }
        if let Some(out) = &out {
            raw.set_override(&format!("out={}", out.display()))?;
        }
        let cfg = raw.into_config()?;
        log::info!("running {} for {} rounds", cfg.algorithm, cfg.rounds);
        harness::run(&cfg)
    })();

    match result {
        Ok(report) => {
            println!("{}", report.summary);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
