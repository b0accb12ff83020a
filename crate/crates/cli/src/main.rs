use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use lbq_cli::config::load_config;
use lbq_cli::stages::{run_command, Command};

#[derive(Parser)]
#[command(name = "lbq", about = "Train, pack and evaluate a W(1+1)A4 quantized toy transformer")]
struct Args {
    #[arg(value_enum)]
    command: Command,
    #[arg(long)]
    config: PathBuf,
    /// `section.key=value`, repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let env_seed = std::env::var("LBQ_SEED").ok();
    let result = load_config(&args.config, &args.overrides, env_seed.as_deref())
        .and_then(|cfg| run_command(args.command, &cfg));
    match result {
        Ok(outcome) if outcome.diverged => {
            eprintln!("{}: joint training diverged", args.command.name());
            ExitCode::from(4)
        }
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
