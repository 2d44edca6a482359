use std::process::ExitCode;

use clap::Parser;
use flatstart::cli::{run, Cli, SKIPPED_FILE};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            print!("{}", outcome.message);
            if outcome.skipped.is_empty() {
                ExitCode::SUCCESS
            } else {
                eprintln!(
                    "{} utterances failed and were left out (see {SKIPPED_FILE} or the log)",
                    outcome.skipped.len()
                );
                ExitCode::from(3)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
