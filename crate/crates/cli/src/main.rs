use std::process::ExitCode;

use clap::Parser;
use specden_cli::{init_logging, run, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        // help and version exit 0, usage errors exit 2
        Err(e) => e.exit(),
    };
    init_logging(&cli.log_level);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("event=failed error=\"{e}\"");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
