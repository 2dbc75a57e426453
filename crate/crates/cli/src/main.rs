use std::process::ExitCode;

use clap::Parser;
use tenslora_cli::{run, Cli};
use tenslora_core::parallel::init_global_threads;

fn main() -> ExitCode {
    if let Ok(v) = std::env::var("TENSLORA_THREADS") {
        match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => {
                init_global_threads(n);
            }
            _ => {
                eprintln!("error: TENSLORA_THREADS must be a positive integer, got '{v}'");
                return ExitCode::from(1);
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
