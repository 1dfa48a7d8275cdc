use clap::Parser;

use flexlog_cli::config::Cli;
use flexlog_cli::{commands, init_thread_pool, CliError};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_thread_pool().map_err(CliError::from).and_then(|_| commands::run(cli.command));
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(e.exit_code());
    }
}
