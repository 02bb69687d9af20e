mod args;
mod commands;
mod config;

use clap::Parser;

use args::{Cli, Command};

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let outcome = match &cli.command {
        Command::Fit(a) => commands::cmd_fit(a),
        Command::Infer(a) => commands::cmd_infer(a),
        Command::Tune(a) => commands::cmd_tune(a),
        Command::Rcv(a) => commands::cmd_rcv(a),
        Command::Simulate(a) => commands::cmd_simulate(a),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}
