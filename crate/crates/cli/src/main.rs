mod args;
mod commands;
mod report;

use clap::Parser;

use args::{Cli, Command};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        bracket_att::par::configure_threads(n);
    }
    let result = match &cli.command {
        Command::Estimate(a) => commands::estimate(a),
        Command::Diagnose(a) => commands::diagnose(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Adapt(a) => commands::adapt(a),
    };
    if let Err(f) = result {
        eprintln!("error: {f}");
        std::process::exit(f.class.exit_code());
    }
}
