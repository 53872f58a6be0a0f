mod args;
mod commands;
mod config;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::{CommandFactory, Parser};

use args::{Cli, Command};
use config::ConfigError;

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;

fn clap_exit(e: clap::Error) -> ExitCode {
    let _ = e.print();
    ExitCode::from(e.exit_code() as u8)
}

/// Parses `argv`. With `--config`, a lenient first pass finds the flags
/// given on the command line and the config values for the rest are appended
/// before the strict parse.
fn parse(argv: Vec<OsString>) -> Result<Cli, ExitCode> {
    let cmd = Cli::command();
    let lenient = cmd.clone().ignore_errors(true).try_get_matches_from(&argv);
    let config_path = lenient
        .as_ref()
        .ok()
        .and_then(|m| m.get_one::<std::path::PathBuf>("config").cloned());
    let (Some(path), Ok(matches)) = (config_path, lenient) else {
        return Cli::try_parse_from(argv).map_err(clap_exit);
    };
    if matches.subcommand().is_none() {
        return Cli::try_parse_from(argv).map_err(clap_exit);
    }
    let extra = config::config_args(&path, &cmd, &matches).map_err(|e| match e {
        ConfigError::Read(msg) => {
            eprintln!("error: config {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
        ConfigError::Usage(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
    })?;
    Cli::try_parse_from(argv.into_iter().chain(extra)).map_err(clap_exit)
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
    })
}

fn main() -> ExitCode {
    let cli = match parse(std::env::args_os().collect()) {
        Ok(cli) => cli,
        Err(code) => return code,
    };

    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();

    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads as usize)
        .build_global()
    {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(EXIT_RUNTIME);
    }

    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a, cli.seed),
        Command::Weaklabel(a) => commands::weaklabel(a),
        Command::Train(a) => commands::train(a, cli.seed),
        Command::Score(a) => commands::score(a),
        Command::Eval(a) => commands::eval(a),
        Command::Experiment(a) => commands::experiment(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
