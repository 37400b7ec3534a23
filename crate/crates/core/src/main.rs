use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use fracch::cli;

/// Batch runner for time-fractional Cahn–Hilliard simulations and sensitivity studies.
#[derive(Debug, Parser)]
#[command(name = "fracch", version)]
struct Args {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Dotted `key=value` applied after the config file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory, replacing `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Only print errors.
    #[arg(long)]
    quiet: bool,
}

fn fail(code: &str, exit: u8, message: &str) -> ExitCode {
    let line = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error[{code}]: {line}");
    ExitCode::from(exit)
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            return fail("E_CONFIG", 2, &first);
        }
    };
    let level = if args.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = cli::parse_config(&args.config, &args.overrides).and_then(|cfg| cli::execute(&cfg, args.out.as_deref()));
    match result {
        Ok(report) => {
            if !args.quiet {
                println!("{}", report.summary);
                println!("wrote {} files to {}", report.artifacts.len(), report.output_dir.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.code(), e.exit_code() as u8, &e.to_string()),
    }
}
