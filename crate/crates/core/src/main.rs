use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use massdrift::cli::{run, schema_json, verify, CliError, ExperimentConfig, Suite};

#[derive(Parser)]
#[command(name = "massdrift", version, about = "Escape-of-mass experiments for random walks on group actions")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        n_steps: Option<usize>,
    },
    /// Run a built-in verification suite and print its summary.
    Verify {
        #[arg(value_parser = clap::builder::ValueParser::new(|s: &str| s.parse::<Suite>()))]
        suite: Suite,
    },
    /// Print the JSON schema of experiment configs.
    Schema,
}

fn report_error(e: &CliError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code())
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(args) => args,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match args.command {
        Command::Run {
            config,
            seed,
            out,
            n_steps,
        } => {
            let mut cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return report_error(&e),
            };
            cfg.apply_overrides(seed, out, n_steps);
            match run(&cfg) {
                Ok(outcome) => {
                    for v in &outcome.summary.verdicts {
                        let status = if v.passed { "ok" } else { "FAILED" };
                        println!("{}: {} (value {:e}, bound {:e})", v.check, status, v.value, v.tolerance);
                    }
                    for path in &outcome.files {
                        println!("wrote {}", path.display());
                    }
                    ExitCode::from(outcome.exit_code())
                }
                Err(e) => report_error(&e),
            }
        }
        Command::Verify { suite } => match verify(suite) {
            Ok(summary) => {
                println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
                ExitCode::from(if summary.passed() { 0 } else { 2 })
            }
            Err(e) => report_error(&e),
        },
        Command::Schema => {
            println!("{}", schema_json());
            ExitCode::SUCCESS
        }
    }
}
