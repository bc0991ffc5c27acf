use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use ep_bench::{run, BenchError, RunOptions, RunOutput, Scenario, TraceSel};

/// Run an ep-proxy scenario file and print its report.
///
/// Exit status: 0 on success, 2 for an invalid scenario, 3 when an audit or
/// oracle check fails, 1 for I/O errors.
#[derive(Debug, Parser)]
#[command(name = "ep-bench", version)]
struct Args {
    /// Scenario TOML file.
    scenario: PathBuf,

    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Write report.txt, metrics.txt and any requested traces here.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Traces to write into the output directory.
    #[arg(long, value_enum, default_value_t = TraceSel::None)]
    trace: TraceSel,
}

fn write_out(dir: &Path, out: &RunOutput, trace: TraceSel) -> Result<(), BenchError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.txt"), &out.report)?;
    fs::write(dir.join("metrics.txt"), &out.metrics)?;
    if matches!(trace, TraceSel::Events | TraceSel::All) {
        fs::write(dir.join("events.txt"), &out.events)?;
    }
    if matches!(trace, TraceSel::Effects | TraceSel::All) {
        fs::write(dir.join("effects.txt"), &out.effects)?;
    }
    Ok(())
}

fn main_inner(args: &Args) -> Result<(), BenchError> {
    let scenario = Scenario::load(&args.scenario)?;
    let opts = RunOptions { seed: args.seed, trace: args.trace };
    let out = run(&scenario, &opts)?;
    print!("{}", out.report);
    if let Some(dir) = &args.out {
        write_out(dir, &out, args.trace)?;
    }
    if let Some(first) = out.violations.first() {
        let pointer = match (&args.out, args.trace) {
            (Some(dir), TraceSel::None) => {
                format!("metrics in {}; rerun with --trace all for event traces", dir.display())
            }
            (Some(dir), _) => format!("traces in {}", dir.display()),
            (None, _) => "rerun with --out DIR --trace all to capture traces".to_string(),
        };
        return Err(BenchError::Invariant(format!(
            "{} violation(s); first: {first} ({pointer})",
            out.violations.len()
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match main_inner(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ep-bench: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
