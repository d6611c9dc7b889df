use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use hdu_cli::{exit_code, run, ExperimentPlan, Format, Manifest, EXIT_VALIDATION};
use hdu_core::Error;

/// Run a high-dimensional U-statistic experiment from a JSON plan.
#[derive(Parser, Debug)]
#[command(name = "hdu", version)]
struct Args {
    /// Plan file (command, scenario config, grid, options).
    #[arg(long, conflicts_with = "replay")]
    config: Option<PathBuf>,

    /// Re-run the plan recorded in a manifest.
    #[arg(long)]
    replay: Option<PathBuf>,

    /// Output directory; overrides `output_dir` in the plan.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,

    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the output format.
    #[arg(long, value_enum)]
    format: Option<Format>,
}

fn load(args: &Args) -> Result<ExperimentPlan, Error> {
    let mut plan = match (&args.config, &args.replay) {
        (Some(c), None) => ExperimentPlan::from_json(&std::fs::read_to_string(c)?)?,
        (None, Some(m)) => Manifest::load(m)?.plan,
        _ => return Err(Error::Usage("give exactly one of --config or --replay".into())),
    };
    if let Some(s) = args.seed {
        plan.config.seed = s;
    }
    if let Some(f) = args.format {
        plan.format = f;
    }
    if let Some(o) = &args.out {
        plan.output_dir = Some(o.clone());
    }
    Ok(plan)
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_VALIDATION as u8 } else { 0 });
        }
    };
    let threads = args.threads.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: could not start worker pool: {e}");
        return ExitCode::from(EXIT_VALIDATION as u8);
    }
    let plan = match load(&args) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e) as u8);
        }
    };
    let Some(out) = plan.output_dir.clone() else {
        eprintln!("error: no output directory (use --out or output_dir)");
        return ExitCode::from(EXIT_VALIDATION as u8);
    };
    match run(&plan, &out, threads) {
        Ok(outcome) => {
            for p in &outcome.manifest.points {
                for w in &p.warnings {
                    eprintln!("{}: warning: {w}", p.label);
                }
                match &p.error {
                    Some(e) => eprintln!("{}: {} ({e})", p.label, p.status),
                    None => println!("{}: {}", p.label, p.files.join(", ")),
                }
            }
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
