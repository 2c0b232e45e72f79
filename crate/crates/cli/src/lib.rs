//! Command-line front end for the `dcmamber` forecaster: run configuration,
//! published presets and the subcommands.

pub mod args;
pub mod bench;
pub mod commands;
pub mod config;
pub mod error;
pub mod presets;
pub mod published;

use dcmamber::model::Variant;

pub use args::{Cli, Command, Common};
pub use error::{CliError, Result};

/// Runs one command, printing its report to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let outcome = commands::train(&cfg)?;
            println!("{}", outcome.summary());
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let ckpt = dcmamber::model::load_checkpoint(&checkpoint)?;
            let mut cfg = common.resolve_over(config::checkpoint_data_entries(&ckpt.meta, &checkpoint))?;
            if let Some(s) = split {
                cfg.eval_split = s.parse()?;
            }
            print!("{}", commands::eval(&cfg, &checkpoint)?.report());
        }
        Command::Predict {
            checkpoint,
            input,
            output,
        } => {
            let f = commands::predict(&checkpoint, &input, &output)?;
            println!("wrote {} rows to {}", f.len(), output.display());
        }
        Command::Gradcheck { seed } => {
            let mut failed = Vec::new();
            for (name, report) in commands::gradcheck(seed)? {
                println!("[{name}]\n{report}");
                if !report.passed() {
                    failed.push(name);
                }
            }
            if !failed.is_empty() {
                return Err(CliError::CheckFailed(format!("gradient check failed: {}", failed.join(", "))));
            }
        }
        Command::BenchScan { lengths, repeats, out } => {
            if lengths.is_empty() || lengths.contains(&0) {
                return Err(CliError::usage("lengths must be positive"));
            }
            let settings = bench::BenchSettings {
                repeats,
                ..Default::default()
            };
            let csv = bench::bench_csv(&bench::bench_scan(&lengths, &settings)?);
            print!("{csv}");
            if let Some(path) = out {
                std::fs::write(&path, csv).map_err(|e| CliError::write(path, e))?;
            }
        }
        Command::Ablate { common, variants } => {
            let cfg = common.resolve()?;
            let variants: Vec<Variant> = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants
                    .iter()
                    .map(|v| v.parse())
                    .collect::<dcmamber::Result<_>>()?
            };
            let rows = commands::ablate(&cfg, &variants)?;
            print!("{}", commands::ablation_table(&rows));
            if commands::full_is_worst(&rows) {
                return Err(CliError::CheckFailed("full model has the highest error of all variants".into()));
            }
        }
    }
    Ok(())
}

/// Caps the worker pool when `DCM_THREADS` is set.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("DCM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("DCM_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(format!("DCM_THREADS: {e}")))
}
