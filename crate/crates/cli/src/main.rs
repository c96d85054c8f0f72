use std::process::ExitCode;

use clap::Parser;
use geoadam::verify::VerifyOptions;
use geoadam_cli::args::{Cli, Command};
use geoadam_cli::commands::{cmd_compare, cmd_train, cmd_verify};

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Train(args) => {
            let config = args.resolve()?;
            let summary = cmd_train(&config)?;
            if let Some(last) = summary.history.last() {
                println!(
                    "epoch {}: mean train loss {:.6}, max orth drift {:.3e}",
                    last.epoch, last.mean_train_loss, last.max_orth_drift
                );
            }
            if let Some(e) = summary.evaluation {
                println!("held-out: mean loss {:.6}, accuracy {:.4}", e.mean_loss, e.accuracy);
            }
            println!(
                "optimizer time {:.3}s; artifacts in {}",
                summary.total_update_seconds,
                summary.output_dir.display()
            );
            Ok(true)
        }
        Command::Compare(args) => {
            let config = args.resolve()?;
            let summary = cmd_compare(&config)?;
            println!("{:<18} {:>14} {:>14}", "scenario", "final loss", "update secs");
            for (label, run) in &summary.runs {
                let last = run.history.last().map_or(f64::NAN, |r| r.mean_train_loss);
                println!("{label:<18} {last:>14.6} {:>14.3}", run.total_update_seconds);
            }
            println!("curves in {}", summary.csv_path.display());
            Ok(true)
        }
        Command::Verify(args) => {
            let options = VerifyOptions {
                seed: args.seed,
                reskew: !args.disable_reskew,
            };
            let results = cmd_verify(args.precision, &options);
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.passed()).count();
            println!(
                "{} precision: {} of {} checks passed",
                args.precision,
                results.len() - failed,
                results.len()
            );
            Ok(failed == 0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
