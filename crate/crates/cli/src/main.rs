use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pier_core::driver::WorkerMode;
use pier_core::harness::{self, Settings, EXIT_OK, EXIT_THRESHOLD};
use pier_core::Result;

#[derive(Parser)]
#[command(name = "pier", version, about = "Two-level data-parallel training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train(Common),
    /// Train several modes on the same data and compare their curves.
    Compare(Common),
    /// Project runtimes on a hardware preset with the cost model.
    Project(Common),
    /// Check analytic gradients against finite differences.
    Gradcheck(Common),
}

#[derive(Copy, Clone, ValueEnum)]
enum Workers {
    Seq,
    Par,
}

#[derive(Args)]
struct Common {
    /// TOML file with run settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a setting, e.g. `--set sync_interval=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    workers_mode: Option<Workers>,
}

impl Common {
    fn settings(&self) -> Result<Settings> {
        let mut s = harness::load_config(self.config.as_deref(), &self.overrides)?;
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        if let Some(w) = self.workers_mode {
            s.workers = match w {
                Workers::Seq => WorkerMode::Sequential,
                Workers::Par => WorkerMode::Concurrent,
            };
        }
        Ok(s)
    }
}

fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train(c) => {
            let res = harness::cmd_train(&c.settings()?, &c.out)?;
            let s = &res.summary;
            println!(
                "{} seed {}: val {:.4} -> {:.4} in {} iterations ({:.1}s)",
                s.mode.name(),
                s.seed,
                s.initial_val_loss,
                s.final_val_loss,
                s.stats.iterations,
                res.wall_seconds
            );
            println!("params {} -> {}", s.params_digest, c.out.display());
        }
        Command::Compare(c) => {
            let report = harness::cmd_compare(&c.settings()?, &c.out)?;
            print!("{}", harness::format_compare(&report));
        }
        Command::Project(c) => {
            let rows = harness::cmd_project(&c.settings()?, &c.out)?;
            print!("{}", harness::format_projection(&rows));
        }
        Command::Gradcheck(c) => {
            let report = harness::cmd_gradcheck(&c.settings()?, &c.out)?;
            println!(
                "max relative error {:.3e} over {} coordinates (threshold {:.0e})",
                report.max_rel_error, report.coords, report.threshold
            );
            if !report.passed {
                eprintln!("gradient check failed");
                return Ok(EXIT_THRESHOLD);
            }
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let code = match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            harness::exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
