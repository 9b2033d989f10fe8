use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use arz_core::commands::{cmd_kernels, cmd_simulate, cmd_steady, cmd_verify, CommandError, Overrides};
use arz_core::config::{LoopSetting, ModelSetting, RunConfig};

#[derive(Parser)]
#[command(name = "arz", version, about = "ARZ freeway simulator with backstepping ramp metering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Steady states, delays and the boundary dissipativity check.
    Steady(Common),
    /// Solve the kernel equations and write kernel tables.
    Kernels(Common),
    /// Run a simulation and write state and norm histories.
    Simulate(Common),
    /// Run the acceptance suite.
    Verify(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration; defaults are used when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Kernel resolution and simulation cell count.
    #[arg(long, value_name = "N")]
    resolution: Option<usize>,
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
    #[arg(long = "loop", value_enum)]
    loop_mode: Option<LoopArg>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LoopArg {
    Open,
    Closed,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Linear,
    Nonlinear,
}

impl Common {
    fn load(&self) -> Result<RunConfig, CommandError> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        Overrides {
            out: self.out.clone(),
            resolution: self.resolution,
            seed: self.seed,
            loop_mode: self.loop_mode.map(|l| match l {
                LoopArg::Open => LoopSetting::Open,
                LoopArg::Closed => LoopSetting::Closed,
            }),
            model: self.model.map(|m| match m {
                ModelArg::Linear => ModelSetting::Linear,
                ModelArg::Nonlinear => ModelSetting::Nonlinear,
            }),
        }
        .apply(&mut config);
        Ok(config)
    }
}

fn execute(command: Command) -> Result<(), CommandError> {
    match command {
        Command::Steady(c) => {
            let config = c.load()?;
            println!("{}", cmd_steady(&config.resolve()?, &config.run.out)?);
        }
        Command::Kernels(c) => {
            let config = c.load()?;
            print!("{}", cmd_kernels(&config.resolve()?, &config.run.out)?);
        }
        Command::Simulate(c) => {
            let config = c.load()?;
            println!("{}", cmd_simulate(&config.resolve()?, &config.run.out)?);
        }
        Command::Verify(c) => {
            let config = c.load()?;
            let mut failed = 0;
            for r in cmd_verify(&config, &config.run.out)? {
                println!("{r}");
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                return Err(CommandError::Failed(format!("{failed} acceptance criteria failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
