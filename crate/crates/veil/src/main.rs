use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use veil::pipeline::config::{
    apply_overrides, load_ablation_plan, load_run_config, CliOverrides, RunConfig,
};
use veil::pipeline::run::{cmd_ablate, cmd_evaluate, cmd_protect, cmd_sweep};

/// Protect images against generative manipulation by perturbing their
/// denoising trajectory, then measure what the protection achieves.
#[derive(Parser)]
#[command(name = "veil", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration file (ablate takes a plan file).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for image-level parallelism (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Override the config's output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Protect every PNG in the input directory.
    Protect(CommonArgs),
    /// Score protected outputs against their clean inputs.
    Evaluate(CommonArgs),
    /// Robustness curves and an area-under-curve table over the
    /// distortion bank.
    Sweep(CommonArgs),
    /// Run the protect + evaluate pipeline across one ablation axis.
    Ablate(CommonArgs),
}

fn overrides_of(a: &CommonArgs) -> CliOverrides {
    CliOverrides {
        seed: a.seed,
        workers: a.workers,
        out_dir: a.out_dir.clone(),
    }
}

fn load_with_overrides(a: &CommonArgs) -> veil::Result<RunConfig> {
    let mut cfg = load_run_config(&a.config)?;
    apply_overrides(&mut cfg, &overrides_of(a));
    Ok(cfg)
}

fn run(cli: Cli) -> veil::Result<()> {
    match cli.command {
        Command::Protect(a) => {
            let cfg = load_with_overrides(&a)?;
            cmd_protect(&cfg, a.workers)?;
        }
        Command::Evaluate(a) => {
            let cfg = load_with_overrides(&a)?;
            cmd_evaluate(&cfg, a.workers)?;
        }
        Command::Sweep(a) => {
            let cfg = load_with_overrides(&a)?;
            cmd_sweep(&cfg, a.workers)?;
        }
        Command::Ablate(a) => {
            let mut plan = load_ablation_plan(&a.config)?;
            apply_overrides(&mut plan.base, &overrides_of(&a));
            cmd_ablate(&plan, a.workers)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version land here with success status
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code().clamp(0, 255) as u8)
        }
    }
}
