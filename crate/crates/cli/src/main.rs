use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use tofu_core::config::{load_config, RunMode};
use tofu_core::runner;

/// Run a federated or attack experiment from a config file.
#[derive(Debug, Parser)]
#[command(name = "tofu", version)]
struct Args {
    /// Flat TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// train, fedavg, tofu or attack; overrides the config's `mode`.
    #[arg(long)]
    mode: Option<RunMode>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<tofu_core::Error>().map_or(1, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}

fn run(args: &Args) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.config).map_err(tofu_core::Error::from)?;
    if let Some(seed) = args.seed {
        // a model seed that merely followed the old seed follows the new one
        if cfg.model_seed == Some(cfg.seed) {
            cfg.model_seed = Some(seed);
        }
        cfg.seed = seed;
    }
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    let out = runner::run(&cfg, &args.out)?;
    let dir = out.out_dir.display();
    match (&out.attack, out.records.last()) {
        (Some(a), _) => println!(
            "attack: raw cosine {:.6}, payload cosine {:.6}, nearest-datum mse ratio {:.3e} ({dir})",
            a.raw.final_cosine, a.tofu.final_cosine, a.mse_ratio
        ),
        (None, Some(last)) => println!(
            "{} rounds, final accuracy {:.4}, {} scalars sent ({dir})",
            out.records.len(),
            last.accuracy,
            last.cumulative_scalars
        ),
        (None, None) => {}
    }
    if !out.events.is_empty() {
        println!("{} events logged", out.events.len());
    }
    Ok(())
}
