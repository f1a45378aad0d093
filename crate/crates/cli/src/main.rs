use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pntk::{Error, Result};
use pntk_cli::commands;
use pntk_cli::{Artifacts, ExperimentConfig};

#[derive(Parser)]
#[command(name = "pntk", version, about = "Empirical NTK and pseudo-NTK experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; defaults to `<output.dir>/<command>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for kernel assembly.
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build and persist eNTK/pNTK Grams at each checkpoint.
    Kernel(Common),
    /// Width sweep of kernel metrics with log-log slope fits.
    Sweep(Common),
    /// Kernel regression with both kernels; prediction diff and accuracy.
    Regress(Common),
    /// Paired eNTK vs pNTK Gram timing.
    Bench(Common),
    /// Pool-based look-ahead active learning.
    Active(Common),
    /// Train a network and save checkpoints.
    Train(Common),
    /// Memory and JVP counts for N points and O outputs.
    Estimate {
        n: u64,
        o: u64,
        #[arg(default_value_t = 8)]
        bytes: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn setup(name: &str, c: &Common) -> Result<(ExperimentConfig, Artifacts)> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.override_seed(seed);
    }
    if let Some(w) = c.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("--workers: {e}")))?;
    }
    let dir = c.out.clone().unwrap_or_else(|| cfg.output.dir.join(name));
    let mut out = Artifacts::create(&dir, name, &cfg)?;
    if let Some(p) = &c.config {
        out.add_input(p)?;
    }
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Estimate { n, o, bytes, out } => {
            let mut sink = match out {
                Some(dir) => Artifacts::create(&dir, "estimate", &ExperimentConfig::default())?,
                None => Artifacts::disabled("estimate"),
            };
            let report = commands::cmd_estimate(n, o, bytes, &mut sink)?;
            print!("{}", report.render());
            sink.finish()?;
        }
        Command::Sweep(c) => {
            let (cfg, mut out) = setup("sweep", &c)?;
            let report = commands::cmd_sweep(&cfg, &mut out)?;
            for f in &report.fits {
                println!(
                    "{} @ epoch {}: slope {:.3} (r2 {:.3}) in band: {}",
                    f.metric, f.epoch, f.slope, f.r2, f.in_band
                );
            }
            finish(out)?;
        }
        Command::Regress(c) => {
            let (cfg, mut out) = setup("regress", &c)?;
            let report = commands::cmd_regress(&cfg, &mut out)?;
            for f in &report.fits {
                println!("{} @ epoch {}: slope {:.3} (r2 {:.3})", f.metric, f.epoch, f.slope, f.r2);
            }
            finish(out)?;
        }
        Command::Kernel(c) => {
            let (cfg, mut out) = setup("kernel", &c)?;
            for k in commands::cmd_kernel(&cfg, &mut out)? {
                println!("{}", k.path.display());
            }
            finish(out)?;
        }
        Command::Bench(c) => {
            let (cfg, mut out) = setup("bench", &c)?;
            for cell in commands::cmd_bench(&cfg, &mut out)?.cells {
                println!(
                    "N={} O={} width={}: entk {:.4}s pntk {:.4}s ratio {:.4}",
                    cell.n, cell.o, cell.width, cell.entk_median, cell.pntk_median, cell.ratio
                );
            }
            finish(out)?;
        }
        Command::Active(c) => {
            let (cfg, mut out) = setup("active", &c)?;
            for t in commands::cmd_active(&cfg, &mut out)?.traces {
                println!(
                    "{}: final accuracy {:.4}, acquisition {:.3}s",
                    t.acquisition.label(),
                    t.final_accuracy(),
                    t.total_acq_seconds()
                );
            }
            finish(out)?;
        }
        Command::Train(c) => {
            let (cfg, mut out) = setup("train", &c)?;
            for r in commands::cmd_train(&cfg, &mut out)? {
                println!(
                    "epoch {}: train {:.4} test {:.4}",
                    r.epoch, r.train_accuracy, r.test_accuracy
                );
            }
            finish(out)?;
        }
    }
    Ok(())
}

fn finish(out: Artifacts) -> Result<()> {
    let root = out.root().map(|p| p.display().to_string());
    out.finish()?;
    if let Some(r) = root {
        eprintln!("artifacts: {r}");
    }
    Ok(())
}

fn kind(e: &Error) -> String {
    let dbg = format!("{e:?}");
    dbg.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("Error").to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({"error": {"kind": kind(&e), "message": e.to_string()}});
            eprintln!("{body}");
            match e {
                Error::InvalidConfig(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
