use std::env;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nmbe_core::bench::{self, ExperimentConfig, SWEEP_FILE};
use nmbe_core::Error;

/// Near-field mmWave beam prediction experiments.
#[derive(Parser)]
#[command(name = "nmbe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset into `<out>/dataset`.
    GenDataset(Common),
    /// Train the configured learned schemes on `<out>/dataset`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoints in `<out>/checkpoints`.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate every scheme along the configured sweep axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Regenerate the dataset and retrain at every sweep point.
        #[arg(long)]
        retrain_per_point: bool,
    },
    /// Merge sweep CSVs into plot data and a markdown summary.
    Report {
        #[command(flatten)]
        common: Common,
        /// Sweep CSVs to merge (one per seed); defaults to `<out>/sweep.csv`.
        inputs: Vec<PathBuf>,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Usage(_) | Error::Geometry(_) | Error::OverheadExceedsSession { .. } => 2,
        Error::MissingArtifact(_) => 3,
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 3,
        _ => 4,
    }
}

fn setup(common: &Common) -> Result<(ExperimentConfig, PathBuf), Error> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    cfg.output_dir = out.clone();
    Ok((cfg, out))
}

fn init_threads() -> Result<(), Error> {
    let Ok(raw) = env::var("NMBE_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("NMBE_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Error> {
    init_threads()?;
    match cli.command {
        Command::GenDataset(common) => {
            let (cfg, out) = setup(&common)?;
            let s = bench::gen_dataset(&cfg, &out)?;
            println!(
                "wrote {} samples ({} train, {} validation) to {}",
                s.samples,
                s.train,
                s.validation,
                out.join(bench::DATASET_DIR).display()
            );
            println!("label entropy {:.3} bits", s.label_entropy_bits);
            println!("manifest sha256 {}", s.manifest_hash);
        }
        Command::Train { common, resume } => {
            let (cfg, out) = setup(&common)?;
            let run = bench::train(&cfg, &out, resume)?;
            for (scheme, rows) in &run.histories {
                if let Some(last) = rows.last() {
                    println!(
                        "{}: {} epochs, validation A_cc {:.4} (angle {:.4}, distance {:.4}) -> {}",
                        scheme.name(),
                        rows.len(),
                        last.val_acc_overall,
                        last.val_acc_a,
                        last.val_acc_d,
                        bench::history_path(&out, *scheme).display()
                    );
                }
            }
            if !cfg.schemes.iter().any(|s| s.is_learned()) {
                println!("no learned schemes configured; nothing to train");
            }
        }
        Command::Sweep { common, retrain_per_point } => {
            let (cfg, out) = setup(&common)?;
            let rows = bench::sweep(&cfg, &out, retrain_per_point)?;
            for row in &rows {
                let r = &row.report;
                println!(
                    "{} {:>8} {:<10} A_cc {:.4} R_sum {:.3} R_eff {:.3}",
                    cfg.sweep.axis.name(),
                    row.axis_value,
                    r.scheme,
                    r.accuracy,
                    r.sum_rate,
                    r.effective_rate
                );
            }
            println!("wrote {}", out.join(SWEEP_FILE).display());
        }
        Command::Report { common, inputs } => {
            let (_, out) = setup(&common)?;
            let inputs = if inputs.is_empty() { vec![out.join(SWEEP_FILE)] } else { inputs };
            let merged = bench::report(&inputs, &out)?;
            for c in merged.checks() {
                println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            println!("wrote {}", out.join(bench::REPORT_FILE).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nmbe: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
