use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mpq_harness::checkpoint::Checkpoint;
use mpq_harness::size::{compression_ratio, SizeReport, BYTES_PER_MB};
use mpq_harness::{ExperimentConfig, HarnessError, Pipeline, Stage};

#[derive(Parser)]
#[command(
    name = "mpq",
    version,
    about = "Low-rank architecture search and mixed-precision quantization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Reuse completed stages whose config fingerprint matches.
    #[arg(long, global = true)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-precision network.
    Train,
    /// Search bottleneck dimensions and retrain the selection.
    SearchArch,
    /// Quantize offline at the allocated bit-widths.
    Quantize,
    /// Compute KL and curvature sensitivity tables.
    Sensitivity,
    /// Choose per-layer bit-widths.
    Allocate,
    /// Quantized fine-tuning.
    Finetune,
    /// Run every stage and write the checkpoint and report.
    Pipeline,
    /// Rewrite the report from completed stages.
    Report,
    /// Print the layers and sizes of a checkpoint.
    InspectCkpt { path: PathBuf },
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    if let Command::InspectCkpt { path } = &cli.command {
        return inspect(path);
    }
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| HarnessError::config("--config is required"))?;
    let cfg = ExperimentConfig::load(path)?.with_overrides(cli.seed, cli.out.clone());
    let (until, resume) = match cli.command {
        Command::Train => (Stage::Train, cli.resume),
        Command::SearchArch => (Stage::Retrain, cli.resume),
        Command::Sensitivity => (Stage::Sensitivity, cli.resume),
        Command::Allocate => (Stage::Allocate, cli.resume),
        Command::Quantize => (Stage::Quantize, cli.resume),
        Command::Finetune => (Stage::Finetune, cli.resume),
        Command::Pipeline => (Stage::Report, cli.resume),
        Command::Report => (Stage::Report, true),
        Command::InspectCkpt { .. } => unreachable!(),
    };
    let pipeline = Pipeline::new(cfg, resume)?;
    let out = pipeline.out_dir().to_path_buf();
    let log = mpq_core::par::with_jobs(cli.jobs, move || pipeline.run(until))?;
    for s in &log.reused {
        eprintln!("{}: reused", s.name());
    }
    for s in &log.computed {
        eprintln!("{}: done", s.name());
    }
    println!("{}", out.display());
    Ok(())
}

fn inspect(path: &Path) -> Result<(), HarnessError> {
    let ckpt = Checkpoint::read(path)?;
    let size = SizeReport::from_checkpoint(&ckpt)?;
    println!("layers: {}", ckpt.layers.len());
    println!("layer  out   in    r  bits  alpha         params  bytes");
    for (l, (rec, s)) in ckpt.layers.iter().zip(&size.layers).enumerate() {
        println!(
            "{l:>5} {:>4} {:>4} {:>4} {:>5}  {:<12.6e} {:>7} {:>6}",
            rec.out_dim,
            rec.in_dim,
            rec.bottleneck,
            rec.bits,
            rec.alpha,
            s.params,
            s.bytes()
        );
    }
    println!("file bytes: {}", ckpt.encoded_len());
    if let Some(w) = &ckpt.shadow {
        println!("shadow weights: {}", w.len());
    }
    println!(
        "average bits: {:.3} weighted, {:.3} unweighted",
        size.avg_bits_weighted, size.avg_bits_unweighted
    );
    println!(
        "full precision: {} bytes ({:.4} MB)",
        size.full_precision_bytes,
        size.full_precision_bytes as f64 / BYTES_PER_MB
    );
    if size.full_precision_bytes > 0 {
        let ratio = compression_ratio(size.full_precision_bytes as f64, size.total_bytes as f64)?;
        println!("compression ratio: {ratio:.1}");
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
