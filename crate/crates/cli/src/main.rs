use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use epsmargin_core::experiment::{self, ExperimentConfig};
use epsmargin_core::oracles::SuiteOptions;
use epsmargin_core::Error;

/// ε-margin contrastive training with FairKL debiasing.
#[derive(Debug, Parser)]
#[command(name = "epsmargin", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct RunArgs {
    /// Config file, or `preset:NAME` for a bundled preset.
    #[arg(long)]
    config: String,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Fault {
    /// Negates the Gaussian KL under test.
    KlSign,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the oracle suite and write oracle_report.csv.
    Verify {
        #[arg(long, default_value = ".")]
        output_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<Fault>,
    },
    /// Write the train and test splits plus a manifest.
    GenData(RunArgs),
    /// Train an encoder and write metrics, histograms and the model.
    Train(RunArgs),
    /// Linear-probe a saved model on the configured data.
    Probe {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Train every point of the config's [sweep] grid and aggregate.
    Sweep(RunArgs),
    /// Histogram a saved model's positive-pair similarities.
    Hist {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "hist.csv")]
        out: PathBuf,
    },
    /// List the bundled presets.
    Presets,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Io(_) | Error::Idx(_) => 3,
        _ => 1,
    }
}

fn load(args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
        cfg.sweep.seeds = vec![seed];
    }
    if let Some(dir) = &args.output_dir {
        cfg.output_dir = dir.clone();
    }
    Ok(cfg)
}

fn negated_kl(mp: f64, vp: f64, mq: f64, vq: f64) -> f64 {
    -epsmargin_core::fairkl::gaussian_kl(mp, vp, mq, vq)
}

fn verify(dir: &Path, seed: u64, fault: Option<Fault>) -> Result<u8, Error> {
    let mut opts = SuiteOptions { seed, ..Default::default() };
    if let Some(Fault::KlSign) = fault {
        opts.kl = negated_kl;
    }
    let reports = experiment::run_verify(&opts, dir)?;
    for r in &reports {
        println!(
            "{} {:<40} trials={:<6} max_abs_err={:.3e} max_rel_err={:.3e}",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.trials,
            r.max_abs_err,
            r.max_rel_err
        );
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    println!("{} oracles, {failed} failed; report in {}", reports.len(), dir.join("oracle_report.csv").display());
    Ok(u8::from(failed > 0))
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Verify {
            output_dir,
            seed,
            inject_fault,
        } => verify(&output_dir, seed, inject_fault),
        Command::GenData(args) => {
            let cfg = load(&args)?;
            for r in experiment::gen_data(&cfg, &cfg.output_dir)? {
                println!(
                    "{}: {} rows, {} features, {} aligned, {} conflicting -> {}",
                    r.split,
                    r.rows,
                    r.features,
                    r.aligned,
                    r.conflicting,
                    cfg.output_dir.join(&r.file).display()
                );
            }
            Ok(0)
        }
        Command::Train(args) => {
            let cfg = load(&args)?;
            let s = experiment::run_train(&cfg, &cfg.output_dir)?;
            let acc = s.accuracy();
            println!(
                "epoch {}: loss={:.6} reg={:.6} acc overall={:.4} aligned={:.4} conflicting={:.4}; artifacts in {}",
                s.final_row.epoch,
                s.final_row.loss,
                s.final_row.reg,
                acc.overall,
                acc.aligned,
                acc.conflicting,
                s.dir.display()
            );
            Ok(0)
        }
        Command::Probe { run, model } => {
            let cfg = load(&run)?;
            let acc = experiment::run_probe(&cfg, &model)?;
            println!("overall={} aligned={} conflicting={}", acc.overall, acc.aligned, acc.conflicting);
            Ok(0)
        }
        Command::Sweep(args) => {
            let cfg = load(&args)?;
            let rows = experiment::run_sweep(&cfg, &cfg.output_dir)?;
            println!("{}", experiment::SWEEP_HEADER);
            for r in &rows {
                println!("{}", r.csv_line());
            }
            let failed: usize = rows.iter().map(|r| r.failed).sum();
            if failed > 0 {
                log::warn!("{failed} run(s) failed; see the FAILED markers under {}", cfg.output_dir.display());
            }
            Ok(0)
        }
        Command::Hist { run, model, out } => {
            let cfg = load(&run)?;
            let h = experiment::run_hist(&cfg, &model, &out)?;
            let (ma, va) = h.aligned_moments();
            let (mc, vc) = h.conflicting_moments();
            println!(
                "{} pairs; aligned mean={ma:.4} var={va:.4}; conflicting mean={mc:.4} var={vc:.4}; KS={:.4} -> {}",
                h.total(),
                h.ks_distance(),
                out.display()
            );
            Ok(0)
        }
        Command::Presets => {
            for name in experiment::presets::names() {
                println!("{name}");
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
