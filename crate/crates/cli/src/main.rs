use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use slam_core::config::Config;
use slam_core::data::{gen_synthetic_corpus, read_synthetic_corpus, write_synthetic_corpus, SyntheticCorpus};
use slam_core::eval::{
    gradcheck_suite, inspect, probe_cross_modal, probe_frame_classifier, probe_stm, CrossModalOptions,
    FrameProbeOptions, ProbeReport, StmProbeOptions, SuiteOptions,
};
use slam_core::trainer::{Checkpoint, MetricsRecord, StageSchedule, TrainData, Trainer};
use slam_core::SlamError;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "slam", version, about = "Joint speech-text encoder pre-training at desk scale")]
struct Cli {
    /// Flat TOML configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded, fully seeded execution (always the case; accepted
    /// for scripts that request it explicitly).
    #[arg(long, global = true)]
    deterministic: bool,
    /// Train every objective from the first step in a single stage.
    #[arg(long, global = true)]
    one_stage: bool,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus described by the configuration.
    Gendata,
    /// Run the pre-training schedule.
    Pretrain {
        /// Corpus directory written by `gendata`; generated in memory if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many updates have been applied in total.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Continue pre-training a checkpoint on speech only.
    Continue {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of every block and the composite model.
    Gradcheck {
        /// Coordinates sampled per parameter tensor.
        #[arg(long, default_value_t = 2)]
        per_param: usize,
        /// Corrupt the backward pass to demonstrate detection.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Evaluate a checkpoint with one of the downstream probes.
    Probe {
        #[arg(value_enum)]
        kind: ProbeKind,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pairs for the STM probe.
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
    },
    /// Print a summary of a checkpoint.
    Inspect { checkpoint: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeKind {
    Stm,
    Crossmodal,
    Frames,
}

impl ProbeKind {
    fn name(self) -> &'static str {
        match self {
            ProbeKind::Stm => "stm",
            ProbeKind::Crossmodal => "crossmodal",
            ProbeKind::Frames => "frames",
        }
    }
}

enum Failure {
    /// A check ran and did not meet its tolerance.
    Tolerance(String),
    Error(SlamError),
}

impl From<SlamError> for Failure {
    fn from(e: SlamError) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Error(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Tolerance(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_FAILURE)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                SlamError::NonFinite(_) => EXIT_FAILURE,
                _ => EXIT_USAGE,
            })
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.one_stage {
        cfg.one_stage = true;
    }
    if cli.deterministic {
        // Kernels never spawn threads and every random draw comes from a
        // seeded stream, so this mode needs no switches.
        log::info!("deterministic mode: single-threaded, seed {}", cfg.seed);
    }
    Ok(cfg)
}

fn load_data(cfg: &Config, dir: Option<&Path>) -> Result<SyntheticCorpus, Failure> {
    Ok(match dir {
        Some(d) => read_synthetic_corpus(d)?.1,
        None => gen_synthetic_corpus(&cfg.synthetic_spec(), cfg.data_seed)?,
    })
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Gendata => {
            std::fs::create_dir_all(&cli.out)?;
            let manifest = write_synthetic_corpus(&cli.out, &cfg.synthetic_spec(), cfg.data_seed)?;
            for (split, n) in &manifest.splits {
                println!("{split:8} {n} examples");
            }
            println!("vocabulary hash {}", manifest.vocab_hash);
            Ok(())
        }
        Command::Pretrain { data, resume, stop_at } => {
            let corpus = load_data(&cfg, data.as_deref())?;
            let mut trainer = match resume {
                Some(path) => Trainer::from_checkpoint(&Checkpoint::load(path)?)?,
                None => Trainer::new(cfg.model_config(), cfg.optimizer(), cfg.train_config(), cfg.seed)?,
            };
            let schedule = cfg.schedule()?;
            train(cli, &mut trainer, &schedule, corpus, *stop_at, resume.is_some(), "pretrained.slam")
        }
        Command::Continue { checkpoint, data } => {
            let corpus = load_data(&cfg, data.as_deref())?;
            let mut trainer = Trainer::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
            trainer.begin_new_schedule();
            let schedule = cfg.continuation_schedule()?;
            train(cli, &mut trainer, &schedule, corpus, None, false, "continued.slam")
        }
        Command::Gradcheck { per_param, inject_fault } => {
            let start = Instant::now();
            let opts = SuiteOptions {
                model: cfg.model_config(),
                per_param: *per_param,
                seed: cfg.seed,
                inject_fault: *inject_fault,
            };
            let reports = gradcheck_suite(&opts)?;
            let mut failed = Vec::new();
            for r in &reports {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!("{:18} max rel err {:.3e} (tol {:.0e}, {} coords) {status}", r.name, r.max_rel_err, r.tolerance, r.checked);
                if !r.passed() {
                    failed.push(r.name.clone());
                }
            }
            println!("{} blocks in {:.1}s", reports.len(), start.elapsed().as_secs_f64());
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Failure::Tolerance(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
        Command::Probe { kind, checkpoint, data, pairs } => {
            let corpus = load_data(&cfg, data.as_deref())?;
            let trainer = Trainer::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
            let (model, store) = (&trainer.model, &trainer.store);
            let report = match kind {
                ProbeKind::Stm => probe_stm(
                    model,
                    store,
                    &corpus.heldout,
                    &StmProbeOptions { pairs: *pairs, seed: cfg.seed, ..StmProbeOptions::default() },
                )?,
                ProbeKind::Crossmodal => probe_cross_modal(
                    model,
                    store,
                    &corpus.heldout,
                    &CrossModalOptions { seed: cfg.seed, ..CrossModalOptions::default() },
                )?,
                ProbeKind::Frames => probe_frame_classifier(
                    model,
                    store,
                    &corpus.paired,
                    &corpus.heldout,
                    &FrameProbeOptions { seed: cfg.seed, ..FrameProbeOptions::default() },
                )?,
            };
            write_report(cli, kind.name(), &report)
        }
        Command::Inspect { checkpoint } => {
            print!("{}", inspect(&Checkpoint::load(checkpoint)?));
            Ok(())
        }
    }
}

fn write_report(cli: &Cli, name: &str, report: &ProbeReport) -> Result<(), Failure> {
    std::fs::create_dir_all(&cli.out)?;
    let path = cli.out.join(format!("probe-{name}.json"));
    report.save(&path)?;
    for (k, v) in &report.metrics {
        println!("{k:28} {v:.4}");
    }
    println!("report written to {}", path.display());
    Ok(())
}

fn train(
    cli: &Cli,
    trainer: &mut Trainer,
    schedule: &StageSchedule,
    corpus: SyntheticCorpus,
    stop_at: Option<u64>,
    append: bool,
    final_name: &str,
) -> Result<(), Failure> {
    std::fs::create_dir_all(&cli.out)?;
    let data = TrainData::from(corpus);
    let metrics_path = cli.out.join("metrics.jsonl");
    let file = if append {
        OpenOptions::new().create(true).append(true).open(&metrics_path)?
    } else {
        File::create(&metrics_path)?
    };
    let mut metrics = BufWriter::new(file);
    let every = trainer.train.checkpoint_every;
    let out = cli.out.clone();
    let start = Instant::now();
    let mut write_record = |t: &Trainer, r: &MetricsRecord| -> slam_core::Result<()> {
        serde_json::to_writer(&mut metrics, r)?;
        metrics.write_all(b"\n")?;
        if r.step % 50 == 0 {
            log::info!(
                "step {} [{}] total {:.4} grad norm {:.3} lr {:.2e} ({:.1}s)",
                r.step,
                r.stage,
                r.losses.total,
                r.grad_norm,
                r.lr,
                start.elapsed().as_secs_f64()
            );
        }
        if every > 0 && r.step % every == 0 {
            metrics.flush()?;
            t.checkpoint().save(&out.join(format!("step-{}.slam", r.step)))?;
        }
        Ok(())
    };
    let result = trainer.run(schedule, &data, stop_at, &mut write_record);
    metrics.flush()?;
    let path = cli.out.join(final_name);
    trainer.checkpoint().save(&path)?;
    result?;
    println!("{} steps; checkpoint written to {}", trainer.state.global_step, path.display());
    Ok(())
}
