//! Command-line front end for the experiment runner.

use clap::{Args, Parser, Subcommand, ValueEnum};
use promptvit::runner::{self, ExperimentConfig, ExperimentRecord};
use promptvit::train::Precision;
use promptvit::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "promptvit", version, about = "Prompt-tuning experiments on small Vision Transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, replacing the config's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Single seed, replacing the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    /// Worker threads for independent runs.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a backbone on the upstream task and save the checkpoint.
    Pretrain,
    /// Every method × task × seed of the config.
    Run,
    /// Meta-Net depth ablation for the config's DVPT method.
    AblateDepth,
    /// Shared versus specific dynamic prompts.
    AblateMode,
    /// Data-scale sweep over training-set fractions.
    SweepScale,
    /// Finite-difference checks of every primitive and of the end-to-end losses.
    Gradcheck,
    /// Per-group trainable parameter counts of the configured methods.
    Paramcount,
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --config <path>".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
        cfg.train.seed = seed;
        if let Some(p) = cfg.pretrain.as_mut() {
            p.train.seed = seed;
        }
    }
    if let Some(p) = common.precision {
        cfg.train.precision = p.into();
        if let Some(pre) = cfg.pretrain.as_mut() {
            pre.train.precision = p.into();
        }
    }
    Ok(cfg)
}

fn report_failures(record: &ExperimentRecord) -> ExitCode {
    for r in &record.runs {
        if let Some(e) = &r.error {
            eprintln!("failed: {} on {} seed {}: {e}", r.method, r.task, r.seed);
        }
    }
    if record.failed() > 0 {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn execute(cli: &Cli) -> Result<ExitCode, Error> {
    let threads = cli.common.threads;
    match cli.command {
        Command::Gradcheck => {
            let entries = runner::gradcheck_suite(cli.common.seed.unwrap_or(0))?;
            for e in &entries {
                println!(
                    "{}\t{}\tchecked={}\tmax_error={:.3e}\ttol={:.0e}",
                    if e.passed { "PASS" } else { "FAIL" },
                    e.name,
                    e.checked,
                    e.max_error,
                    e.tolerance
                );
            }
            Ok(if entries.iter().all(|e| e.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Paramcount => {
            let cfg = load_config(&cli.common)?;
            cfg.validate(false)?;
            print!("{}", runner::param_table_text(&runner::param_table(&cfg)?));
            Ok(ExitCode::SUCCESS)
        }
        Command::Pretrain => {
            let cfg = load_config(&cli.common)?;
            let r = runner::pretrain(&cfg)?;
            println!(
                "train_acc={:.4} epochs={} checkpoint={}",
                r.train_acc,
                r.epochs_run,
                r.checkpoint.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Run => {
            let cfg = load_config(&cli.common)?;
            let rec = runner::run_matrix(&cfg, threads)?;
            print!("{}", rec.summary_csv());
            Ok(report_failures(&rec))
        }
        Command::AblateDepth => {
            let cfg = load_config(&cli.common)?;
            let t = runner::ablate_metanet_depth(&cfg, threads)?;
            print!("{}", t.to_csv());
            Ok(report_failures(&t.record))
        }
        Command::AblateMode => {
            let cfg = load_config(&cli.common)?;
            let t = runner::ablate_prompt_mode(&cfg, threads)?;
            print!("{}", t.to_csv());
            Ok(report_failures(&t.record))
        }
        Command::SweepScale => {
            let cfg = load_config(&cli.common)?;
            let t = runner::sweep_data_scale(&cfg, threads)?;
            print!("{}", t.to_csv());
            Ok(report_failures(&t.record))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
