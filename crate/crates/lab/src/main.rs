use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cocos_core::cocos::{cocos_protocol, CocosConfig};
use cocos_core::gradcheck::{check, GradCheckConfig};
use cocos_core::losses::{LossKind, LossParams};
use cocos_core::synth::{generate, strip_identifiers, Split, SynthConfig};
use cocos_core::trainer::{evaluate_split, TrainConfig};
use cocos_lab::config::{DatasetSource, ExperimentConfig};
use cocos_lab::experiment::{aggregate, dataset_for, execute_single, format_eval, run_experiment};
use cocos_lab::format;
use cocos_lab::{LabError, Result};

/// Loss comparison and gradient-contribution analysis on synthetic
/// image-caption embeddings.
#[derive(Parser)]
#[command(name = "cocos-lab", version)]
struct Cli {
    /// Experiment config (INI).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Concurrent training runs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Base seed; overrides the config.
    #[arg(long, global = true, env = "COCOS_LAB_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (config `[dataset]` section or defaults).
    Gen,
    /// Train a single run of the config and write its checkpoint and metrics.
    Train {
        /// Run label; may be omitted when the config has one run.
        #[arg(long)]
        run: Option<String>,
        /// Dataset directory written by `gen`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Zero the identifier block of the test split first.
        #[arg(long)]
        strip_identifiers: bool,
    },
    /// Count contributing candidates at a checkpoint over the training split.
    Cocos {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        loss: LossKind,
        #[arg(long, default_value_t = 0.01)]
        epsilon: f64,
        #[arg(long, default_value_t = 128)]
        batch_n: usize,
        #[arg(long, default_value_t = 0.2)]
        alpha: f64,
        #[arg(long, default_value_t = 0.1)]
        tau_ntxent: f64,
        #[arg(long, default_value_t = 0.01)]
        tau_smooth: f64,
    },
    /// Check every analytic gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, value_delimiter = ',', default_value = "2,8,16")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Aggregate run directories under --out into report.csv / report.txt.
    Report,
    /// Run every repetition of every run in the config and write the report.
    Run,
}

fn need<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref().ok_or_else(|| LabError::Usage(format!("{flag} is required")))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(need(&cli.config, "--config")?)?;
    if let Some(s) = cli.seed {
        cfg.base_seed = s;
    }
    Ok(cfg)
}

fn parse_split(s: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|x| x.name() == s)
        .ok_or_else(|| LabError::Usage(format!("unknown split {s}")))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen => {
            let out = need(&cli.out, "--out")?;
            let (config, fixed) = match &cli.config {
                Some(p) => match ExperimentConfig::load(p)?.dataset {
                    DatasetSource::Synth { config, fixed_seed } => (config, fixed_seed),
                    DatasetSource::Path(_) => return Err(LabError::Usage("config names an existing dataset".into())),
                },
                None => (SynthConfig::default(), None),
            };
            let seed = cli.seed.or(fixed).unwrap_or(0);
            let ds = generate(&SynthConfig { seed, ..config })?;
            format::write_dataset(out, &ds)?;
            println!("wrote {} tuples to {}", ds.config.num_tuples, out.display());
        }
        Command::Train { run, data } => {
            let cfg = load_config(cli)?;
            let out = cli.out.clone().or(cfg.output.clone()).ok_or_else(|| LabError::Usage("--out is required".into()))?;
            let spec = match run {
                Some(l) => cfg.runs.iter().find(|r| &r.label == l),
                None if cfg.runs.len() == 1 => cfg.runs.first(),
                None => return Err(LabError::Usage("config has several runs; pass --run".into())),
            }
            .ok_or_else(|| LabError::Usage("no such run".into()))?;
            let ds = match data {
                Some(d) => format::read_dataset(d)?,
                None => dataset_for(&cfg.dataset, cfg.base_seed)?,
            };
            let train_cfg = TrainConfig { seed: cfg.base_seed, ..spec.train.clone() };
            let ck = execute_single(&ds, &spec.label, &train_cfg, cfg.cocos.as_ref(), &out)?;
            println!("best epoch {} val rsum {:.2}; outputs in {}", ck.epoch, ck.val_rsum, out.display());
        }
        Command::Eval { checkpoint, data, split, strip_identifiers: strip } => {
            let ck = format::read_checkpoint(checkpoint)?;
            let mut ds = format::read_dataset(data)?;
            if *strip {
                ds = strip_identifiers(&ds)?;
            }
            let split = parse_split(split)?;
            let (i2t, t2i) = evaluate_split(&ck.encoders, &ds, split)?;
            print!("{}", format_eval(split.name(), &i2t, &t2i));
        }
        Command::Cocos { checkpoint, data, loss, epsilon, batch_n, alpha, tau_ntxent, tau_smooth } => {
            let ck = format::read_checkpoint(checkpoint)?;
            let ds = format::read_dataset(data)?;
            let params = LossParams::new(*alpha, *tau_ntxent, *tau_smooth)?;
            let c = CocosConfig { epsilon: *epsilon, batch_n: *batch_n, seed: cli.seed.unwrap_or(0) };
            for r in cocos_protocol(&ck.encoders, &ds, *loss, &params, &c)? {
                print!("{}", format::format_cocos(&r));
            }
        }
        Command::Gradcheck { trials, dims, tolerance, step } => {
            let params = LossParams::default();
            let mut all = true;
            for &dim in dims {
                for kind in LossKind::ALL {
                    let cfg = GradCheckConfig {
                        dim,
                        trials: *trials,
                        tolerance: *tolerance,
                        step: *step,
                        seed: cli.seed.unwrap_or(0),
                        ..Default::default()
                    };
                    let r = check(kind, &params, &cfg)?;
                    all &= r.pass;
                    println!(
                        "{:<10} d={dim:<3} {} max_rel={:.2e} max_abs={:.2e} checked={} skipped={} below_floor={} failed={}",
                        kind.name(),
                        if r.pass { "PASS" } else { "FAIL" },
                        r.max_rel_error,
                        r.max_abs_error,
                        r.trials_checked,
                        r.skipped,
                        r.below_floor,
                        r.failed
                    );
                }
            }
            if !all {
                return Err(LabError::Config("gradient check failed".into()));
            }
        }
        Command::Report => {
            let out = need(&cli.out, "--out")?;
            let report = aggregate(out)?;
            report.write(out)?;
            print!("{}", report.to_table());
        }
        Command::Run => {
            let cfg = load_config(cli)?;
            let out = cli.out.clone().or(cfg.output.clone()).ok_or_else(|| LabError::Usage("--out is required".into()))?;
            let report = run_experiment(&cfg, &out, cli.jobs)?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
