//! `crann` command line: synthetic data, preparation, training, evaluation,
//! prediction and explanation.

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crann_core::checkpoint::Checkpoint;
use crann_core::config::RunConfig;
use crann_core::dataset::parse_timestamp;
use crann_core::models::ModelKind;
use crann_core::pipeline::{self, ExplainKind, Prepared, Workspace};
use crann_core::synthetic::{generate, write_csv};
use crann_core::{CoreError, ErrorClass, Result};

#[derive(Debug, Parser)]
#[command(name = "crann", version, about = "Attention-based spatio-temporal traffic forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic traffic, weather and sensor CSVs.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Clean the inputs and write the panel, fold plan and normalization.
    Prepare {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train one or all folds; writes checkpoints and reports.
    Train(FoldArgs),
    /// Score test blocks; writes per-fold and pooled metrics.
    Evaluate(FoldArgs),
    /// Forecast the horizon after an origin hour, in vehicles/hour.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// First forecast hour, e.g. 2019-06-01T00:00.
        #[arg(long)]
        origin: String,
        /// CSV destination; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export attention maps or dense-stage attributions as CSV.
    Explain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// temporal, spatial or shapley.
        #[arg(long)]
        kind: String,
        /// Output directory; defaults to `explain/` in the work directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct FoldArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "crann")]
    model: String,
    #[arg(long, conflicts_with = "all_folds", required_unless_present = "all_folds")]
    fold: Option<usize>,
    #[arg(long)]
    all_folds: bool,
    /// Folds processed in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

impl FoldArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        let t = &mut cfg.train;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.epochs {
            t.max_epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            t.learning_rate = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn folds(&self, k: usize) -> Result<Vec<usize>> {
        if self.jobs == 0 {
            return Err(CoreError::Usage("--jobs must be at least 1".into()));
        }
        match self.fold {
            Some(f) if f >= k => Err(CoreError::Usage(format!("fold {f} out of range; the plan has {k} folds"))),
            Some(f) => Ok(vec![f]),
            None => Ok((0..k).collect()),
        }
    }
}

fn emit_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    writeln!(io::stdout(), "{text}").map_err(|e| CoreError::io("stdout", e))
}

fn say(msg: &str) -> Result<()> {
    writeln!(io::stdout(), "{msg}").map_err(|e| CoreError::io("stdout", e))
}

fn run_folds(args: &FoldArgs, evaluate: bool) -> Result<()> {
    let cfg = args.config()?;
    let kind: ModelKind = args.model.parse()?;
    let folds = args.folds(cfg.data.folds)?;
    let prepared = Prepared::load(&Workspace::new(&cfg.data.workdir), &cfg)?;
    if evaluate {
        let report = pipeline::evaluate_folds(&prepared, &cfg, kind, &folds, args.jobs)?;
        emit_json(&report)
    } else {
        let reports = pipeline::train_folds(&prepared, &cfg, kind, &folds, args.jobs)?;
        let ws = Workspace::new(&cfg.data.workdir);
        for r in &reports {
            let f = r.fold.unwrap_or_default();
            let m = r.test_metrics.as_ref();
            say(&format!(
                "{kind} fold {f}: {} epochs, best {} (val {:.6}), test wmape {:.3} -> {}",
                r.stopped_epoch,
                r.best_epoch,
                r.best_validation_loss,
                m.map_or(f64::NAN, |m| m.wmape),
                ws.checkpoint(kind, f).display()
            ))?;
        }
        Ok(())
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            let panel = generate(&cfg.synth)?;
            write_csv(&panel, &out)?;
            say(&format!(
                "wrote {} hours for {} sensors to {}",
                panel.n_times(),
                panel.n_sensors(),
                out.display()
            ))
        }
        Command::Prepare { config } => {
            let cfg = RunConfig::load(&config)?;
            let p = pipeline::prepare(&cfg)?;
            say(&format!(
                "{} hours, {} sensors, {} samples in {} folds (gap {} h) -> {}",
                p.panel.n_times(),
                p.panel.n_sensors(),
                p.origins.len(),
                p.plan.k,
                p.plan.gap,
                cfg.data.workdir.join("prepared").display()
            ))
        }
        Command::Train(args) => run_folds(&args, false),
        Command::Evaluate(args) => run_folds(&args, true),
        Command::Predict {
            config,
            checkpoint,
            origin,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let t = parse_timestamp(&origin)
                .ok_or_else(|| CoreError::Usage(format!("cannot parse origin `{origin}`")))?;
            let ck = Checkpoint::load(&checkpoint)?;
            let prepared = Prepared::load(&Workspace::new(&cfg.data.workdir), &cfg)?;
            let fc = pipeline::forecast(&ck, &prepared.panel, t)?;
            match out {
                Some(path) => {
                    let file = fs::File::create(&path).map_err(|e| CoreError::io(&path, e))?;
                    fc.write_csv(file)
                }
                None => fc.write_csv(io::stdout()),
            }
        }
        Command::Explain {
            config,
            checkpoint,
            kind,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let kind: ExplainKind = kind.parse()?;
            let ck = Checkpoint::load(&checkpoint)?;
            let prepared = Prepared::load(&Workspace::new(&cfg.data.workdir), &cfg)?;
            let dir = out.unwrap_or_else(|| cfg.data.workdir.join("explain"));
            for path in pipeline::explain(&ck, &prepared, &cfg, kind, &dir)? {
                say(&path.display().to_string())?;
            }
            Ok(())
        }
    }
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
