//! Command-line entry point.
//!
//! Exit status: 0 on success, 2 on invalid input or configuration, 1 on any
//! other failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::classifier::Setup;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline;
use crate::training::gradcheck::standard_gradcheck;
use crate::transport::ipot_check;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "xrat", version, about = "Two-stage multimodal classification with cross-modal rationale transfer")]
pub struct Cli {
    /// Worker threads for gradient computation [default: XRAT_THREADS, else 1].
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run configuration; omitted sections take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set train.max_epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Sets both `corpus.seed` and `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train/dev/test corpus.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the stage-one rationale extractor.
    TrainExtractor {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write rationale and heatmap dumps.
    Extract {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "train,dev,test")]
        splits: Vec<String>,
        /// Also render every heatmap as a PGM image.
        #[arg(long)]
        pgm: bool,
    },
    /// Train the stage-two classifier on rationale-masked inputs.
    TrainClassifier {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Directory holding the rationale and heatmap dumps.
        #[arg(long)]
        rationales: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write prediction dumps for each setup.
    Classify {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Classify each setup and write the evaluation report.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Compare IPOT against the exact solver on random problems.
    IpotCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 5)]
        max_size: usize,
        #[arg(long = "check-seed", default_value_t = 0)]
        check_seed: u64,
    },
    /// Finite-difference check of the stage-one gradients.
    Gradcheck {
        #[arg(long, default_value_t = 17)]
        seed: u64,
        #[arg(long, default_value_t = 0.09)]
        alpha: f64,
    },
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory holding the rationale and heatmap dumps; needed for R and XR.
    #[arg(long)]
    pub rationales: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Comma-separated setups: X, R, XR, text-only, image-only.
    #[arg(long, value_delimiter = ',')]
    pub setups: Option<Vec<String>>,
    #[arg(long)]
    pub out: PathBuf,
}

impl ConfigArgs {
    /// File values, then `--seed`, then each `--set` in order.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.corpus.seed = seed;
            cfg.train.seed = seed;
        }
        for o in &self.overrides {
            cfg.set(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn with_setups(mut cfg: RunConfig, setups: &Option<Vec<String>>) -> Result<RunConfig> {
    if let Some(names) = setups {
        cfg.eval.setups = names.iter().map(|s| s.parse::<Setup>()).collect::<Result<_>>()?;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn thread_count(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("XRAT_THREADS") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::invalid("XRAT_THREADS", format!("{v:?} is not a thread count")))?,
            Err(_) => 1,
        },
    };
    if n == 0 {
        return Err(Error::invalid("threads", "must be at least 1"));
    }
    Ok(n)
}

fn execute(cli: Cli) -> Result<()> {
    let threads = thread_count(cli.threads)?;
    // a second call in the same process (tests) keeps the existing pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    let parallel = threads > 1;
    match cli.command {
        Command::Synth { cfg, out } => pipeline::synth(&cfg.resolve()?, &out),
        Command::TrainExtractor { cfg, data, out } => {
            let log = pipeline::run_train_extractor(&cfg.resolve()?, &data, &out, parallel)?;
            println!("best epoch {} of {}", log.best_epoch, log.epochs.len());
            Ok(())
        }
        Command::Extract {
            cfg,
            data,
            checkpoint,
            out,
            splits,
            pgm,
        } => pipeline::run_extract(&cfg.resolve()?, &data, &checkpoint, &out, &splits, pgm),
        Command::TrainClassifier {
            cfg,
            data,
            rationales,
            out,
        } => {
            let log = pipeline::run_train_classifier(&cfg.resolve()?, &data, &rationales, &out, parallel)?;
            println!("best epoch {} of {}", log.best_epoch, log.epochs.len());
            Ok(())
        }
        Command::Classify { cfg, eval } => {
            let cfg = with_setups(cfg.resolve()?, &eval.setups)?;
            let results = pipeline::run_classify(
                &cfg,
                &eval.data,
                &eval.checkpoint,
                eval.rationales.as_deref(),
                &eval.split,
                &eval.out,
            )?;
            for r in results {
                println!("{:<12}{:>10.4}", r.setup.name(), r.macro_f1);
            }
            Ok(())
        }
        Command::Eval { cfg, eval } => {
            let cfg = with_setups(cfg.resolve()?, &eval.setups)?;
            let report = pipeline::run_eval(
                &cfg,
                &eval.data,
                &eval.checkpoint,
                eval.rationales.as_deref(),
                &eval.split,
                &eval.out,
            )?;
            print!("{}", report.to_table());
            Ok(())
        }
        Command::IpotCheck {
            cfg,
            trials,
            max_size,
            check_seed,
        } => {
            let cfg = cfg.resolve()?;
            let report = ipot_check(trials, max_size, check_seed, &cfg.ipot)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if report.max_rel_gap >= 1e-3 || report.max_marginal_violation >= 1e-6 {
                return Err(Error::Numerical(format!(
                    "IPOT check failed: relative gap {:.3e}, marginal violation {:.3e}",
                    report.max_rel_gap, report.max_marginal_violation
                )));
            }
            Ok(())
        }
        Command::Gradcheck { seed, alpha } => {
            let report = standard_gradcheck(seed, alpha)?;
            for t in &report.tensors {
                println!("{:<28}{:>8}{:>14.3e}", t.name, t.entries, t.max_rel_err);
            }
            println!("max relative error {:.3e}", report.max_rel_err);
            if report.max_rel_err >= 1e-3 {
                return Err(Error::Numerical(format!(
                    "gradient check failed: max relative error {:.3e}",
                    report.max_rel_err
                )));
            }
            Ok(())
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    let level = if cli.quiet {
        log::LevelFilter::Warn
    } else {
        log::LevelFilter::Info
    };
    let _ = env_logger::Builder::new().filter_level(level).format_target(false).try_init();
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_INVALID
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_arguments_exit_2() {
        assert_eq!(run(["xrat", "frobnicate"]), EXIT_INVALID);
        assert_eq!(run(["xrat", "synth"]), EXIT_INVALID);
        assert_eq!(run(["xrat", "--help"]), EXIT_OK);
    }

    #[test]
    fn invalid_config_exits_2() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"train": {"batch_size": 0}}"#).unwrap();
        let out = dir.path().join("data");
        let code = run(["xrat", "synth", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code, EXIT_INVALID);
        assert!(!out.exists());
    }

    #[test]
    fn missing_inputs_exit_2() {
        let dir = tempfile::tempdir().unwrap();
        let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
        let code = run(["xrat", "train-extractor", "--data", &p("nope"), "--out", &p("out")]);
        assert_eq!(code, EXIT_INVALID);
    }

    #[test]
    fn seed_flag_overrides_both_seeds() {
        let args = ConfigArgs {
            config: None,
            overrides: vec!["train.seed=5".into()],
            seed: Some(3),
        };
        let cfg = args.resolve().unwrap();
        assert_eq!(cfg.corpus.seed, 3);
        assert_eq!(cfg.train.seed, 5);
    }

    #[test]
    fn thread_flag_must_be_positive() {
        assert!(thread_count(Some(0)).is_err());
        assert_eq!(thread_count(Some(3)).unwrap(), 3);
    }
}
