//! Command-line entry points.
//!
//! Exit codes: 0 on success, 1 on validation or usage errors, 2 on runtime
//! failures. Errors print as one line: `error[E_CODE]: message`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::continual::{Evaluator, GalleryScope, IdentityMode, Variant};
use crate::error::{Error, Result};
use crate::io::config::one_line;
use crate::io::report::{prompt_dims, read_metrics, write_report, METRICS_FILE};
use crate::io::{generate_dataset, read_dataset, write_dataset, GeneratorSpec, RunConfig};
use crate::run::RunState;

#[derive(Debug, Parser)]
#[command(name = "lpi", version, about = "Low-rank prompt interaction for continual image-text retrieval")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the default run configuration and generator spec.
    Defaults {
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset from a generator spec.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain and freeze the dual encoder.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train prompts task by task, checkpointing after every stage.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// lpi-m, lpi-p, cp or dp; overrides the configuration.
        #[arg(long)]
        variant: Option<Variant>,
        /// Continue from the checkpoint at `--out`.
        #[arg(long)]
        resume: bool,
        /// Stop once this many tasks are trained.
        #[arg(long)]
        stages: Option<usize>,
    },
    /// Evaluate every stage of a trained run.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Use each query's true task instead of the predicted one.
        #[arg(long, conflicts_with = "no_prompts")]
        oracle_identity: bool,
        /// Evaluate the frozen backbone alone.
        #[arg(long)]
        no_prompts: bool,
        #[arg(long)]
        gallery: Option<GalleryScope>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute the summary of an existing metrics file.
    Report {
        /// A metrics CSV or a directory holding one.
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse `args`, run the command and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[E_USAGE]: {}", one_line(first));
            return 1;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), one_line(&e.to_string()));
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_spec(path: &Path) -> Result<GeneratorSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), one_line(&e.to_string()))))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Defaults { out } => {
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            RunConfig::default().save(&out.join("config.toml"))?;
            let spec = toml::to_string_pretty(&GeneratorSpec::default()).map_err(|e| Error::Config(e.to_string()))?;
            write_text(&out.join("spec.toml"), &spec)
        }
        Command::Gen { spec, out } => {
            let data = generate_dataset(&load_spec(&spec)?)?;
            write_dataset(&data, &out)?;
            log::info!("wrote {} tasks to {}", data.tasks.len(), out.display());
            Ok(())
        }
        Command::Pretrain { config, data, out } => {
            let cfg = RunConfig::load(&config)?;
            let data = read_dataset(&data)?;
            RunState::pretrain(&cfg, &data)?.save(&out)
        }
        Command::Train {
            config,
            data,
            backbone,
            out,
            variant,
            resume,
            stages,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(v) = variant {
                cfg.train.variant = v;
            }
            let data = read_dataset(&data)?;
            let mut state = if resume && out.exists() {
                let state = RunState::load(&out)?;
                if state.config != cfg {
                    return Err(Error::Config(format!(
                        "{} was trained with a different configuration",
                        out.display()
                    )));
                }
                log::info!("resuming after stage {}", state.stage());
                state
            } else {
                let base = RunState::load(&backbone)?;
                RunState::with_backbone(&cfg, base.backbone)?
            };
            state.train_until(&data, stages, |s| {
                log::info!("stage {} done", s.stage());
                s.save(&out)
            })
        }
        Command::Eval {
            ckpt,
            data,
            oracle_identity,
            no_prompts,
            gallery,
            out,
        } => {
            let state = RunState::load(&ckpt)?;
            let data = read_dataset(&data)?;
            let mode = if oracle_identity {
                IdentityMode::Oracle
            } else if no_prompts {
                IdentityMode::None
            } else {
                state.config.eval.identity
            };
            let scope = gallery.unwrap_or(state.config.eval.gallery);
            if state.pool.is_empty() {
                return Err(Error::EmptyPool);
            }
            let tests = data.test_sets();
            if tests.len() < state.stage() {
                return Err(Error::Data(format!(
                    "checkpoint has {} tasks but the dataset only {}",
                    state.stage(),
                    tests.len()
                )));
            }
            let mut ev = Evaluator::new(&state.backbone, &tests[..state.stage()], scope);
            let records = ev.evaluate_run(&state.pool, mode)?;
            let t = &state.config.train;
            let dims = prompt_dims(&state.config.backbone, t.prompt_rank, t.interaction_rank);
            let summary = write_report(&out, &records, Some((&state.pool, dims)))?;
            if let Some(m) = summary.modes.first() {
                println!(
                    "{} identity, stage {}: R@1 {:.2} R@5 {:.2} R@10 {:.2} forgetting {:.2}",
                    m.identity_mode, m.final_stage, m.average.r1, m.average.r5, m.average.r10, m.average.forgetting
                );
            }
            Ok(())
        }
        Command::Report { metrics, out } => {
            let path = if metrics.is_dir() { metrics.join(METRICS_FILE) } else { metrics };
            let records = read_metrics(&path)?;
            write_report(&out, &records, None)?;
            Ok(())
        }
    }
}
