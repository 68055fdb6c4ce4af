//! Command-line surface: `gen-data`, `train`, `eval`, `ablate`, `similarity`
//! and `default-config`.
//!
//! Errors print one line `error[CODE]: message` on stderr. Exit codes are 0
//! on success, 1 on usage errors and 2 on runtime errors.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analysis::{EncoderTag, Roi};
use crate::config::RunConfig;
use crate::decoder::Vocab;
use crate::error::{Error, Result};
use crate::experiment::{evaluate_suites, parse_variants, run_ablation, write_similarity_maps};
use crate::experiment::{EvalSuites, Variant};
use crate::synthdata::{gen_sample, write_jsonl, TaskLevel};
use crate::training::{load_checkpoint, lr_at_step, save_checkpoint, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.sstk";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Parser)]
#[command(
    name = "spatialstack",
    version,
    about = "Layer-wise geometry fusion toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Low,
    High,
    Both,
}

impl Suite {
    fn levels(self) -> Vec<TaskLevel> {
        match self {
            Suite::Low => vec![TaskLevel::Low],
            Suite::High => vec![TaskLevel::High],
            Suite::Both => vec![TaskLevel::Low, TaskLevel::High],
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic samples as JSON lines.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        level: TaskLevel,
        /// Output file, or `-` for stdout.
        #[arg(long)]
        out: PathBuf,
        /// Run config supplying resolution and frame plan (toy defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one model; writes a checkpoint and a per-step log.
    Train {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many steps in this invocation.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint on held-out suites.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        suite: Suite,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate fusion variants on paired seeds and data.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated: base, gvf-single[@tap], gvf-multi, stack, stack-reverse.
        #[arg(long, default_value = "base,gvf-single,gvf-multi,stack,stack-reverse")]
        variants: String,
        #[arg(long)]
        out: PathBuf,
        /// Run variants on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Write ROI similarity heatmaps as PGM files.
    Similarity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene_seed: u64,
        #[arg(long)]
        encoder: EncoderTag,
        /// `r0,c0,r1,c1`, inclusive patch coordinates.
        #[arg(long)]
        roi: Roi,
        #[arg(long, default_value = "0.5,0.75,1.0", value_delimiter = ',')]
        depths: Vec<f64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print the toy configuration as strict JSON.
    DefaultConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parse arguments and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let detail = e.to_string();
            let text: Vec<&str> = detail
                .lines()
                .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more"))
                .collect();
            let first = text.join(" ");
            let first = first.trim().trim_start_matches("error: ");
            eprintln!("error[E_USAGE]: {}", one_line(first));
            return 1;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), one_line(&e.to_string()));
            2
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, text + "\n")?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainLogLine {
    step: usize,
    lr: f64,
    loss: f64,
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            seed,
            count,
            level,
            out,
            config,
        } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::toy(),
            };
            let spec = cfg.data.render_spec(cfg.model.patch(), cfg.model.merge())?;
            let vocab = Vocab::toy();
            let samples = (0..count as u64)
                .map(|i| gen_sample(seed + i, level, &spec, &vocab))
                .collect::<Result<Vec<_>>>()?;
            if out.as_os_str() == "-" {
                let stdout = std::io::stdout();
                write_jsonl(&samples, stdout.lock())?;
            } else {
                let mut w = BufWriter::new(File::create(&out)?);
                write_jsonl(&samples, &mut w)?;
                w.flush()?;
            }
            Ok(())
        }
        Command::Train {
            config,
            out_dir,
            resume,
            steps,
        } => {
            let mut trainer = match (&resume, &config) {
                (Some(ck), _) => Trainer::from_checkpoint(load_checkpoint(ck)?)?,
                (None, Some(c)) => Trainer::new(&RunConfig::load(c)?)?,
                (None, None) => {
                    return Err(Error::Argument("train needs --config or --resume".into()))
                }
            };
            if let (Some(_), Some(c)) = (&resume, &config) {
                if RunConfig::load(c)? != trainer.config {
                    return Err(Error::Config(
                        "--config differs from the checkpoint's config".into(),
                    ));
                }
            }
            std::fs::create_dir_all(&out_dir)?;
            std::fs::write(out_dir.join(CONFIG_FILE), trainer.config.emit()? + "\n")?;
            let total = trainer.config.train.total_steps;
            let remaining = total - trainer.step.min(total);
            let n = steps.map_or(remaining, |s| s.min(remaining));
            let log_path = out_dir.join(TRAIN_LOG_FILE);
            let log = std::fs::OpenOptions::new()
                .create(true)
                .append(resume.is_some())
                .write(true)
                .truncate(resume.is_none())
                .open(&log_path)?;
            let mut log = BufWriter::new(log);
            for _ in 0..n {
                let step = trainer.step;
                let lr = lr_at_step(step, &trainer.config.train)?;
                let loss = trainer.train_one()?;
                serde_json::to_writer(&mut log, &TrainLogLine { step, lr, loss })?;
                log.write_all(b"\n")?;
                if let Some(every) = trainer.config.train.checkpoint_every {
                    if trainer.step % every == 0 {
                        let name = format!("checkpoint_step{}.sstk", trainer.step);
                        save_checkpoint(&trainer.checkpoint(), &out_dir.join(name))?;
                    }
                }
            }
            log.flush()?;
            save_checkpoint(&trainer.checkpoint(), &out_dir.join(CHECKPOINT_FILE))?;
            println!(
                "trained to step {}/{}; last loss {}",
                trainer.step,
                total,
                trainer
                    .losses
                    .last()
                    .map_or("n/a".to_string(), |l| format!("{l:.4}"))
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            suite,
            out,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let suites = EvalSuites::generate(&ck.config, &suite.levels())?;
            let report = evaluate_suites(&ck.config, &ck.params, &suites, ck.step)?;
            write_json(&report, out.as_deref())
        }
        Command::Ablate {
            config,
            variants,
            out,
            parallel,
        } => {
            let cfg = RunConfig::load(&config)?;
            let variants: Vec<Variant> = parse_variants(&variants)?;
            let report = run_ablation(&cfg, &variants, parallel)?;
            write_json(&report, Some(&out))
        }
        Command::Similarity {
            checkpoint,
            scene_seed,
            encoder,
            roi,
            depths,
            out_dir,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let cfg = &ck.config;
            let spec = cfg.data.render_spec(cfg.model.patch(), cfg.model.merge())?;
            let names = write_similarity_maps(
                &cfg.model, &ck.params, &spec, scene_seed, encoder, &depths, roi, &out_dir,
            )?;
            for n in names {
                println!("{}", out_dir.join(n).display());
            }
            Ok(())
        }
        Command::DefaultConfig { out } => {
            let text = RunConfig::toy().emit()?;
            match out {
                Some(p) => std::fs::write(p, text + "\n")?,
                None => println!("{text}"),
            }
            Ok(())
        }
    }
}
