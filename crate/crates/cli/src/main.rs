use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kreplay_core::config::RunConfig;
use kreplay_core::pipeline;
use kreplay_core::train::RunOutcome;
use kreplay_core::{Error, Result};

/// Knowledge-replay captioner lab.
#[derive(Parser)]
#[command(name = "kreplay", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic concept bank and every dataset split.
    GenData(Common),
    /// Train the base model on the concept-rich corpus.
    Pretrain(Common),
    /// Fine-tune the base model on generic captions.
    Finetune(Common),
    /// Fine-tune the base model with knowledge replay against a frozen teacher.
    KreplayTrain(Common),
    /// Score a checkpoint on the generic, seen and unseen test splits.
    Eval(Common),
    /// Caption images and print one JSON object per line.
    Decode(Common),
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` settings applied after the config file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Shorthand for `--override data_dir=...`.
    #[arg(long)]
    data: Option<String>,
    /// Shorthand for `--override checkpoint=...`.
    #[arg(long)]
    checkpoint: Option<String>,
    /// Shorthand for `--override base_checkpoint=...`.
    #[arg(long)]
    base: Option<String>,
    /// Shorthand for `--override teacher_checkpoint=...`.
    #[arg(long)]
    teacher: Option<String>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        let shorthands = [
            ("data_dir", &self.data),
            ("checkpoint", &self.checkpoint),
            ("base_checkpoint", &self.base),
            ("teacher_checkpoint", &self.teacher),
        ];
        for (key, value) in shorthands {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        Ok(cfg)
    }

    fn out(&self) -> Result<PathBuf> {
        self.out
            .clone()
            .ok_or_else(|| Error::Config("--out is required".into()))
    }
}

fn summarize(outcome: &RunOutcome) {
    let best = &outcome.checkpoints[outcome.best];
    println!(
        "steps={} best_epoch={} generic_val_cider={:.4} concept_val_rec={:.4}",
        outcome.log.len(),
        best.epoch,
        best.metrics.generic_cider,
        best.metrics.concept_rec
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let m = pipeline::gen_data(&c.config()?, &c.out()?)?;
            for (split, n) in &m.counts {
                println!("{split}: {n}");
            }
        }
        Command::Pretrain(c) => summarize(&pipeline::pretrain(&c.config()?, &c.out()?)?),
        Command::Finetune(c) => summarize(&pipeline::finetune(&c.config()?, &c.out()?)?),
        Command::KreplayTrain(c) => summarize(&pipeline::kreplay_train(&c.config()?, &c.out()?)?),
        Command::Eval(c) => {
            let report = pipeline::evaluate(&c.config()?, &c.out()?)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Decode(c) => {
            let lines: Vec<String> = pipeline::decode(&c.config()?)?
                .iter()
                .map(|d| serde_json::to_string(d).expect("caption serializes"))
                .collect();
            if let Some(out) = &c.out {
                std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
                let path = out.join("captions.jsonl");
                let mut text = lines.join("\n");
                text.push('\n');
                std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
            for l in lines {
                println!("{l}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
