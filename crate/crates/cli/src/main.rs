use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use vaff::data::PhantomConfig;
use vaff::metrics::{aggregate, format_mean_std, MetricsReport};
use vaff::network::{FusionMode, InputMode};
use vaff::train::{self, AblationMode, TrainConfig, TrainOptions};

#[derive(Parser)]
#[command(name = "vaff", version, about = "Joint vessel, FAZ and junction analysis of OCTA en-face triplets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Synth {
        #[arg(long)]
        count: usize,
        /// Image size as H,W.
        #[arg(long, default_value = "128,128", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        fusion_mode: Option<FusionMode>,
        #[arg(long)]
        input_mode: Option<InputMode>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on a dataset split and write a CSV report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Refuse checkpoints trained for another input mode.
        #[arg(long)]
        input_mode: Option<InputMode>,
        /// Report path; defaults to metrics.csv next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write probability maps and decoded junctions for one sample.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a prediction over its sample.
    Visualize {
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one run per fusion or input mode.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Fusion modes (vgm, max, min, avg, sum) and input modes
        /// (multi, single, triplicate).
        #[arg(long, num_args = 1.., value_delimiter = ',', default_values = ["vgm", "sum", "avg", "max", "min"])]
        modes: Vec<AblationMode>,
        #[arg(long)]
        quiet: bool,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(',').ok_or("expected H,W")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v}: {e}"));
    Ok((p(h)?, p(w)?))
}

fn print_summary(rows: &[(String, MetricsReport)]) {
    let reports: Vec<MetricsReport> = rows.iter().map(|r| r.1).collect();
    for (name, s) in MetricsReport::COLUMNS.iter().zip(aggregate(&reports)) {
        println!("{name:<12} {}", format_mean_std(&s));
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth { count, size, seed, out } => {
            let base = PhantomConfig {
                image_size: size,
                rng_seed: seed,
                faz_radius: PhantomConfig::default().faz_radius * size.0.min(size.1) as f64 / 128.0,
                ..Default::default()
            };
            let s = train::synth(count, &base, &out)?;
            println!(
                "wrote {count} samples to {} ({} train, {} test)",
                out.display(),
                s.train.len(),
                s.test.len()
            );
        }
        Command::Train {
            config,
            fusion_mode,
            input_mode,
            resume,
            quiet,
        } => {
            let mut cfg = TrainConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(m) = fusion_mode {
                cfg.fusion_mode = m;
            }
            if let Some(m) = input_mode {
                cfg.input_mode = m;
            }
            let out = train::train(
                &cfg,
                &TrainOptions {
                    resume_from: resume,
                    verbose: !quiet,
                    ..Default::default()
                },
            )?;
            println!("{}", out.checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            input_mode,
            out,
        } => {
            let out = out.unwrap_or_else(|| checkpoint.with_file_name(train::REPORT_FILE));
            let params = train::checkpoint_eval_params(&checkpoint)?;
            let rows = train::evaluate(&checkpoint, &data, &split, input_mode, &params, &out)?;
            print_summary(&rows);
            println!("report: {}", out.display());
        }
        Command::Predict { checkpoint, sample, out } => {
            let params = train::checkpoint_eval_params(&checkpoint)?;
            train::predict(&checkpoint, &sample, &out, &params)?;
            println!("wrote predictions to {}", out.display());
        }
        Command::Visualize { sample, pred, out } => {
            train::visualize(&sample, &pred, &out)?;
            println!("{}", out.display());
        }
        Command::Ablate { config, modes, quiet } => {
            if modes.is_empty() {
                bail!("no modes given");
            }
            let cfg = TrainConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let res = train::ablate(&cfg, &modes, !quiet)?;
            print!("{}", res.table);
            println!("table: {}", res.table_path.display());
        }
    }
    Ok(())
}
