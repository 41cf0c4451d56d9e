use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use tenet_core::checkpoint::Checkpoint;
use tenet_core::config::ExperimentConfig;
use tenet_core::data::{load_dataset, synthetic_cifar_like, Dataset, DatasetFormat};
use tenet_core::experiment::{train, write_eval_outputs, TrainOptions};
use tenet_core::heatmap::export_heatmap;
use tenet_core::pnm::read_image;
use tenet_core::report::report;
use tenet_core::robustness::{evaluate, mce_from_errors, AttackConfig, AttackKind, Condition, CorruptionSpec};
use tenet_core::tenet::TenetConfig;

#[derive(Parser)]
#[command(name = "tenet", version, about = "Group-wise inhibition training and robustness evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct DataArgs {
    /// Dataset file or directory.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "cifar10-binary")]
    format: DatasetFormat,
    /// Evaluate only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Directory for eval.csv and predictions.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for attack starts and corruption noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per configured seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dotted-path override, e.g. `tenet.alpha=0.2`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from last.ckpt where present.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Clean top-1 error of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Top-1 error under an L∞ attack.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = ["fgsm", "pgd"])]
        kind: String,
        /// Budget in [0, 1] pixel units.
        #[arg(long)]
        eps: f32,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        #[arg(long, default_value_t = 2.0 / 255.0)]
        step_size: f32,
        #[arg(long)]
        no_random_start: bool,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Per-cell errors and mCE over a corruption suite.
    CorruptEval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `full`, or comma-separated `kind:severity` cells.
        #[arg(long, default_value = "full")]
        suite: String,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Grad-CAM and per-group maps for one PGM/PPM image.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        groups: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Mean ± std across seeds for finished run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the summary as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write a procedural CIFAR-format dataset (train and test files).
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        train: usize,
        #[arg(long, default_value_t = 2000)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_data(args: &DataArgs) -> Result<Dataset> {
    let ds = load_dataset(&args.dataset, args.format)?;
    Ok(match args.limit {
        Some(n) => ds.take(n),
        None => ds,
    })
}

fn run_conditions(checkpoint: &Path, data: &DataArgs, conditions: Vec<Condition>) -> Result<Vec<(Condition, f64, usize)>> {
    let ckpt = load_checkpoint(checkpoint)?;
    let ds = load_data(data)?;
    let results = conditions
        .into_iter()
        .map(|c| evaluate(&ckpt.model, &ds, &c, data.seed).map(|m| (c, m)))
        .collect::<tenet_core::Result<Vec<_>>>()?;
    if let Some(out) = &data.out {
        let name = checkpoint.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let run_id = checkpoint
            .parent()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        write_eval_outputs(&results, &ds, &run_id, &name, out)?;
    }
    Ok(results.into_iter().map(|(c, m)| (c, m.top1_error, m.n_samples)).collect())
}

fn print_rows(rows: &[(Condition, f64, usize)]) {
    for (c, e, n) in rows {
        println!("{}", json!({"condition": c.label(), "n_samples": n, "top1_error": e}));
    }
}

fn parse_suite(text: &str) -> Result<Vec<CorruptionSpec>> {
    if text == "full" {
        return Ok(CorruptionSpec::full_suite());
    }
    text.split(',')
        .map(|cell| {
            let (kind, sev) = cell
                .trim()
                .split_once(':')
                .with_context(|| format!("suite cell '{cell}' is not kind:severity"))?;
            Ok(CorruptionSpec::new(kind.parse()?, sev.parse().context("severity")?)?)
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            overrides,
            resume,
            quiet,
        } => {
            let config = ExperimentConfig::load(&config, &overrides)?;
            print!("{}", config.to_toml()?);
            let options = TrainOptions {
                resume,
                verbose: !quiet,
                ..TrainOptions::default()
            };
            for s in train(&config, &options)? {
                let clean = s.eval.iter().find(|r| r.condition == "clean").map(|r| r.top1_error);
                println!(
                    "{}",
                    json!({"run_dir": s.run_dir, "seed": s.seed, "steps": s.steps, "clean_error": clean})
                );
            }
        }
        Command::Eval { checkpoint, data } => {
            print_rows(&run_conditions(&checkpoint, &data, vec![Condition::Clean])?);
        }
        Command::Attack {
            checkpoint,
            kind,
            eps,
            steps,
            step_size,
            no_random_start,
            data,
        } => {
            let attack = match kind.as_str() {
                "fgsm" => AttackConfig::fgsm(eps),
                _ => AttackConfig {
                    kind: AttackKind::Pgd,
                    epsilon: eps,
                    steps,
                    step_size,
                    random_start: !no_random_start,
                },
            };
            attack.validate()?;
            print_rows(&run_conditions(&checkpoint, &data, vec![Condition::Attack(attack)])?);
        }
        Command::CorruptEval { checkpoint, suite, data } => {
            let suite = parse_suite(&suite)?;
            let rows = run_conditions(&checkpoint, &data, suite.into_iter().map(Condition::Corrupt).collect())?;
            print_rows(&rows);
            let errors: Vec<f64> = rows.iter().map(|r| r.1).collect();
            println!("{}", json!({"condition": "mce", "top1_error": mce_from_errors(&errors)?}));
        }
        Command::Visualize {
            checkpoint,
            image,
            out,
            groups,
            seed,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let x = read_image(&image)?;
            let config = TenetConfig {
                num_groups: groups,
                ..TenetConfig::default()
            };
            let files = export_heatmap(&ckpt.model, &x, &config, seed, &out)?;
            println!(
                "{}",
                json!({"gradcam": files.gradcam, "groups": files.groups, "predicted": files.predicted})
            );
        }
        Command::Report { runs, csv } => {
            let r = report(&runs)?;
            print!("{}", r.to_text());
            if let Some(path) = csv {
                r.write_csv(&path)?;
            }
        }
        Command::SynthData { out, train, test, seed } => {
            if train == 0 || test == 0 {
                bail!("train and test sizes must be positive");
            }
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let train_path = out.join("data_batch_1.bin");
            let test_path = out.join("test_batch.bin");
            synthetic_cifar_like(train, seed).write_cifar10_binary(&train_path)?;
            synthetic_cifar_like(test, seed ^ 0xA5A5_A5A5).write_cifar10_binary(&test_path)?;
            println!("{}", json!({"train": train_path, "test": test_path}));
        }
    }
    Ok(())
}

fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<tenet_core::Error>())
        .map_or("error", |e| e.kind());
    json!({"error": kind, "message": format!("{err:#}")}).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({"error": "usage", "message": e.to_string().trim_end()}));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_line(&err));
            ExitCode::FAILURE
        }
    }
}
