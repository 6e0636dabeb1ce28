use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use fusion_core::config::RunConfig;
use fusion_core::dataset::{self, Dataset, SCHEMA_VERSION};
use fusion_core::model::FusionModel;
use fusion_core::rollout::{attention_entropy, evaluate_traces, Setting};
use fusion_core::trainer::{fit, Ablation, Trainer};
use fusion_core::FusionError;

#[derive(Parser)]
#[command(
    name = "fusion",
    version,
    about = "Safety-aware offline RL on the lane-world driving task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults are used for missing sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set trainer.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Collect a scripted-driver corpus.
    Collect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a corpus.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// full, short, no-cewm or no-cbl.
        #[arg(long)]
        ablation: Option<String>,
        /// Continue from `<out>/final` instead of starting fresh.
        #[arg(long)]
        resume: bool,
    },
    /// Roll out a checkpoint and write an evaluation report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// policy or dynamics.
        #[arg(long)]
        setting: String,
        #[arg(long)]
        episodes: usize,
        /// Comma-separated evaluation seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Output directory; defaults to `$FUSION_RUN_DIR/eval-<setting>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer attention entropy over collected trajectories.
    AnalyzeAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: usize,
        /// Corpus to read trajectories from; a fresh one is collected otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                FusionError::Config(_)
                | FusionError::UnknownSplit(_)
                | FusionError::UnknownLayout(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cmd: Command) -> fusion_core::Result<()> {
    match cmd {
        Command::Collect {
            common,
            out,
            episodes,
            seed,
        } => {
            let mut cfg = RunConfig::resolve(common.config.as_deref(), &common.overrides)?;
            if let Some(n) = episodes {
                cfg.dataset.episodes = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            fs::create_dir_all(&out)?;
            write_run_files(&out, &cfg, json!({}))?;
            let ds = dataset::collect(
                &out,
                cfg.dataset.episodes,
                cfg.dataset.split,
                Some(&cfg.dataset.policy_mix),
                &cfg.environment,
                cfg.seed,
            )?;
            println!("{}", serde_json::to_string_pretty(&ds.manifest)?);
        }
        Command::Train {
            common,
            data,
            out,
            ablation,
            resume,
        } => {
            let mut cfg = RunConfig::resolve(common.config.as_deref(), &common.overrides)?;
            if let Some(a) = ablation {
                cfg.trainer.ablation = a.parse::<Ablation>()?;
            }
            cfg.validate()?;
            let ds = Dataset::load(&data)?;
            fs::create_dir_all(&out)?;
            write_run_files(&out, &cfg, json!({ "data": dataset_inputs(&data, &ds)? }))?;
            let mut trainer = if resume {
                Trainer::load_state(&out.join("final"), Some(cfg.trainer.steps))?
            } else {
                Trainer::for_dataset(&cfg.model, &ds, cfg.trainer.clone())?
            };
            let res = fit(&mut trainer, &ds, Some(&out))?;
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "steps": trainer.step,
                    "final_checkpoint": res.final_checkpoint,
                    "best_checkpoint": res.best_checkpoint,
                }))?
            );
        }
        Command::Eval {
            common,
            checkpoint,
            setting,
            episodes,
            seeds,
            out,
        } => {
            let cfg = RunConfig::resolve(common.config.as_deref(), &common.overrides)?;
            let setting: Setting = setting.parse()?;
            let stem = checkpoint_stem(&checkpoint);
            let model = FusionModel::load(&stem)?;
            let (report, traces) = evaluate_traces(
                &model,
                setting,
                episodes,
                &seeds,
                &cfg.rollout,
                &cfg.environment,
            )?;
            let text = serde_json::to_string_pretty(&report)?;
            let dir = out.or_else(|| default_run_dir(&cfg, &format!("eval-{setting}")));
            if let Some(dir) = dir {
                fs::create_dir_all(&dir)?;
                write_run_files(
                    &dir,
                    &cfg,
                    json!({ "checkpoint": checkpoint_inputs(&stem)? }),
                )?;
                fs::write(dir.join("report.json"), &text)?;
                fs::write(dir.join("categories.csv"), report.category_csv())?;
                let mut lines = String::new();
                for (seed, index, t) in &traces {
                    lines.push_str(&serde_json::to_string(
                        &json!({ "seed": seed, "index": index, "trace": t }),
                    )?);
                    lines.push('\n');
                }
                fs::write(dir.join("traces.jsonl"), lines)?;
            }
            println!("{text}");
        }
        Command::AnalyzeAttention {
            common,
            checkpoint,
            episodes,
            data,
        } => {
            let cfg = RunConfig::resolve(common.config.as_deref(), &common.overrides)?;
            let model = FusionModel::load(&checkpoint_stem(&checkpoint))?;
            let ds = match data {
                Some(d) => Dataset::load(&d)?,
                None => dataset::collect_episodes_with(
                    episodes,
                    cfg.dataset.split,
                    &cfg.dataset.policy_mix,
                    &cfg.environment,
                    cfg.seed,
                )?,
            };
            let per_layer = attention_entropy(&model, &ds, episodes)?;
            let mean = per_layer.iter().sum::<f64>() / per_layer.len() as f64;
            let out = json!({ "trajectories": episodes.min(ds.episodes.len()), "per_layer": per_layer, "mean": mean });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
    }
    Ok(())
}

/// Accepts a checkpoint stem, a run directory or its `final` directory.
fn checkpoint_stem(p: &Path) -> PathBuf {
    for cand in [p.join("final").join("model"), p.join("model")] {
        if cand.with_extension("json").is_file() {
            return cand;
        }
    }
    p.to_path_buf()
}

fn default_run_dir(cfg: &RunConfig, name: &str) -> Option<PathBuf> {
    cfg.run_dir
        .clone()
        .or_else(|| std::env::var_os("FUSION_RUN_DIR").map(PathBuf::from))
        .map(|root| root.join(name))
}

fn file_crc(p: &Path) -> fusion_core::Result<String> {
    Ok(format!("{:08x}", crc32fast::hash(&fs::read(p)?)))
}

fn dataset_inputs(dir: &Path, ds: &Dataset) -> fusion_core::Result<serde_json::Value> {
    Ok(json!({
        "path": dir,
        "manifest_crc32": file_crc(&dir.join(dataset::MANIFEST_FILE))?,
        "episodes_crc32": format!("{:08x}", ds.manifest.episodes_crc32),
    }))
}

fn checkpoint_inputs(stem: &Path) -> fusion_core::Result<serde_json::Value> {
    Ok(json!({
        "path": stem,
        "manifest_crc32": file_crc(&stem.with_extension("json"))?,
        "tensors_crc32": file_crc(&stem.with_extension("bin"))?,
    }))
}

/// Resolved config plus the versions and input checksums needed to replay.
fn write_run_files(
    dir: &Path,
    cfg: &RunConfig,
    inputs: serde_json::Value,
) -> fusion_core::Result<()> {
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let run = json!({
        "fusion_version": env!("CARGO_PKG_VERSION"),
        "dataset_schema_version": SCHEMA_VERSION,
        "inputs": inputs,
        "argv": std::env::args().collect::<Vec<_>>(),
    });
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&run)?)?;
    Ok(())
}
