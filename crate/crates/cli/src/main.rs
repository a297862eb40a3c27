use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mcpa::backbone::ModelConfig;
use mcpa::check::run_gradcheck;
use mcpa::config::{Preset, RunConfig};
use mcpa::data::Split;
use mcpa::harness::{image_inputs, open_model, run_eval, run_predict, run_schedule_plot, run_synth, schedule_curves};
use mcpa::tensor::OpKind;
use mcpa::train::train_run;

#[derive(Parser)]
#[command(name = "mcpa", version, about = "Multi-scale cross perceptron attention segmentation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration, applied over the preset
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (overrides the configuration)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the configuration)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base preset
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Organ,
    Vessel,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes the resolved config, metrics.csv and checkpoints
    Train {
        /// Resume from a checkpoint written by an earlier run of this config
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-class Dice, HD95 and AUC of a checkpoint on a dataset split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Label masks for an image or a directory of images
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Also write one probability map per class
        #[arg(long)]
        probs: bool,
    },
    /// Finite-difference check of every primitive, the loss and each model component
    Gradcheck {
        /// Sampled coordinates per model component
        #[arg(long, default_value_t = 8)]
        per_component: usize,
        /// Use the configured model instead of the tiny one
        #[arg(long)]
        configured_model: bool,
        /// Flip the sign of one op's backward rule, e.g. `matmul`
        #[arg(long)]
        inject_fault: Option<String>,
    },
    /// Write synthetic train/val/test splits in the dataset layout
    Synth {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// f(E) curves for several rho values as CSV and SVG
    SchedulePlot {
        #[arg(long)]
        e0: Option<f64>,
        #[arg(long)]
        e1: Option<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        rho: Vec<f64>,
        /// Grid spacing in epochs
        #[arg(long, default_value_t = 0.25)]
        step: f64,
    },
}

fn config(common: &Common, fallback: Option<&Path>) -> mcpa::Result<RunConfig> {
    let preset = common.preset.map(|p| match p {
        PresetArg::Organ => Preset::Organ,
        PresetArg::Vessel => Preset::Vessel,
    });
    let path = common.config.as_deref().or(fallback.filter(|p| p.is_file()));
    if let (None, Some(p)) = (&common.config, path) {
        log::info!("using {}", p.display());
    }
    let mut cfg = RunConfig::load(path, preset)?;
    if let Some(s) = common.seed {
        cfg.run.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.run.out_dir = o.clone();
    }
    Ok(cfg)
}

/// `<run>/config.resolved.toml` for a checkpoint at `<run>/checkpoints/x.ckpt`.
fn run_config_of(ckpt: &Path) -> Option<PathBuf> {
    Some(ckpt.parent()?.parent()?.join("config.resolved.toml"))
}

fn run(cli: Cli) -> mcpa::Result<bool> {
    let c = &cli.common;
    match cli.cmd {
        Command::Train { resume } => {
            let cfg = config(c, None)?;
            let t = train_run::<f32>(&cfg, resume.as_deref())?;
            println!("trained {} epochs ({} steps); outputs in {}", t.epoch, t.step, cfg.run.out_dir.display());
        }
        Command::Eval { checkpoint, split } => {
            let cfg = config(c, run_config_of(&checkpoint).as_deref())?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let (path, reports) = run_eval::<f32>(&cfg, &checkpoint, split)?;
            for (name, r) in &reports {
                let hd = r.mean_hd95.map_or("undefined".to_string(), |v| format!("{v:.3}"));
                let auc = r.auc.map_or(String::new(), |a| format!("  AUC {a:.2}"));
                println!("{name:<6} mean Dice {:.2}  HD95 {hd}{auc}", r.mean_dice);
            }
            println!("report written to {}", path.display());
        }
        Command::Predict { checkpoint, input, probs } => {
            let cfg = config(c, run_config_of(&checkpoint).as_deref())?;
            let model = open_model::<f32>(&cfg, &checkpoint)?;
            let out = c.out.clone().unwrap_or_else(|| cfg.run.out_dir.join("predictions"));
            let files = run_predict(&model, &image_inputs(&input)?, &out, probs)?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
        Command::Gradcheck { per_component, configured_model, inject_fault } => {
            let fault = match inject_fault {
                Some(name) => Some(OpKind::from_name(&name).ok_or_else(|| {
                    let names: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
                    mcpa::Error::config(format!("unknown op `{name}`; one of {}", names.join(", ")))
                })?),
                None => None,
            };
            let model = if configured_model { config(c, None)?.model } else { ModelConfig::tiny() };
            let seed = c.seed.unwrap_or(0);
            let rep = run_gradcheck(&model, per_component, seed, fault)?;
            for l in rep.lines() {
                println!("{l}");
            }
            let failed: Vec<&str> = rep.failures().iter().map(|s| s.name.as_str()).collect();
            if failed.is_empty() {
                println!("gradcheck passed at tolerance {:e}", rep.tolerance);
            } else {
                println!("gradcheck FAILED: {}", failed.join(", "));
                return Ok(false);
            }
        }
        Command::Synth { count, size } => {
            let mut cfg = config(c, None)?;
            if let Some(n) = count {
                cfg.data.synth.count = n;
            }
            if let Some(s) = size {
                cfg.data.synth.size = s;
            }
            if let Some(s) = c.seed {
                cfg.data.synth.seed = s;
            }
            let out = c.out.clone().unwrap_or_else(|| cfg.run.out_dir.join("synth"));
            for m in run_synth(&cfg, &out)? {
                println!("{} pairs in {}", m.len(), m.root.display());
            }
        }
        Command::SchedulePlot { e0, e1, rho, step } => {
            let cfg = config(c, None)?;
            let p = cfg.schedule.params();
            let curves = schedule_curves(e0.unwrap_or(p.e0), e1.unwrap_or(p.e1), &rho, step)?;
            let out = c.out.clone().unwrap_or_else(|| cfg.run.out_dir.clone());
            let (csv, svg) = run_schedule_plot(&curves, &out)?;
            println!("wrote {} and {}", csv.display(), svg.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
