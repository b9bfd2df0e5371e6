//! `mgan`: generate data, train, detect, evaluate, check gradients, plot.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mgan_core::config::RunConfig;
use mgan_core::detector::{read_detections, write_detections};
use mgan_core::eval::{evaluate, write_curves_csv, write_curves_svg, EvalReport, SubsetSpec};
use mgan_core::gradsuite::{run_gradient_suite, DEFAULT_TRIALS, GRADCHECK_TOLERANCE};
use mgan_core::model::Mgan;
use mgan_core::synth::io::{read_split, read_split_annotations, write_split, ParseMode};
use mgan_core::synth::{generate_split, SceneSpec};
use mgan_core::train::{train, TrainIo, FINAL_CHECKPOINT};
use mgan_core::{Error, Result};

#[derive(Parser)]
#[command(name = "mgan", version, about = "Mask-guided attention detector at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic split to disk.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image id prefix.
        #[arg(long, default_value = "img")]
        prefix: String,
    },
    /// Train on the configured split; writes the run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from an epoch checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run a trained model over a split and write detections.
    Detect {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split directory; defaults to `data.val_dir`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score detections against a split's annotations.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated subset names; defaults to `eval.subsets`.
        #[arg(long, value_delimiter = ',')]
        subsets: Option<Vec<String>>,
        #[arg(long)]
        iou: Option<f64>,
        /// Report path; defaults to `<run_dir>/report.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Clamp visible boxes that leave their full box instead of failing.
        #[arg(long)]
        lenient: bool,
    },
    /// Finite-difference check of every operation and loss.
    GradCheck {
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON report here as well as printing a summary.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw miss rate against FPPI from one or more reports.
    Plot {
        /// `label=report.json`, repeatable.
        #[arg(long = "run", required = true)]
        runs: Vec<String>,
        /// `.svg` or `.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "miss rate vs FPPI")]
        title: String,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run config; omitted means all defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `dotted.key=value`, applied after the file and environment.
    #[arg(long = "set")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load_with_overrides(p, &self.overrides),
            None => {
                let mut cfg = RunConfig::default();
                cfg.apply_env()?;
                RunConfig::from_toml_with_overrides(&cfg.to_toml(), &self.overrides)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { out, count, seed, prefix } => {
            let scenes = generate_split(&SceneSpec::default(), count, seed, &prefix)?;
            write_split(&out, &scenes)?;
            let n: usize = scenes.iter().map(|s| s.annotations.len()).sum();
            println!("wrote {} images, {n} annotations to {}", scenes.len(), out.display());
        }
        Command::Train { config, resume } => {
            let cfg = config.load()?;
            let (scenes, warnings) = read_split(&cfg.data.train_dir, ParseMode::Strict)?;
            warnings.iter().for_each(|w| log::warn!("{w}"));
            let io = TrainIo {
                run_dir: Some(cfg.run_dir.clone()),
                resume_from: resume,
                stop_after_epoch: None,
            };
            let outcome = train(&cfg, &scenes, &io)?;
            if let Some(last) = outcome.log.last() {
                println!("epoch {} step {} loss {:.5}", outcome.epoch, last.step, last.loss.total);
            }
            println!("checkpoint {}", cfg.run_dir.join(FINAL_CHECKPOINT).display());
        }
        Command::Detect { config, checkpoint, data, out } => {
            let cfg = config.load()?;
            let model = Mgan::load(&checkpoint)?;
            let dir = data.unwrap_or(cfg.data.val_dir.clone());
            let (scenes, _) = read_split(&dir, ParseMode::Lenient)?;
            let dets = model.detect_scenes(&scenes, &cfg.detect)?;
            write_detections(&out, &dets)?;
            println!("wrote {} detections over {} images to {}", dets.len(), scenes.len(), out.display());
        }
        Command::Eval { config, detections, data, subsets, iou, out, lenient } => {
            let cfg = config.load()?;
            let dir = data.unwrap_or(cfg.data.val_dir.clone());
            let mode = if lenient { ParseMode::Lenient } else { ParseMode::Strict };
            let (_, gt, warnings) = read_split_annotations(&dir, mode)?;
            warnings.iter().for_each(|w| log::warn!("{w}"));
            let dets = read_detections(&detections)?;
            let specs = subsets
                .unwrap_or(cfg.eval.subsets.clone())
                .iter()
                .map(|s| SubsetSpec::by_name(s.trim()))
                .collect::<Result<Vec<_>>>()?;
            let report = evaluate(&dets, &gt, &specs, iou.unwrap_or(cfg.eval.iou_threshold))?;
            let out = out.unwrap_or(cfg.run_dir.join("report.json"));
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            report.save(&out)?;
            for s in &report.subsets {
                println!("{:<5} LAMR {:.4}  ({} evaluated, {} ignored)", s.subset.name, s.lamr, s.num_evaluated, s.num_ignored);
            }
        }
        Command::GradCheck { trials, seed, out } => {
            let entries = run_gradient_suite(trials, seed)?;
            for e in &entries {
                let tag = if e.passed { "ok" } else { "FAIL" };
                println!("{tag:4} {:<20} trials {:>3}  max rel err {:.3e}", e.name, e.trials, e.max_rel_error);
            }
            if let Some(path) = out {
                let text = serde_json::to_string_pretty(&entries).expect("report serializes");
                std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
            let failed: Vec<&str> = entries.iter().filter(|e| !e.passed).map(|e| e.name).collect();
            if !failed.is_empty() {
                return Err(Error::NumericInstability(format!(
                    "gradient check above {GRADCHECK_TOLERANCE:e} for {}",
                    failed.join(", ")
                )));
            }
        }
        Command::Plot { runs, out, title } => {
            let runs = runs
                .iter()
                .map(|r| {
                    let (label, path) = r
                        .split_once('=')
                        .ok_or_else(|| Error::Config(format!("--run {r:?} is not label=path")))?;
                    Ok((label.to_string(), EvalReport::load(Path::new(path))?.subsets))
                })
                .collect::<Result<Vec<_>>>()?;
            match out.extension().and_then(|e| e.to_str()) {
                Some("csv") => write_curves_csv(&out, &runs)?,
                Some("svg") => write_curves_svg(&out, &title, &runs)?,
                _ => return Err(Error::Config(format!("{}: output must end in .svg or .csv", out.display()))),
            }
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
