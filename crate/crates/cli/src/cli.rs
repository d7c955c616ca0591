use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use step_core::cost::ScheduleModel;
use step_core::encoder::ExecMode;
use step_core::pixel_io::{SceneSpec, ShapeKind};

use crate::config::{parse_plan, MergeKind, Resolved, RunConfig};
use crate::corpus::{cmd_stats, cmd_sweep_tau, parse_grid_entry, stats_table, tau_table};
use crate::error::{CliError, Result};
use crate::eval::evaluate;
use crate::scenes::{gen_scenes, write_json};
use crate::segment::cmd_segment;
use crate::sweep::cmd_sweep;

#[derive(Parser, Debug)]
#[command(
    name = "step",
    version,
    about = "Superpatch merging and early token halting for ViT segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic labeled corpus.
    GenScenes(GenScenesArgs),
    /// Segment one image and write labels, renders and stats.
    Segment(SegmentArgs),
    /// FLOPs of every aux-head placement under a survivor model.
    Sweep(SweepArgs),
    /// Token counts, FLOPs and mIoU over a corpus for a grid of merge thresholds.
    SweepTau(SweepTauArgs),
    /// Superpatch size statistics (and per-head pruning with a plan) over a corpus.
    Stats(StatsArgs),
    /// mIoU of predicted label maps against ground truth.
    Eval(EvalArgs),
}

fn parse_mode(s: &str) -> std::result::Result<ExecMode, String> {
    match s {
        "masked" => Ok(ExecMode::Masked),
        "compact" => Ok(ExecMode::Compact),
        _ => Err(format!("expected masked or compact, got {s:?}")),
    }
}

fn parse_shape(s: &str) -> std::result::Result<ShapeKind, String> {
    match s {
        "rectangle" => Ok(ShapeKind::Rectangle),
        "disk" => Ok(ShapeKind::Disk),
        _ => Err(format!("expected rectangle or disk, got {s:?}")),
    }
}

#[derive(Args, Debug, Default, Clone)]
pub struct ConfigArgs {
    /// Flat JSON run configuration; flags override its fields.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Merge threshold preset (t4999 or t6899).
    #[arg(long)]
    pub preset: Option<String>,
    /// Architecture preset (vit-base or vit-large).
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Aux head positions, e.g. "8,16"; "" for none.
    #[arg(long)]
    pub plan: Option<String>,
    #[arg(long)]
    pub tau_halt: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<ExecMode>,
    #[arg(long, value_enum)]
    pub merge: Option<MergeKind>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub tau_2: Option<f64>,
    #[arg(long)]
    pub tau_4: Option<f64>,
    #[arg(long)]
    pub tau_8: Option<f64>,
    #[arg(long)]
    pub tau_16: Option<f64>,
    /// Window score file used instead of the homogeneity scorer.
    #[arg(long, value_name = "PATH")]
    pub scores: Option<PathBuf>,
    /// Scripted per-stage confidences (JSON).
    #[arg(long, value_name = "PATH")]
    pub confidence_override: Option<PathBuf>,
    /// Overridden by STEP_SEED when set.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn run_config(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let flags = RunConfig {
            arch: self.arch.clone(),
            layers: self.layers,
            dim: self.dim,
            heads: self.heads,
            num_classes: self.num_classes,
            merge: self.merge,
            preset: self.preset.clone(),
            tau_2: self.tau_2,
            tau_4: self.tau_4,
            tau_8: self.tau_8,
            tau_16: self.tau_16,
            top_k: self.top_k,
            scores: self.scores.clone(),
            tau_halt: self.tau_halt,
            plan: self
                .plan
                .as_deref()
                .map(parse_plan)
                .transpose()
                .map_err(CliError::Usage)?,
            mode: self.mode,
            seed: self.seed,
            confidence_override: self.confidence_override.clone(),
            ..Default::default()
        };
        base.overlay(flags).with_env_seed()
    }

    pub fn resolve(&self) -> Result<Resolved> {
        self.run_config()?.resolve()
    }
}

#[derive(Args, Debug)]
pub struct GenScenesArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 512)]
    pub size: usize,
    #[arg(long, default_value_t = 8)]
    pub num_classes: u32,
    #[arg(long, default_value_t = 4)]
    pub num_shapes: usize,
    #[arg(long, value_delimiter = ',', value_parser = parse_shape, default_value = "rectangle,disk")]
    pub shapes: Vec<ShapeKind>,
    #[arg(long, default_value_t = 2.0)]
    pub noise_sigma: f64,
    /// Overridden by STEP_SEED when set.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[arg(long, value_name = "PATH")]
    pub image: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Record wall-clock runtime in stats.json.
    #[arg(long)]
    pub timing: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Tokens entering the encoder.
    #[arg(long, default_value_t = 1024)]
    pub tokens: usize,
    /// Survivor fraction after the last layer for the linear-in-depth model.
    #[arg(long, default_value_t = 0.6)]
    pub terminal: f64,
    /// Use a depth-independent survivor fraction instead.
    #[arg(long, conflicts_with = "terminal")]
    pub constant: Option<f64>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct SweepTauArgs {
    #[arg(long, value_name = "DIR")]
    pub corpus: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Threshold configurations: presets or tau_2:tau_4:tau_8:tau_16.
    #[arg(long, value_delimiter = ',', default_value = "t4999,t6899")]
    pub grid: Vec<String>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long, value_name = "DIR")]
    pub corpus: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    pub pred: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub gt: PathBuf,
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Directory for eval.json; printed to stdout either way.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenScenes(a) => {
            let seed = RunConfig {
                seed: Some(a.seed),
                ..Default::default()
            }
            .with_env_seed()?
            .seed
            .unwrap_or(a.seed);
            let spec = SceneSpec {
                size: a.size,
                num_classes: a.num_classes,
                num_shapes: a.num_shapes,
                shape_kinds: a.shapes,
                noise_sigma: a.noise_sigma,
                seed,
            };
            let m = gen_scenes(&a.out, a.count, &spec)?;
            println!("wrote {} scenes to {}", m.scenes.len(), a.out.display());
        }
        Command::Segment(a) => {
            let resolved = a.config.resolve()?;
            let stats = cmd_segment(&a.image, &resolved, &a.out, a.timing)?;
            println!(
                "{} tokens ({:.3}x reduction), {} FLOPs -> {}",
                stats.token_count,
                stats.token_reduction,
                stats.flops.total_flops,
                a.out.display()
            );
        }
        Command::Sweep(a) => {
            let resolved = a.config.resolve()?;
            let model = match a.constant {
                Some(fraction) => ScheduleModel::Constant { fraction },
                None => ScheduleModel::LinearDepth {
                    terminal: a.terminal,
                },
            };
            let report = cmd_sweep(&resolved.pipeline.arch, a.tokens, model, &a.out)?;
            print!("{}", step_core::cost::sweep_table(&report.rows));
        }
        Command::SweepTau(a) => {
            let resolved = a.config.resolve()?;
            let grid = a
                .grid
                .iter()
                .map(|g| parse_grid_entry(g))
                .collect::<Result<Vec<_>>>()?;
            let sweep = cmd_sweep_tau(&a.corpus, &grid, &resolved, &a.out)?;
            print!("{}", tau_table(&sweep));
        }
        Command::Stats(a) => {
            let resolved = a.config.resolve()?;
            let stats = cmd_stats(&a.corpus, &resolved, &a.out)?;
            print!("{}", stats_table(&stats));
        }
        Command::Eval(a) => {
            let report = evaluate(&a.pred, &a.gt, a.num_classes)?;
            let json = serde_json::to_string_pretty(&report).expect("plain struct") + "\n";
            if let Some(out) = &a.out {
                std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
                write_json(&out.join("eval.json"), &report)?;
            }
            print!("{json}");
        }
    }
    Ok(())
}
