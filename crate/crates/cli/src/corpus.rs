//! Corpus-level commands: `stats` and `sweep-tau`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use step_core::cost::{partition_stats, CountStats, PartitionStats};
use step_core::grid::{make_grid, SuperpatchPartition};
use step_core::merge::{MergeMode, MergeThresholds};
use step_core::metrics::ConfusionMatrix;
use step_core::pipeline::Segmenter;

use crate::config::Resolved;
use crate::error::{CliError, Result};
use crate::scenes::{load_corpus, load_manifest, write_json, Scene, SCHEMA_VERSION};
use crate::segment::size_key;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FractionStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl FractionStats {
    fn of(values: &[f64]) -> Self {
        Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadPruning {
    pub head: usize,
    pub layer: usize,
    pub cumulative_fraction: FractionStats,
    pub incremental_fraction: FractionStats,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PruningSummary {
    pub plan: Vec<usize>,
    pub tau_halt: f64,
    pub heads: Vec<HeadPruning>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub schema_version: u32,
    #[serde(flatten)]
    pub partitions: PartitionStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pruning: Option<PruningSummary>,
}

fn partition_scene(scene: &Scene, resolved: &Resolved) -> Result<SuperpatchPartition> {
    let grid = make_grid(&scene.image.to_rgb())
        .map_err(|e| CliError::Input(format!("{}: {e}", scene.name)))?;
    Ok(resolved.pipeline.merge.merge(&grid)?)
}

fn ensure_nonempty(corpus: &[Scene], dir: &Path) -> Result<()> {
    if corpus.is_empty() {
        return Err(CliError::Input(format!(
            "{}: corpus has no scenes",
            dir.display()
        )));
    }
    Ok(())
}

pub fn corpus_stats(corpus: &[Scene], resolved: &Resolved) -> Result<CorpusStats> {
    let partitions: Vec<SuperpatchPartition> = corpus
        .par_iter()
        .map(|s| partition_scene(s, resolved))
        .collect::<Result<_>>()?;
    let partitions = partition_stats(&partitions)?;

    let plan = &resolved.pipeline.plan;
    let pruning = if plan.is_empty() {
        None
    } else {
        let segmenter = Segmenter::new(resolved.pipeline.clone())?;
        let prunes = corpus
            .par_iter()
            .map(|s| {
                Ok(segmenter
                    .segment(&s.image, resolved.overrides.as_ref())?
                    .prune)
            })
            .collect::<Result<Vec<_>>>()?;
        let heads = plan
            .positions()
            .iter()
            .enumerate()
            .map(|(k, &layer)| {
                let cum: Vec<f64> = prunes.iter().map(|p| p.cumulative_fraction[k]).collect();
                let inc: Vec<f64> = prunes.iter().map(|p| p.incremental_fraction[k]).collect();
                HeadPruning {
                    head: k,
                    layer,
                    cumulative_fraction: FractionStats::of(&cum),
                    incremental_fraction: FractionStats::of(&inc),
                }
            })
            .collect();
        Some(PruningSummary {
            plan: plan.positions().to_vec(),
            tau_halt: resolved.pipeline.halt.tau_halt,
            heads,
        })
    };
    Ok(CorpusStats {
        schema_version: SCHEMA_VERSION,
        partitions,
        pruning,
    })
}

pub fn stats_table(stats: &CorpusStats) -> String {
    let mut out = format!("{:<8} {:>10} {:>8} {:>8}\n", "size", "mean", "max", "min");
    let mut row = |label: &str, c: &CountStats| {
        let _ = writeln!(out, "{label:<8} {:>10.2} {:>8} {:>8}", c.mean, c.max, c.min);
    };
    for s in &stats.partitions.by_size {
        row(&size_key(s.size), &s.count);
    }
    row("tokens", &stats.partitions.tokens);
    let _ = writeln!(
        out,
        "images {}  mean reduction {:.4}",
        stats.partitions.images, stats.partitions.mean_reduction_factor
    );
    if let Some(p) = &stats.pruning {
        let _ = writeln!(
            out,
            "\n{:<6} {:>6} {:>12} {:>12}",
            "head", "layer", "cumulative", "incremental"
        );
        for h in &p.heads {
            let _ = writeln!(
                out,
                "{:<6} {:>6} {:>12.4} {:>12.4}",
                h.head, h.layer, h.cumulative_fraction.mean, h.incremental_fraction.mean
            );
        }
    }
    out
}

pub fn cmd_stats(corpus_dir: &Path, resolved: &Resolved, out: &Path) -> Result<CorpusStats> {
    let corpus = load_corpus(corpus_dir)?;
    ensure_nonempty(&corpus, corpus_dir)?;
    let stats = corpus_stats(&corpus, resolved)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write_json(&out.join("stats.json"), &stats)?;
    write_text(&out.join("stats.txt"), &stats_table(&stats))?;
    write_text(&out.join("config.json"), &resolved.effective.to_json())?;
    Ok(stats)
}

/// One threshold configuration: a preset name or `tau_2:tau_4:tau_8:tau_16`.
pub fn parse_grid_entry(text: &str) -> Result<(String, MergeThresholds)> {
    let text = text.trim();
    if let Some(t) = MergeThresholds::preset(text) {
        return Ok((text.to_string(), t));
    }
    let values: Vec<f64> = text
        .split(':')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("grid entry {text:?}: {e}")))?;
    match values[..] {
        [a, b, c, d] => Ok((text.to_string(), MergeThresholds::new(a, b, c, d)?)),
        _ => Err(CliError::Usage(format!(
            "grid entry {text:?}: expected a preset or four ':'-separated thresholds"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TauRow {
    pub label: String,
    pub thresholds: MergeThresholds,
    pub mean_tokens: f64,
    pub mean_reduction_factor: f64,
    pub mean_flops: f64,
    pub miou: f64,
    pub pixel_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TauSweep {
    pub schema_version: u32,
    pub images: usize,
    pub rows: Vec<TauRow>,
}

pub fn sweep_tau(
    corpus: &[Scene],
    grid: &[(String, MergeThresholds)],
    resolved: &Resolved,
    num_classes: usize,
) -> Result<TauSweep> {
    let mut rows = Vec::with_capacity(grid.len());
    for (label, thresholds) in grid {
        let mut config = resolved.pipeline.clone();
        config.merge.mode = MergeMode::Dynamic(*thresholds);
        let segmenter = Segmenter::new(config)?;
        let per_scene = corpus
            .par_iter()
            .map(|s| {
                let seg = segmenter.segment(&s.image, resolved.overrides.as_ref())?;
                let mut cm = ConfusionMatrix::new(num_classes)?;
                cm.accumulate(&seg.pixel_labels, &s.ground_truth)
                    .map_err(|e| CliError::Input(format!("{}: {e}", s.name)))?;
                let flops = seg
                    .cost
                    .with_scorer_flops(resolved.scorer_flops)
                    .total_flops;
                Ok((seg.partition.len(), seg.partition.cells(), flops, cm))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = per_scene.len() as f64;
        let mut cm = ConfusionMatrix::new(num_classes)?;
        for (_, _, _, c) in &per_scene {
            cm.merge(c)?;
        }
        rows.push(TauRow {
            label: label.clone(),
            thresholds: *thresholds,
            mean_tokens: per_scene.iter().map(|r| r.0 as f64).sum::<f64>() / n,
            mean_reduction_factor: per_scene
                .iter()
                .map(|r| r.1 as f64 / r.0 as f64)
                .sum::<f64>()
                / n,
            mean_flops: per_scene.iter().map(|r| r.2 as f64).sum::<f64>() / n,
            miou: cm.miou()?,
            pixel_accuracy: cm.pixel_accuracy()?,
        });
    }
    Ok(TauSweep {
        schema_version: SCHEMA_VERSION,
        images: corpus.len(),
        rows,
    })
}

pub fn tau_table(sweep: &TauSweep) -> String {
    let mut out = format!(
        "{:<24} {:>10} {:>10} {:>18} {:>8} {:>8}\n",
        "thresholds", "tokens", "reduction", "flops", "miou", "acc"
    );
    for r in &sweep.rows {
        let _ = writeln!(
            out,
            "{:<24} {:>10.2} {:>10.4} {:>18.0} {:>8.4} {:>8.4}",
            r.label, r.mean_tokens, r.mean_reduction_factor, r.mean_flops, r.miou, r.pixel_accuracy
        );
    }
    out
}

pub fn cmd_sweep_tau(
    corpus_dir: &Path,
    grid: &[(String, MergeThresholds)],
    resolved: &Resolved,
    out: &Path,
) -> Result<TauSweep> {
    let manifest = load_manifest(corpus_dir)?;
    let corpus = load_corpus(corpus_dir)?;
    ensure_nonempty(&corpus, corpus_dir)?;
    let num_classes = resolved
        .pipeline
        .arch
        .num_classes
        .max(manifest.spec.num_classes as usize);
    let sweep = sweep_tau(&corpus, grid, resolved, num_classes)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write_json(&out.join("sweep_tau.json"), &sweep)?;
    write_text(&out.join("sweep_tau.txt"), &tau_table(&sweep))?;
    write_text(&out.join("config.json"), &resolved.effective.to_json())?;
    Ok(sweep)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}
