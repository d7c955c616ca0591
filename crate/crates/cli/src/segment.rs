//! `segment`: one image through the full pipeline, plus its artifacts.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use step_core::cost::CostReport;
use step_core::early_exit::PruneStats;
use step_core::grid::SUPERPATCH_SIZES;
use step_core::pipeline::{render_partition, Segmentation, Segmenter};
use step_core::pixel_io::{read_image, write_image, write_label_map, Image};

use crate::config::Resolved;
use crate::error::{CliError, Result};
use crate::scenes::write_json;

pub const STATS_SCHEMA_VERSION: u32 = 1;

pub const LABELS_FILE: &str = "labels.pgm";
pub const SUPERPATCHES_FILE: &str = "superpatches.ppm";
pub const HALT_STAGE_FILE: &str = "halt_stage.pgm";
pub const STATS_FILE: &str = "stats.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridInfo {
    pub rows: usize,
    pub cols: usize,
    pub cells: usize,
    pub crop_offset: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HaltingStats {
    pub plan: Vec<usize>,
    pub tau_halt: f64,
    #[serde(flatten)]
    pub pruned: PruneStats,
    pub final_tokens: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SizeCount {
    pub size: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentStats {
    pub schema_version: u32,
    pub image: [usize; 2],
    pub grid: GridInfo,
    pub token_count: usize,
    pub tokens_by_size: Vec<SizeCount>,
    pub token_reduction: f64,
    pub halting: HaltingStats,
    pub flops: CostReport,
    pub macs: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runtime_ms: Option<f64>,
}

pub fn size_key(size: usize) -> String {
    format!("{size}x{size}")
}

pub fn segment_stats(
    image: &Image,
    seg: &Segmentation,
    resolved: &Resolved,
    runtime_ms: Option<f64>,
) -> SegmentStats {
    let p = &seg.partition;
    let counts = p.counts_by_size();
    SegmentStats {
        schema_version: STATS_SCHEMA_VERSION,
        image: [image.width(), image.height()],
        grid: GridInfo {
            rows: p.grid_h(),
            cols: p.grid_w(),
            cells: p.cells(),
            crop_offset: [seg.crop_offset.0, seg.crop_offset.1],
        },
        token_count: p.len(),
        tokens_by_size: SUPERPATCH_SIZES
            .iter()
            .zip(counts)
            .map(|(&size, count)| SizeCount { size, count })
            .collect(),
        token_reduction: p.cells() as f64 / p.len() as f64,
        halting: HaltingStats {
            plan: resolved.pipeline.plan.positions().to_vec(),
            tau_halt: resolved.pipeline.halt.tau_halt,
            pruned: seg.prune.clone(),
            final_tokens: seg.stages.final_tokens,
        },
        flops: seg.cost.clone().with_scorer_flops(resolved.scorer_flops),
        macs: seg.macs,
        runtime_ms,
    }
}

/// Segments `image` and writes the four artifacts plus the effective config
/// into `out`. Runtime is only recorded when `timing` is set, so repeated
/// runs produce identical directories by default.
pub fn segment_to_dir(
    image: &Image,
    segmenter: &Segmenter,
    resolved: &Resolved,
    out: &Path,
    timing: bool,
) -> Result<(Segmentation, SegmentStats)> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let start = Instant::now();
    let seg = segmenter.segment(image, resolved.overrides.as_ref())?;
    let runtime = timing.then(|| start.elapsed().as_secs_f64() * 1e3);
    let stats = segment_stats(image, &seg, resolved, runtime);

    write_label_map(&seg.pixel_labels, out.join(LABELS_FILE))?;
    write_image(
        &render_partition(image, &seg.partition, seg.crop_offset),
        out.join(SUPERPATCHES_FILE),
    )?;
    write_label_map(&seg.halt_map, out.join(HALT_STAGE_FILE))?;
    write_json(&out.join(STATS_FILE), &stats)?;
    fs::write(out.join(CONFIG_FILE), resolved.effective.to_json())
        .map_err(|e| CliError::io(&out.join(CONFIG_FILE), e))?;
    Ok((seg, stats))
}

pub fn cmd_segment(
    image_path: &Path,
    resolved: &Resolved,
    out: &Path,
    timing: bool,
) -> Result<SegmentStats> {
    let image = read_image(image_path)?;
    let segmenter = Segmenter::new(resolved.pipeline.clone())?;
    Ok(segment_to_dir(&image, &segmenter, resolved, out, timing)?.1)
}
